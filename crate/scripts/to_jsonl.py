#!/usr/bin/env python3
"""Convert labeled or unlabeled text files to the JSON Lines corpus format.

Supported inputs:
  tsv   one example per line, "label<TAB>text" (labeled) or "text" (unlabeled)
  csv   a header row with "text" and optionally "label" columns
  dir   IMDB-style directory with pos/ and neg/ subdirectories of .txt files
  lines plain text, one unlabeled document per line

Labels must map to 0 or 1. Use --positive to name the positive label when the
source uses strings; every other label becomes 0.
"""

import argparse
import csv
import json
import pathlib
import sys


def label_of(raw, positive):
    raw = raw.strip()
    if positive is not None:
        return 1 if raw == positive else 0
    if raw not in ("0", "1"):
        sys.exit(f"label {raw!r} is not 0 or 1; pass --positive")
    return int(raw)


def read_tsv(path, positive, labeled):
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if labeled:
                raw, text = line.split("\t", 1)
                yield {"text": text, "label": label_of(raw, positive)}
            else:
                yield {"text": line}


def read_csv(path, positive, labeled):
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            item = {"text": row["text"]}
            if labeled:
                item["label"] = label_of(row["label"], positive)
            yield item


def read_dir(path, positive, labeled):
    for name, label in (("neg", 0), ("pos", 1)):
        for file in sorted((pathlib.Path(path) / name).glob("*.txt")):
            text = file.read_text(encoding="utf-8").replace("<br />", " ")
            yield {"text": text, "label": label} if labeled else {"text": text}


def read_lines(path, positive, labeled):
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield {"text": line.strip()}


READERS = {"tsv": read_tsv, "csv": read_csv, "dir": read_dir, "lines": read_lines}


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("format", choices=sorted(READERS))
    parser.add_argument("input")
    parser.add_argument("output")
    parser.add_argument("--unlabeled", action="store_true", help="drop labels")
    parser.add_argument("--positive", help="source label value that maps to 1")
    args = parser.parse_args()

    labeled = not args.unlabeled and args.format != "lines"
    count = 0
    with open(args.output, "w", encoding="utf-8") as out:
        for item in READERS[args.format](args.input, args.positive, labeled):
            out.write(json.dumps(item, ensure_ascii=False) + "\n")
            count += 1
    print(f"wrote {count} examples to {args.output}")


if __name__ == "__main__":
    main()
