//! Every command, run twice with the same configuration and seed, must write
//! byte-identical reports.

use std::fs;
use std::path::Path;

use crate::cli::{ok, s, SynthData};

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn same(label: &str, a: &Path, b: &Path) -> Result<(), String> {
    if read(a)? == read(b)? {
        Ok(())
    } else {
        Err(format!("{label}: {} and {} differ", a.display(), b.display()))
    }
}

pub fn criterion() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let mut compared = 0;

    let data: Vec<SynthData> = ["a", "b"]
        .iter()
        .map(|r| {
            SynthData::generate(
                &root.join(r).join("data"),
                7,
                &["--n-unlabeled", "300", "--n-valid", "60", "--n-test", "60"],
            )
        })
        .collect::<Result<_, _>>()?;
    for split in ["train", "valid", "test", "unlabeled"] {
        same(
            "gen-synth",
            Path::new(&data[0].path(split)),
            Path::new(&data[1].path(split)),
        )?;
        compared += 1;
    }
    let d = &data[0];
    let (train, valid, pool, test) = (d.path("train"), d.path("valid"), d.path("unlabeled"), d.path("test"));
    let common = [
        "--train",
        &train,
        "--valid",
        &valid,
        "--unlabeled",
        &pool,
        "--technique",
        "attn_ivat",
        "--embed-dim",
        "6",
        "--hidden",
        "3",
        "--epochs",
        "3",
        "--seed",
        "11",
    ];

    for r in ["a", "b"] {
        let run = root.join(r).join("run");
        let mut args = vec!["train", "--unlabeled-count", "100", "--out", s(&run)];
        args.extend_from_slice(&common);
        ok(&args)?;
        let ckpt = run.join("checkpoint");
        ok(&[
            "evaluate",
            "--checkpoint",
            s(&ckpt),
            "--test",
            &test,
            "--out",
            s(&root.join(r).join("eval.json")),
        ])?;
        ok(&[
            "rationale",
            "--checkpoint",
            s(&ckpt),
            "--corpus",
            &test,
            "--out",
            s(&root.join(r).join("rationale.json")),
        ])?;

        let mut args = vec!["sweep-unlabeled", "--counts", "0,50", "--n-seeds", "2", "--out"];
        let sweep = root.join(r).join("sweep.csv");
        args.push(s(&sweep));
        args.extend_from_slice(&common);
        ok(&args)?;

        let eps = root.join(r).join("eps.csv");
        let mut args = vec![
            "epsilon-search",
            "--grid",
            "0.1,3",
            "--unlabeled-count",
            "50",
            "--out",
            s(&eps),
        ];
        args.extend_from_slice(&common);
        ok(&args)?;
    }
    let (a, b) = (root.join("a"), root.join("b"));
    for file in [
        "run/config.json",
        "run/checkpoint",
        "run/report.json",
        "run/metrics.csv",
        "eval.json",
        "rationale.json",
        "sweep.csv",
        "eps.csv",
    ] {
        same(file, &a.join(file), &b.join(file))?;
        compared += 1;
    }
    Ok(format!(
        "{compared} output files byte-identical across reruns of all six commands"
    ))
}
