//! Corpus ingestion: tokenization, vocabulary, JSON Lines corpora, pretrained
//! embedding files, unlabeled-pool sampling and batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::{self, stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("requested {requested} examples from a pool of {available}")]
    Bounds { requested: usize, available: usize },
    #[error("cannot encode an empty token sequence")]
    EmptyText,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Lowercases, splits on whitespace, and peels leading/trailing ASCII
/// punctuation off each word as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| c.is_ascii_punctuation()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| c.is_ascii_punctuation()).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

/// Token/id mapping with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Frequency-ranked vocabulary: tokens seen at least `min_freq` times,
    /// most frequent first with lexicographic tie-breaking, truncated so the
    /// total size including PAD and UNK is at most `max_size`.
    pub fn build<'a, I, S>(texts: I, min_freq: usize, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        assert!(min_freq >= 1 && max_size >= 3, "min_freq >= 1 and max_size >= 3");
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t.to_string()));
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, unknown tokens to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(DataError::EmptyText);
        }
        Ok(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

/// Token span `[start, end)`.
pub type Span = (usize, usize);

/// A tokenized document before vocabulary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub tokens: Vec<String>,
    pub label: Option<u8>,
    pub rationale: Option<Vec<Span>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: Option<u8>,
    pub raw_tokens: Vec<String>,
    pub rationale: Option<Vec<Span>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub sample_seed: Option<u64>,
    pub sample_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus<T = Example> {
    pub examples: Vec<T>,
    pub kind: CorpusKind,
    pub provenance: Provenance,
}

pub type RawCorpus = Corpus<Document>;

impl<T> Corpus<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl RawCorpus {
    /// Encodes every document; empty documents are rejected.
    pub fn encode(&self, vocab: &Vocabulary) -> Result<Corpus> {
        let examples = self
            .examples
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let ids = vocab.encode(&d.tokens).map_err(|_| DataError::Format {
                    path: self.provenance.source.clone().into(),
                    line: i + 1,
                    msg: "empty text".into(),
                })?;
                Ok(Example {
                    ids,
                    label: d.label,
                    raw_tokens: d.tokens.clone(),
                    rationale: d.rationale.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            examples,
            kind: self.kind,
            provenance: self.provenance.clone(),
        })
    }

    pub fn token_lists(&self) -> impl Iterator<Item = &[String]> {
        self.examples.iter().map(|d| d.tokens.as_slice())
    }
}

impl Corpus {
    /// Same examples with labels dropped.
    pub fn unlabeled(&self) -> Corpus {
        Corpus {
            examples: self
                .examples
                .iter()
                .map(|e| Example {
                    label: None,
                    ..e.clone()
                })
                .collect(),
            kind: CorpusKind::Unlabeled,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Deserialize)]
struct JsonLine {
    text: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
    #[serde(default)]
    rationale: Option<Vec<(usize, usize)>>,
}

/// Reads a JSON Lines corpus. Blank lines are skipped.
pub fn load_jsonl(path: &Path, kind: CorpusKind) -> Result<RawCorpus> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |msg: String| DataError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parsed: JsonLine = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        let label = match (&parsed.label, kind) {
            (None, CorpusKind::Labeled) => return Err(fmt("missing \"label\"".into())),
            (_, CorpusKind::Unlabeled) => None,
            (Some(v), CorpusKind::Labeled) => match v.as_u64() {
                Some(l @ (0 | 1)) => Some(l as u8),
                _ => return Err(fmt(format!("label {v} is not 0 or 1"))),
            },
        };
        let tokens = tokenize(&parsed.text);
        if tokens.is_empty() {
            return Err(fmt("empty text".into()));
        }
        if let Some(spans) = &parsed.rationale {
            validate_spans(spans, tokens.len()).map_err(fmt)?;
        }
        examples.push(Document {
            tokens,
            label,
            rationale: parsed.rationale,
        });
    }
    Ok(Corpus {
        examples,
        kind,
        provenance: Provenance {
            source: path.display().to_string(),
            sample_seed: None,
            sample_count: None,
        },
    })
}

#[derive(Serialize)]
struct JsonLineOut<'a> {
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rationale: Option<&'a [Span]>,
}

/// Writes documents as JSON Lines, tokens joined by single spaces.
pub fn write_jsonl(path: &Path, corpus: &RawCorpus) -> Result<()> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    for doc in &corpus.examples {
        let line = JsonLineOut {
            text: doc.tokens.join(" "),
            label: doc.label,
            rationale: doc.rationale.as_deref(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Checks that spans are non-empty, in range, sorted and disjoint.
pub fn validate_spans(spans: &[Span], len: usize) -> std::result::Result<(), String> {
    let mut prev_end = 0;
    for (i, &(s, e)) in spans.iter().enumerate() {
        if s >= e || e > len {
            return Err(format!("span [{s}, {e}) invalid for {len} tokens"));
        }
        if i > 0 && s < prev_end {
            return Err(format!("span [{s}, {e}) overlaps or precedes its predecessor"));
        }
        prev_end = e;
    }
    Ok(())
}

/// Reads a whitespace-separated embedding file into a `|V| x dim` table.
/// Rows for tokens missing from the file are drawn from `U(-0.1, 0.1)`; the
/// PAD row is zero. Returns the table and the number of rows filled from the
/// file.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<(Tensor, usize)> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut table = random_embeddings(vocab.len(), dim, seed);
    let mut filled = vec![false; vocab.len()];
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let fmt = |msg: String| DataError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(fmt(format!(
                "expected {dim} values after the token, found {}",
                fields.len() - 1
            )));
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt(e.to_string()))?;
        if let Some(id) = vocab.get(fields[0]) {
            if id != PAD {
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
                filled[id] = true;
            }
        }
    }
    let count = filled.iter().filter(|&&f| f).count();
    Ok((table, count))
}

/// `rows x dim` table from `U(-0.1, 0.1)` with a zero PAD row.
pub fn random_embeddings(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = rng::seeded(seed, stream::EMBEDDING, 0);
    let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
    data[..dim].fill(0.0);
    Tensor::new(vec![rows, dim], data).expect("rows and dim must be positive")
}

/// Uniform sample of `count` examples without replacement, kept in pool order.
pub fn sample_unlabeled(pool: &Corpus, count: usize, seed: u64) -> Result<Corpus> {
    if count > pool.len() {
        return Err(DataError::Bounds {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = rng::seeded(seed, stream::SAMPLE, count as u64);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(Corpus {
        examples: picked.into_iter().map(|i| pool.examples[i].clone()).collect(),
        kind: pool.kind,
        provenance: Provenance {
            source: pool.provenance.source.clone(),
            sample_seed: Some(seed),
            sample_count: Some(count),
        },
    })
}

/// Index batches covering `0..len` once. When shuffling, the order for a
/// given epoch is derived from `(seed, epoch)`.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    stream_tag: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut rng::seeded(seed, stream_tag, epoch));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batches of example references for one epoch.
pub fn batch_iter<'a>(
    corpus: &'a Corpus,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Vec<&'a Example>> + 'a {
    batch_indices(corpus.len(), batch_size, shuffle, seed, stream::SHUFFLE_LABELED, epoch)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &corpus.examples[i]).collect())
}
