//! Synthetic binary classification corpora.
//!
//! Each class owns a set of keyword tokens (`pos3`, `neg17`, ...) drawn with
//! Zipf-distributed frequencies, so a small labeled sample sees only the
//! common keywords while rare ones mostly appear in unlabeled text alongside
//! common ones. The remaining positions hold class-neutral distractors
//! (`w42`). Keyword positions are recorded as gold rationale spans.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, stream, Rng};
use crate::textdata::{Corpus, CorpusKind, Document, Provenance, RawCorpus, Span};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub keywords_per_class: usize,
    pub distractors: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    /// Exponent of the keyword frequency law; 0 gives uniform keywords.
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            keywords_per_class: 40,
            distractors: 100,
            min_len: 6,
            max_len: 10,
            min_keywords: 1,
            max_keywords: 3,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    /// One keyword per class and nothing else: every document is either
    /// `pos0` or `neg0` repeated, which a linear model separates.
    pub fn separable() -> Self {
        SynthConfig {
            keywords_per_class: 1,
            distractors: 0,
            min_len: 1,
            max_len: 3,
            min_keywords: 1,
            max_keywords: 3,
            zipf_exponent: 0.0,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if self.keywords_per_class == 0 {
            return Err("keywords_per_class must be >= 1".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err("need 1 <= min_len <= max_len".into());
        }
        if self.min_keywords == 0 || self.min_keywords > self.max_keywords || self.min_keywords > self.min_len {
            return Err("need 1 <= min_keywords <= max_keywords and min_keywords <= min_len".into());
        }
        if self.distractors == 0 && self.max_keywords < self.max_len {
            return Err("documents longer than max_keywords need distractors".into());
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err("zipf_exponent must be >= 0".into());
        }
        Ok(())
    }
}

pub fn keyword(label: u8, k: usize) -> String {
    if label == 1 {
        format!("pos{k}")
    } else {
        format!("neg{k}")
    }
}

/// `count` documents. With `labeled` false the labels are dropped but the
/// documents are drawn from the same distribution.
pub fn generate(config: &SynthConfig, count: usize, labeled: bool, seed: u64, index: u64) -> RawCorpus {
    config.validate().expect("invalid synthetic corpus config");
    let mut rng = rng::seeded(seed, stream::SYNTH, index);
    let weights: Vec<f64> = (0..config.keywords_per_class)
        .map(|k| ((k + 1) as f64).powf(-config.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    let examples = (0..count)
        .map(|_| {
            let doc = document(config, &zipf, &mut rng);
            Document {
                label: labeled.then_some(doc.label.expect("generated with a label")),
                ..doc
            }
        })
        .collect();
    Corpus {
        examples,
        kind: if labeled {
            CorpusKind::Labeled
        } else {
            CorpusKind::Unlabeled
        },
        provenance: Provenance {
            source: format!("synthetic(seed={seed},index={index})"),
            sample_seed: None,
            sample_count: None,
        },
    }
}

fn document(config: &SynthConfig, zipf: &WeightedIndex<f64>, rng: &mut Rng) -> Document {
    let label = u8::from(rng.random_bool(0.5));
    let len = rng.random_range(config.min_len..=config.max_len);
    let n_kw = if config.distractors == 0 {
        len
    } else {
        rng.random_range(config.min_keywords..=config.max_keywords.min(len))
    };
    let positions = rand::seq::index::sample(rng, len, n_kw).into_vec();
    let mut is_kw = vec![false; len];
    for p in positions {
        is_kw[p] = true;
    }
    let tokens = is_kw
        .iter()
        .map(|&kw| {
            if kw {
                keyword(label, zipf.sample(rng))
            } else {
                format!("w{}", rng.random_range(0..config.distractors))
            }
        })
        .collect();
    let mut spans: Vec<Span> = Vec::new();
    for (t, &kw) in is_kw.iter().enumerate() {
        if !kw {
            continue;
        }
        match spans.last_mut() {
            Some(last) if last.1 == t => last.1 = t + 1,
            _ => spans.push((t, t + 1)),
        }
    }
    Document {
        tokens,
        label: Some(label),
        rationale: Some(spans),
    }
}

/// The standard split used by the experiments: labeled train, validation and
/// test sets plus an unlabeled pool, each from its own random stream.
#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: RawCorpus,
    pub valid: RawCorpus,
    pub test: RawCorpus,
    pub unlabeled: RawCorpus,
}

pub fn splits(config: &SynthConfig, sizes: [usize; 4], seed: u64) -> SynthSplits {
    SynthSplits {
        train: generate(config, sizes[0], true, seed, 0),
        valid: generate(config, sizes[1], true, seed, 1),
        test: generate(config, sizes[2], true, seed, 2),
        unlabeled: generate(config, sizes[3], false, seed, 3),
    }
}
