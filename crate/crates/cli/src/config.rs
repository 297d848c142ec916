//! Run configuration: JSON file, command-line overrides, and corpus loading.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attnvat::advtrain::{Technique, TrainerConfig};
use attnvat::model::{ModelConfig, ModelParams};
use attnvat::textdata::{load_embeddings, load_jsonl, sample_unlabeled, Corpus, CorpusKind, Vocabulary};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Bad flags or configuration values; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    /// How many unlabeled examples to sample from the pool; all when absent.
    pub unlabeled_count: Option<usize>,
    pub embeddings: Option<PathBuf>,
    pub min_freq: usize,
    pub max_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention_dim: Option<usize>,
    pub seed: u64,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(0);
        RunConfig {
            train: None,
            valid: None,
            unlabeled: None,
            unlabeled_count: None,
            embeddings: None,
            min_freq: 1,
            max_vocab: 50_000,
            embed_dim: model.embed_dim,
            hidden: model.hidden,
            attention_dim: None,
            seed: 0,
            trainer: TrainerConfig::default(),
        }
    }
}

/// Flags shared by the training commands. Each one overrides the matching
/// key of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled training corpus (JSON Lines).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Labeled validation corpus used for model selection.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Unlabeled pool for VAT techniques.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long)]
    pub unlabeled_count: Option<usize>,
    /// Pretrained embeddings, one `token v1 ... vd` line per word.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub technique: Option<Technique>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

impl RunConfig {
    /// Config file (if any), then flags, then the seed.
    pub fn resolve(flags: &TrainFlags, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))
                    .map_err(|e| UsageError(format!("{e:#}")))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let set_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set_path(&mut cfg.train, &flags.train);
        set_path(&mut cfg.valid, &flags.valid);
        set_path(&mut cfg.unlabeled, &flags.unlabeled);
        set_path(&mut cfg.embeddings, &flags.embeddings);
        if flags.unlabeled_count.is_some() {
            cfg.unlabeled_count = flags.unlabeled_count;
        }
        let t = &mut cfg.trainer;
        if let Some(v) = flags.technique {
            t.technique = v;
        }
        if let Some(v) = flags.epochs {
            t.epochs = v;
        }
        if let Some(v) = flags.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = flags.learning_rate {
            t.optimizer.learning_rate = v;
        }
        if let Some(v) = flags.l2 {
            t.l2 = v;
        }
        if let Some(v) = flags.patience {
            t.patience = (v > 0).then_some(v);
        }
        if let Some(v) = flags.epsilon {
            t.perturbation.epsilon = v;
        }
        if let Some(v) = flags.xi {
            t.perturbation.xi = v;
        }
        if let Some(v) = flags.lambda {
            t.perturbation.lambda = v;
        }
        if let Some(v) = flags.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = flags.hidden {
            cfg.hidden = v;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
        self.trainer.perturbation.seed = seed;
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return usage("embed_dim must be >= 1");
        }
        if self.hidden == 0 {
            return usage("hidden must be >= 1");
        }
        if self.attention_dim == Some(0) {
            return usage("attention_dim must be >= 1");
        }
        if self.min_freq == 0 || self.max_vocab < 3 {
            return usage("min_freq must be >= 1 and max_vocab >= 3");
        }
        self.trainer
            .validate()
            .map_err(|e| UsageError(format!("invalid trainer config: {e}")))?;
        Ok(())
    }

    pub fn require_train(&self) -> Result<&Path> {
        match &self.train {
            Some(p) => Ok(p),
            None => usage("missing training corpus: pass --train or set \"train\" in the config"),
        }
    }

    pub fn require_valid(&self) -> Result<&Path> {
        match &self.valid {
            Some(p) => Ok(p),
            None => usage("missing validation corpus: pass --valid or set \"valid\" in the config"),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            attention_dim: self.attention_dim,
        }
    }
}

/// Encoded corpora sharing one vocabulary, built from the training corpus
/// and the unlabeled pool.
pub struct Data {
    pub vocab: Vocabulary,
    pub train: Corpus,
    pub valid: Corpus,
    pub pool: Option<Corpus>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Data> {
        let train_path = cfg.require_train()?;
        let valid_path = cfg.require_valid()?;
        let train_raw = load_jsonl(train_path, CorpusKind::Labeled)?;
        let valid_raw = load_jsonl(valid_path, CorpusKind::Labeled)?;
        let pool_raw = cfg
            .unlabeled
            .as_deref()
            .map(|p| load_jsonl(p, CorpusKind::Unlabeled))
            .transpose()?;
        let vocab = Vocabulary::build(
            train_raw
                .token_lists()
                .chain(pool_raw.iter().flat_map(|p| p.token_lists())),
            cfg.min_freq,
            cfg.max_vocab,
        );
        Ok(Data {
            train: train_raw.encode(&vocab)?,
            valid: valid_raw.encode(&vocab)?,
            pool: pool_raw.map(|p| p.encode(&vocab)).transpose()?,
            vocab,
        })
    }

    /// Unlabeled sample for one run: `count` examples (or the whole pool)
    /// drawn with `seed`, or none for a zero count or a missing pool.
    pub fn unlabeled(&self, count: Option<usize>, seed: u64) -> Result<Option<Corpus>> {
        match (&self.pool, count) {
            (None, Some(n)) if n > 0 => usage("unlabeled_count is set but no --unlabeled pool was given"),
            (None, _) | (Some(_), Some(0)) => Ok(None),
            (Some(pool), None) => Ok(Some(pool.clone())),
            (Some(pool), Some(n)) => Ok(Some(sample_unlabeled(pool, n, seed)?)),
        }
    }

    pub fn init_params(&self, cfg: &RunConfig, seed: u64) -> Result<ModelParams> {
        let model = cfg.model_config(self.vocab.len());
        Ok(match &cfg.embeddings {
            Some(path) => {
                let (table, _) = load_embeddings(path, &self.vocab, cfg.embed_dim, seed)?;
                ModelParams::init_with_embedding(model, table, seed)
            }
            None => ModelParams::init(model, seed),
        })
    }
}
