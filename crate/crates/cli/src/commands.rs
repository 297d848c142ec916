use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attnvat::advtrain::{epsilon_search, train, TrainError, TrainingReport};
use attnvat::checkpoint;
use attnvat::eval::{
    attention_gradient_correlation, corpus_f1, extract_hard_rationale, hard_rationale_metrics, mask_from_spans,
    soft_rationale_metrics, EvalError,
};
use attnvat::model::{forward, ModelParams};
use attnvat::synth::{self, SynthConfig};
use attnvat::textdata::{load_jsonl, write_jsonl, CorpusKind, DataError, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{usage, Data, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn checkpoint_extra(vocab: &Vocabulary, cfg: &RunConfig) -> serde_json::Value {
    json!({
        "vocab": vocab,
        "technique": cfg.trainer.technique,
    })
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let (params, extra) = checkpoint::load(path)?;
    let vocab: Vocabulary = serde_json::from_value(extra["vocab"].clone())
        .map_err(|e| checkpoint::CheckpointError::Header(format!("checkpoint carries no vocabulary: {e}")))?;
    if vocab.len() != params.config().vocab_size {
        return Err(checkpoint::CheckpointError::Incompatible(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            params.config().vocab_size
        ))
        .into());
    }
    Ok((params, vocab))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainingReport> {
    let data = Data::load(cfg)?;
    let unlabeled = data.unlabeled(cfg.unlabeled_count, cfg.seed)?;
    let initial = data.init_params(cfg, cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create run directory {}", out.display()))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;

    match train(initial, &cfg.trainer, &data.train, &data.valid, unlabeled.as_ref()) {
        Ok((params, report)) => {
            checkpoint::save(&out.join(CHECKPOINT_FILE), &params, &checkpoint_extra(&data.vocab, cfg))?;
            write_json(&out.join(REPORT_FILE), &report)?;
            write_csv(&out.join(METRICS_FILE), &report.epochs)?;
            eprintln!(
                "trained {} for {} epochs in {:.1}s; best validation F1 {:.4} at epoch {}",
                report.technique,
                report.epochs.len(),
                report.wall_clock_secs,
                report.best_valid_f1,
                report.selected_epoch
            );
            Ok(report)
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            loss,
            report,
        }) => {
            write_json(&out.join(REPORT_FILE), &report)?;
            write_csv(&out.join(METRICS_FILE), &report.epochs)?;
            Err(TrainError::Diverged {
                epoch,
                step,
                loss,
                report,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_corr: Option<f64>,
    pub n_excluded: usize,
    pub n_examples: usize,
}

pub fn cmd_evaluate(checkpoint_path: &Path, test: &Path) -> Result<EvaluationReport> {
    let (params, vocab) = load_checkpoint(checkpoint_path)?;
    let corpus = load_jsonl(test, CorpusKind::Labeled)?.encode(&vocab)?;
    let f1 = corpus_f1(&params, &corpus)?;
    let corr = attention_gradient_correlation(&params, &corpus)?;
    Ok(EvaluationReport {
        f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        mean_corr: corr.mean,
        n_excluded: corr.n_excluded,
        n_examples: corpus.len(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RationaleReport {
    pub quantile: f64,
    pub iou_f1: f64,
    pub token_f1: f64,
    pub auprc: Option<f64>,
    pub average_precision: Option<f64>,
    pub roc_auc: Option<f64>,
    pub n_examples: usize,
    /// Examples whose gold mask is all-in or all-out, skipped by the soft
    /// metrics.
    pub n_soft_excluded: usize,
}

/// Scores attention weights as rationales against gold spans.
pub fn cmd_rationale(checkpoint_path: &Path, corpus_path: &Path, quantile: f64) -> Result<RationaleReport> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return usage(format!("--quantile must lie in (0, 1), got {quantile}"));
    }
    let (params, vocab) = load_checkpoint(checkpoint_path)?;
    let raw = load_jsonl(corpus_path, CorpusKind::Labeled)?;
    if let Some(i) = raw.examples.iter().position(|d| d.rationale.is_none()) {
        return Err(DataError::Format {
            path: corpus_path.to_path_buf(),
            line: i + 1,
            msg: format!("example {i} has no \"rationale\" field"),
        }
        .into());
    }
    let corpus = raw.encode(&vocab)?;
    let (mut iou, mut token) = (0.0, 0.0);
    let (mut soft, mut n_soft, mut excluded) = ([0.0; 3], 0usize, 0usize);
    for ex in &corpus.examples {
        let gold = ex.rationale.as_deref().expect("checked above");
        let (_, attention) = forward(&params, &ex.ids, None)?;
        let predicted = extract_hard_rationale(&attention.weights, quantile);
        let hard = hard_rationale_metrics(&predicted, gold, ex.len())?;
        iou += hard.iou_f1;
        token += hard.token_f1;
        match soft_rationale_metrics(&attention.weights, &mask_from_spans(gold, ex.len())) {
            Ok(s) => {
                soft[0] += s.auprc;
                soft[1] += s.average_precision;
                soft[2] += s.roc_auc;
                n_soft += 1;
            }
            Err(EvalError::Undefined(_)) => excluded += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let n = corpus.len().max(1) as f64;
    let soft_mean = |i: usize| (n_soft > 0).then(|| soft[i] / n_soft as f64);
    Ok(RationaleReport {
        quantile,
        iou_f1: iou / n,
        token_f1: token / n,
        auprc: soft_mean(0),
        average_precision: soft_mean(1),
        roc_auc: soft_mean(2),
        n_examples: corpus.len(),
        n_soft_excluded: excluded,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One training run per (count, seed), in parallel; rows sorted by count.
pub fn cmd_sweep(cfg: &RunConfig, counts: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || seeds.is_empty() {
        return usage("--counts and --seeds must each list at least one value");
    }
    let data = Data::load(cfg)?;
    let pool_size = data.pool.as_ref().map_or(0, |p| p.len());
    if let Some(&bad) = counts.iter().find(|&&c| c > pool_size) {
        return Err(DataError::Bounds {
            requested: bad,
            available: pool_size,
        }
        .into());
    }
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let jobs: Vec<(usize, u64)> = counts
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(count, seed)| -> Result<f64> {
            let mut run = cfg.clone();
            run.apply_seed(seed);
            let unlabeled = data.unlabeled(Some(count), seed)?;
            let initial = data.init_params(&run, seed)?;
            let (_, report) = train(initial, &run.trainer, &data.train, &data.valid, unlabeled.as_ref())?;
            Ok(report.best_valid_f1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let (mean_f1, std_f1) = mean_std(&scores[i * seeds.len()..(i + 1) * seeds.len()]);
            SweepRow { count, mean_f1, std_f1 }
        })
        .collect())
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Eight log-spaced points from 0.01 to 30.
pub fn default_epsilon_grid() -> Vec<f64> {
    let (lo, hi) = (0.01f64.ln(), 30f64.ln());
    (0..8).map(|i| (lo + (hi - lo) * i as f64 / 7.0).exp()).collect()
}

pub fn cmd_epsilon_search(cfg: &RunConfig, grid: &[f64], out: &Path) -> Result<Option<f64>> {
    if grid.is_empty() {
        return usage("--grid must list at least one epsilon");
    }
    if let Some(bad) = grid.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return usage(format!("--grid values must be > 0, got {bad}"));
    }
    let data = Data::load(cfg)?;
    let unlabeled = data.unlabeled(cfg.unlabeled_count, cfg.seed)?;
    let initial = data.init_params(cfg, cfg.seed)?;
    let search = epsilon_search(
        grid,
        &initial,
        &cfg.trainer,
        &data.train,
        &data.valid,
        unlabeled.as_ref(),
    )?;
    write_csv(out, &search.rows)?;
    let mut stdout = std::io::stdout().lock();
    for row in &search.rows {
        match (row.valid_f1, &row.error) {
            (Some(f1), _) => writeln!(stdout, "epsilon {:<10} valid F1 {f1:.4}", row.epsilon)?,
            (None, Some(e)) => writeln!(stdout, "epsilon {:<10} failed: {e}", row.epsilon)?,
            (None, None) => {}
        }
    }
    match (search.best_epsilon, search.best_valid_f1) {
        (Some(e), Some(f1)) => writeln!(stdout, "best epsilon: {e} (valid F1 {f1:.4})")?,
        _ => writeln!(stdout, "best epsilon: none (every grid point failed)")?,
    }
    Ok(search.best_epsilon)
}

pub struct SynthSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub unlabeled: usize,
}

pub fn cmd_gen_synth(out: &Path, sizes: &SynthSizes, separable: bool, seed: u64) -> Result<Vec<PathBuf>> {
    let config = if separable {
        SynthConfig::separable()
    } else {
        SynthConfig::default()
    };
    let splits = synth::splits(&config, [sizes.train, sizes.valid, sizes.test, sizes.unlabeled], seed);
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut written = Vec::new();
    for (name, corpus) in [
        ("train.jsonl", &splits.train),
        ("valid.jsonl", &splits.valid),
        ("test.jsonl", &splits.test),
        ("unlabeled.jsonl", &splits.unlabeled),
    ] {
        let path = out.join(name);
        write_jsonl(&path, corpus)?;
        written.push(path);
    }
    Ok(written)
}
