use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{total_loss, Adam, AdamConfig, PerturbationSpec, Result, Technique, TrainError};
use crate::autodiff::Tape;
use crate::eval::corpus_f1;
use crate::model::{ModelParams, Param};
use crate::rng::{self, stream};
use crate::textdata::{batch_indices, Corpus, CorpusKind, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub technique: Technique,
    pub optimizer: AdamConfig,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub perturbation: PerturbationSpec,
    /// Seeds parameter initialization and shuffling.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            technique: Technique::Vanilla,
            optimizer: AdamConfig::default(),
            l2: 1e-5,
            epochs: 20,
            batch_size: 32,
            patience: Some(5),
            perturbation: PerturbationSpec::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.l2 >= 0.0) {
            return Err(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err("learning_rate must be > 0".into());
        }
        if self.technique != Technique::Vanilla {
            self.perturbation.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub train_loss: f64,
    /// Mean unweighted adversarial term, zero for vanilla training.
    pub vat_loss: f64,
    pub valid_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub technique: Technique,
    pub seed: u64,
    pub epsilon: f64,
    pub lambda: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are returned (1-based, 0 if none finished).
    pub selected_epoch: usize,
    pub best_valid_f1: f64,
    /// Excluded from determinism comparisons.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Trains from `initial` and returns the parameters of the best validation
/// epoch.
///
/// Each epoch walks the longer of the labeled and unlabeled streams in
/// shuffled batches, pairing every labeled batch with one unlabeled batch and
/// cycling the shorter stream. Perturbations are recomputed from the current
/// parameters at every step.
pub fn train(
    initial: ModelParams,
    config: &TrainerConfig,
    train_set: &Corpus,
    valid_set: &Corpus,
    unlabeled: Option<&Corpus>,
) -> Result<(ModelParams, TrainingReport)> {
    config.validate().map_err(TrainError::Contract)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(TrainError::Contract(
            "training and validation corpora must be non-empty".into(),
        ));
    }
    if train_set.kind != CorpusKind::Labeled || valid_set.kind != CorpusKind::Labeled {
        return Err(TrainError::Contract(
            "training and validation corpora must be labeled".into(),
        ));
    }
    let unlabeled = unlabeled.filter(|u| !u.is_empty());
    if unlabeled.is_some() && !config.technique.is_semi_supervised() {
        return Err(TrainError::Contract(format!(
            "{} is supervised and cannot use an unlabeled corpus",
            config.technique
        )));
    }

    let started = Instant::now();
    let mut params = initial;
    let mut adam = Adam::new(config.optimizer, params.tensors().iter().map(|t| t.len()));
    let mut perturb_rng = rng::seeded(config.perturbation.seed, stream::PERTURB, 0);
    let embed_dim = params.config().embed_dim;

    let mut report = TrainingReport {
        technique: config.technique,
        seed: config.seed,
        epsilon: config.perturbation.epsilon,
        lambda: config.perturbation.lambda,
        n_labeled: train_set.len(),
        n_unlabeled: unlabeled.map_or(0, Corpus::len),
        steps: 0,
        epochs: Vec::new(),
        selected_epoch: 0,
        best_valid_f1: f64::NEG_INFINITY,
        wall_clock_secs: 0.0,
    };
    let mut best = params.clone();
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        let lab_batches = batch_indices(
            train_set.len(),
            config.batch_size,
            true,
            config.seed,
            stream::SHUFFLE_LABELED,
            epoch as u64,
        );
        let unl_batches = unlabeled.map_or_else(Vec::new, |u| {
            batch_indices(
                u.len(),
                config.batch_size,
                true,
                config.seed,
                stream::SHUFFLE_UNLABELED,
                epoch as u64,
            )
        });
        let steps = lab_batches.len().max(unl_batches.len());
        let (mut loss_sum, mut adv_sum) = (0.0, 0.0);

        for step in 0..steps {
            let labeled: Vec<&Example> = lab_batches[step % lab_batches.len()]
                .iter()
                .map(|&i| &train_set.examples[i])
                .collect();
            let unl: Vec<&Example> = match (unlabeled, unl_batches.is_empty()) {
                (Some(u), false) => unl_batches[step % unl_batches.len()]
                    .iter()
                    .map(|&i| &u.examples[i])
                    .collect(),
                _ => Vec::new(),
            };

            let mut tape = Tape::new();
            let pv = params.bind(&mut tape, true);
            let terms = total_loss(
                &mut tape,
                &pv,
                &params,
                &labeled,
                &unl,
                config.technique,
                &config.perturbation,
                config.l2,
                &mut perturb_rng,
            )?;
            let loss = tape.value(terms.total).item();
            if !loss.is_finite() {
                report.wall_clock_secs = started.elapsed().as_secs_f64();
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss,
                    report: Box::new(report),
                });
            }
            loss_sum += loss;
            adv_sum += terms.adversarial.map_or(0.0, |a| tape.value(a).item());

            let grads = tape.backward(terms.total)?;
            let mut owned: Vec<Vec<f64>> = pv
                .all()
                .iter()
                .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            for (g, t) in owned.iter_mut().zip(params.tensors()) {
                if g.is_empty() {
                    g.resize(t.len(), 0.0);
                }
            }
            owned[Param::Embedding as usize][..embed_dim].fill(0.0);
            let refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            adam.step(params.tensors_mut(), &refs);
            report.steps += 1;
        }

        let valid_f1 = corpus_f1(&params, valid_set)?.f1;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            vat_loss: adv_sum / steps as f64,
            valid_f1,
        });
        if valid_f1 > report.best_valid_f1 {
            report.best_valid_f1 = valid_f1;
            report.selected_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((best, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub valid_f1: Option<f64>,
    pub selected_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearch {
    pub rows: Vec<EpsilonRow>,
    pub best_epsilon: Option<f64>,
    pub best_valid_f1: Option<f64>,
}

/// Trains one model per `epsilon` from the same initial parameters and picks
/// the best validation F1, preferring the smaller epsilon on ties. Failed grid
/// points are recorded and skipped. Grid points train in parallel.
pub fn epsilon_search(
    grid: &[f64],
    initial: &ModelParams,
    config: &TrainerConfig,
    train_set: &Corpus,
    valid_set: &Corpus,
    unlabeled: Option<&Corpus>,
) -> Result<EpsilonSearch> {
    if grid.is_empty() {
        return Err(TrainError::Contract("epsilon grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(TrainError::Contract(format!("epsilon grid value {bad} must be > 0")));
    }
    let rows = grid
        .par_iter()
        .map(|&epsilon| {
            let mut cfg = config.clone();
            cfg.perturbation.epsilon = epsilon;
            match train(initial.clone(), &cfg, train_set, valid_set, unlabeled) {
                Ok((_, report)) => EpsilonRow {
                    epsilon,
                    valid_f1: Some(report.best_valid_f1),
                    selected_epoch: Some(report.selected_epoch),
                    error: None,
                },
                Err(e) => EpsilonRow {
                    epsilon,
                    valid_f1: None,
                    selected_epoch: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(select_best(rows))
}

fn select_best(rows: Vec<EpsilonRow>) -> EpsilonSearch {
    let best =
        rows.iter()
            .filter_map(|r| r.valid_f1.map(|f| (r.epsilon, f)))
            .fold(None, |acc: Option<(f64, f64)>, (e, f)| match acc {
                Some((be, bf)) if bf > f || (bf == f && be <= e) => Some((be, bf)),
                _ => Some((e, f)),
            });
    EpsilonSearch {
        best_epsilon: best.map(|b| b.0),
        best_valid_f1: best.map(|b| b.1),
        rows,
    }
}
