//! Prediction quality, attention/gradient agreement and rationale metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{l2_norm, Tape, Tensor};
use crate::model::{self, forward_on_tape, Injection, ModelError, ModelParams};
use crate::textdata::{validate_spans, Corpus, Span};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("invalid spans: {0}")]
    Spans(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// F1 of the positive class with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// True when there are neither predicted nor gold positives.
    pub degenerate: bool,
}

pub fn f1_score(preds: &[u8], golds: &[u8]) -> Result<F1> {
    if preds.len() != golds.len() {
        return Err(EvalError::Length(preds.len(), golds.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(F1 {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        degenerate: tp + fp + fn_ == 0,
    })
}

/// Hard labels (`p >= 0.5`) for every example.
pub fn predict_labels(params: &ModelParams, corpus: &Corpus) -> Result<Vec<u8>> {
    corpus
        .examples
        .iter()
        .map(|e| {
            let (pred, _) = model::forward(params, &e.ids, None)?;
            Ok(u8::from(pred.probability >= 0.5))
        })
        .collect()
}

/// F1 of `params` on a labeled corpus.
pub fn corpus_f1(params: &ModelParams, corpus: &Corpus) -> Result<F1> {
    let preds = predict_labels(params, corpus)?;
    let golds: Vec<u8> = corpus.examples.iter().map(|e| e.label.unwrap_or(0)).collect();
    f1_score(&preds, &golds)
}

/// Per-token saliency: L2 norm over the embedding dimension of the gradient
/// of the logit w.r.t. each embedded word, on the unperturbed pass.
pub fn gradient_importance(params: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
    let d = params.config().embed_dim;
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let probe = tape.leaf(Tensor::zeros(&[ids.len(), d]), true);
    let out = forward_on_tape(
        &mut tape,
        &pv,
        params.config(),
        ids,
        Injection {
            embedding: Some(probe),
            scores: None,
        },
    )?;
    let grads = tape.backward(out.logit).map_err(ModelError::from)?;
    let g = grads
        .get(probe)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; ids.len() * d]);
    Ok(g.chunks(d).map(l2_norm).collect())
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::Undefined("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("pearson of a constant vector"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Mean over examples where the correlation is defined.
    pub mean: Option<f64>,
    pub per_example: Vec<Option<f64>>,
    pub n_excluded: usize,
}

/// Pearson correlation between attention weights and gradient importance,
/// per example and averaged.
pub fn attention_gradient_correlation(params: &ModelParams, corpus: &Corpus) -> Result<CorrelationReport> {
    let mut per_example = Vec::with_capacity(corpus.len());
    for e in &corpus.examples {
        let (_, attn) = model::forward(params, &e.ids, None)?;
        let grad = gradient_importance(params, &e.ids)?;
        per_example.push(pearson(&attn.weights, &grad).ok());
    }
    Ok(summarize(per_example))
}

fn summarize(per_example: Vec<Option<f64>>) -> CorrelationReport {
    let defined: Vec<f64> = per_example.iter().flatten().copied().collect();
    CorrelationReport {
        mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        n_excluded: per_example.len() - defined.len(),
        per_example,
    }
}

/// Linear-interpolation quantile of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Discretizes importance into spans: tokens strictly above the
/// `threshold_quantile` quantile are selected (tokens at the maximum when none
/// is strictly above), and maximal runs become spans.
pub fn extract_hard_rationale(importance: &[f64], threshold_quantile: f64) -> Vec<Span> {
    if importance.is_empty() {
        return Vec::new();
    }
    let cut = quantile(importance, threshold_quantile);
    let mut selected: Vec<bool> = importance.iter().map(|&v| v > cut).collect();
    if !selected.iter().any(|&s| s) {
        let max = importance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        selected = importance.iter().map(|&v| v == max).collect();
    }
    spans_from_mask(&selected)
}

pub fn spans_from_mask(mask: &[bool]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    spans
}

pub fn mask_from_spans(spans: &[Span], len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &(s, e) in spans {
        mask[s..e].fill(true);
    }
    mask
}

fn span_iou(a: Span, b: Span) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

/// Spans whose token-set IOU reaches this value count as a match.
pub const IOU_MATCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardRationaleScores {
    pub iou_f1: f64,
    pub token_f1: f64,
}

/// IOU F1 and token F1 of predicted spans against gold spans over a sequence
/// of `len` tokens. A predicted span is a hit when its best IOU against any
/// gold span is at least [`IOU_MATCH`]; hits are divided by the number of
/// predicted spans for precision and by the number of gold spans (capped at 1)
/// for recall.
pub fn hard_rationale_metrics(predicted: &[Span], gold: &[Span], len: usize) -> Result<HardRationaleScores> {
    let sort = |s: &[Span]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let (predicted, gold) = (sort(predicted), sort(gold));
    validate_spans(&predicted, len).map_err(EvalError::Spans)?;
    validate_spans(&gold, len).map_err(EvalError::Spans)?;

    let hits = predicted
        .iter()
        .filter(|&&p| gold.iter().any(|&g| span_iou(p, g) >= IOU_MATCH))
        .count();
    let iou_f1 = if predicted.is_empty() || gold.is_empty() {
        0.0
    } else {
        let p = hits as f64 / predicted.len() as f64;
        let r = (hits as f64 / gold.len() as f64).min(1.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let as_u8 = |m: Vec<bool>| m.into_iter().map(u8::from).collect::<Vec<_>>();
    let token_f1 = f1_score(
        &as_u8(mask_from_spans(&predicted, len)),
        &as_u8(mask_from_spans(&gold, len)),
    )?
    .f1;
    Ok(HardRationaleScores { iou_f1, token_f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftRationaleScores {
    pub auprc: f64,
    pub average_precision: f64,
    pub roc_auc: f64,
}

/// `(recall, precision)` at each distinct score threshold, highest first.
fn pr_points(scores: &[f64], mask: &[bool]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = mask.iter().filter(|&&m| m).count() as f64;
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        seen += 1.0;
        if mask[i] {
            tp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            points.push((tp / positives, tp / seen));
        }
    }
    points
}

/// AUPRC (trapezoidal, starting from recall 0 at precision 1), average
/// precision (step-weighted), and ROC-AUC (Mann-Whitney, ties count 1/2).
pub fn soft_rationale_metrics(scores: &[f64], mask: &[bool]) -> Result<SoftRationaleScores> {
    if scores.len() != mask.len() {
        return Err(EvalError::Length(scores.len(), mask.len()));
    }
    let pos: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| !m).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::Undefined("rationale mask needs both classes"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    let roc_auc = wins / (pos.len() * neg.len()) as f64;

    let points = pr_points(scores, mask);
    let (mut ap, mut auprc) = (0.0, 0.0);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    for &(r, p) in &points {
        ap += (r - prev_r) * p;
        auprc += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(SoftRationaleScores {
        auprc,
        average_precision: ap,
        roc_auc,
    })
}
