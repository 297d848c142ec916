//! Perturbation generators.
//!
//! Every generator runs on a private tape with the parameters bound as
//! constants, so nothing it does can reach the parameters or their
//! gradients. The returned perturbation always has L2 norm `epsilon`.

use rand_distr::{Distribution, StandardNormal};

use super::{Objective, PerturbationSpec, Result, Space, TrainError};
use crate::autodiff::{l2_norm, Tape, Tensor};
use crate::model::{attend, forward_on_tape, nll_loss, Injection, ModelParams};
use crate::rng::Rng;

/// Gradient norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// `[T]` for attention perturbations, `[T, d]` for word perturbations.
    pub values: Tensor,
    /// Clean predicted probability at which the perturbation was computed.
    pub clean_probability: f64,
    /// The gradient vanished and a random direction was used instead.
    pub degenerate: bool,
    /// The difference-vector subspace was empty and the direct
    /// parameterization was used instead.
    pub subspace_fallback: bool,
}

/// Pairwise attention-score differences `raw[t][k] = s_t - s_k` and their
/// row-normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    pub raw: Tensor,
    pub normalized: Tensor,
    /// Rows whose differences are all zero; left as zeros in `normalized`.
    pub zero_rows: Vec<bool>,
}

impl DifferenceMatrix {
    /// Every row is zero, so no perturbation can be expressed.
    pub fn degenerate(&self) -> bool {
        self.zero_rows.iter().all(|&z| z)
    }
}

pub fn difference_vectors(scores: &[f64]) -> DifferenceMatrix {
    let t = scores.len();
    let mut raw = Vec::with_capacity(t * t);
    for &a in scores {
        raw.extend(scores.iter().map(|&b| a - b));
    }
    let mut normalized = raw.clone();
    let mut zero_rows = Vec::with_capacity(t);
    for row in normalized.chunks_mut(t) {
        let n = l2_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
        zero_rows.push(n == 0.0);
    }
    DifferenceMatrix {
        raw: Tensor::new(vec![t, t], raw).expect("t >= 1"),
        normalized: Tensor::new(vec![t, t], normalized).expect("t >= 1"),
        zero_rows,
    }
}

/// Unit directions `(w_t - w_k) / |w_t - w_k|` between embedded words, shape
/// `[T, T, d]`; identical words give a zero direction.
pub fn embedding_directions(embedded: &Tensor) -> Tensor {
    let (t, d) = (embedded.shape()[0], embedded.shape()[1]);
    let mut out = vec![0.0; t * t * d];
    for a in 0..t {
        for b in 0..t {
            let dst = &mut out[(a * t + b) * d..(a * t + b + 1) * d];
            for ((o, x), y) in dst.iter_mut().zip(embedded.row(a)).zip(embedded.row(b)) {
                *o = x - y;
            }
            let n = l2_norm(dst);
            if n > 0.0 {
                dst.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    Tensor::new(vec![t, t, d], out).expect("t, d >= 1")
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = l2_norm(&data);
    if norm > 0.0 {
        data.iter_mut().for_each(|v| *v *= scale / norm);
    }
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// `v` scaled to L2 norm `epsilon`; `v` must be non-zero.
pub(crate) fn rescale(v: &[f64], epsilon: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    v.iter().map(|x| x * epsilon / norm).collect()
}

/// Plain-value `out[t] = sum_k alpha[t, k] * dirs[t, k, :]`.
fn contract_values(alpha: &[f64], dirs: &Tensor) -> Vec<f64> {
    let (t, k, d) = (dirs.shape()[0], dirs.shape()[1], dirs.shape()[2]);
    let dv = dirs.data();
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        for c in 0..k {
            let a = alpha[r * k + c];
            for j in 0..d {
                out[r * d + j] += a * dv[(r * k + c) * d + j];
            }
        }
    }
    out
}

/// General generator behind all the named ones.
///
/// 1. Clean forward pass, giving the target probability `p`.
/// 2. Start point: zero for [`Objective::Adversarial`]; for
///    [`Objective::Virtual`] a Gaussian direction of norm `xi`, because the KL
///    gradient vanishes at zero.
/// 3. Gradient of the objective at the start point, taken w.r.t. the
///    perturbation itself, or w.r.t. the mixing weights `alpha` when
///    `interpretable` (perturbation `r_t = sum_k alpha[t, k] * dir[t, k]`).
/// 4. The gradient (mapped through the directions when `interpretable`) is
///    rescaled to norm `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn perturb(
    params: &ModelParams,
    ids: &[usize],
    label: Option<u8>,
    space: Space,
    objective: Objective,
    interpretable: bool,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    if objective == Objective::Adversarial && label.is_none() {
        return Err(TrainError::Contract(
            "adversarial perturbation needs a labeled example".into(),
        ));
    }
    let cfg = params.config();
    let t = ids.len();
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let clean = forward_on_tape(&mut tape, &pv, cfg, ids, Injection::default())?;
    let clean_probability = tape.value(clean.prob).item();
    let base_shape = match space {
        Space::Attention => vec![t],
        Space::Word => vec![t, cfg.embed_dim],
    };

    let dirs = if interpretable {
        let dirs = match space {
            Space::Attention => {
                let diff = difference_vectors(tape.value(clean.scores).data());
                diff.normalized.reshaped(vec![t, t, 1])?
            }
            Space::Word => embedding_directions(tape.value(clean.embedded)),
        };
        dirs.data().iter().any(|&v| v != 0.0).then_some(dirs)
    } else {
        None
    };
    if interpretable && dirs.is_none() {
        let mut p = perturb(params, ids, label, space, objective, false, spec, rng)?;
        p.subspace_fallback = true;
        return Ok(p);
    }

    let leaf_shape = if dirs.is_some() { vec![t, t] } else { base_shape.clone() };
    let start = match objective {
        Objective::Virtual => gaussian(&leaf_shape, spec.xi, rng),
        Objective::Adversarial => Tensor::zeros(&leaf_shape),
    };
    let leaf = tape.leaf(start.clone(), true);
    let r = match &dirs {
        Some(d) => {
            let dv = tape.constant(d.clone());
            let mixed = tape.contract(leaf, dv)?;
            tape.reshape(mixed, &base_shape)?
        }
        None => leaf,
    };
    let inject = match space {
        Space::Attention => Injection {
            embedding: None,
            scores: Some(r),
        },
        Space::Word => Injection {
            embedding: Some(r),
            scores: None,
        },
    };
    let prob = match space {
        Space::Attention => attend(&mut tape, &pv, clean.hidden, clean.scores, inject.scores)?.prob,
        Space::Word => forward_on_tape(&mut tape, &pv, cfg, ids, inject)?.prob,
    };
    let loss = match objective {
        Objective::Virtual => {
            let target = tape.constant(Tensor::scalar(clean_probability));
            tape.kl_bernoulli(target, prob)?
        }
        Objective::Adversarial => nll_loss(&mut tape, prob, label.expect("checked"))?,
    };
    let grads = tape.backward(loss)?;
    let g = grads.get(leaf).expect("leaf requires grad").to_vec();

    let (direction, degenerate) = if l2_norm(&g) < DEGENERATE_NORM {
        let fallback = if start.norm() > 0.0 {
            start.into_data()
        } else {
            gaussian(&leaf_shape, 1.0, rng).into_data()
        };
        (fallback, true)
    } else {
        (g, false)
    };
    let mapped = match &dirs {
        Some(d) => contract_values(&direction, d),
        None => direction,
    };
    let norm = l2_norm(&mapped);
    if norm < DEGENERATE_NORM {
        let mut p = perturb(params, ids, label, space, objective, false, spec, rng)?;
        p.subspace_fallback = true;
        return Ok(p);
    }
    Ok(Perturbation {
        values: Tensor::new(base_shape, rescale(&mapped, spec.epsilon))?,
        clean_probability,
        degenerate,
        subspace_fallback: false,
    })
}

/// Virtual adversarial perturbation of the attention scores.
pub fn perturb_attention_vat(
    params: &ModelParams,
    ids: &[usize],
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(
        params,
        ids,
        None,
        Space::Attention,
        Objective::Virtual,
        false,
        spec,
        rng,
    )
}

/// Adversarial perturbation of the attention scores for a labeled example.
pub fn perturb_attention_at(
    params: &ModelParams,
    ids: &[usize],
    label: u8,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(
        params,
        ids,
        Some(label),
        Space::Attention,
        Objective::Adversarial,
        false,
        spec,
        rng,
    )
}

/// Virtual adversarial perturbation expressed through normalized
/// attention-score difference vectors.
pub fn perturb_attention_ivat(
    params: &ModelParams,
    ids: &[usize],
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(params, ids, None, Space::Attention, Objective::Virtual, true, spec, rng)
}

pub fn perturb_attention_iat(
    params: &ModelParams,
    ids: &[usize],
    label: u8,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(
        params,
        ids,
        Some(label),
        Space::Attention,
        Objective::Adversarial,
        true,
        spec,
        rng,
    )
}

pub fn perturb_word_vat(
    params: &ModelParams,
    ids: &[usize],
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(params, ids, None, Space::Word, Objective::Virtual, false, spec, rng)
}

pub fn perturb_word_at(
    params: &ModelParams,
    ids: &[usize],
    label: u8,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(
        params,
        ids,
        Some(label),
        Space::Word,
        Objective::Adversarial,
        false,
        spec,
        rng,
    )
}

pub fn perturb_word_ivat(
    params: &ModelParams,
    ids: &[usize],
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(params, ids, None, Space::Word, Objective::Virtual, true, spec, rng)
}

pub fn perturb_word_iat(
    params: &ModelParams,
    ids: &[usize],
    label: u8,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Perturbation> {
    perturb(
        params,
        ids,
        Some(label),
        Space::Word,
        Objective::Adversarial,
        true,
        spec,
        rng,
    )
}
