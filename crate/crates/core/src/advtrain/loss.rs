use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{perturb, Objective, PerturbationSpec, Result, Space, Technique, TrainError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{attend, forward_on_tape, l2_penalty, nll_loss, ForwardVars, Injection, ModelParams, ParamVars};
use crate::rng::{self, stream, Rng};
use crate::textdata::Example;

/// The three parts of the training objective and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Mean negative log-likelihood over the labeled batch.
    pub nll: Var,
    /// Mean (virtual) adversarial term before weighting by lambda.
    pub adversarial: Option<Var>,
    pub l2: Var,
}

/// Random stream for one example's perturbation within a step. The loss
/// functions draw `step_key` as the next `u64` of the caller's generator.
pub fn example_rng(step_key: u64, ids: &[usize]) -> Rng {
    let mut hasher = Sha256::new();
    for &id in ids {
        hasher.update((id as u64).to_le_bytes());
    }
    let digest = hasher.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
    rng::seeded(step_key, stream::PERTURB, key)
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat(terms)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// Mean adversarial term of `technique` over `examples`, recorded on `tape`.
///
/// Perturbations are computed from `params` on private tapes and enter this
/// tape as constants. For VAT variants each term is
/// `KL(p_clean || p_perturbed)` with `p_clean` a constant; for AT variants it
/// is the negative log-likelihood at the perturbed input.
///
/// One value is drawn from `rng` per call; each example's random start is
/// keyed by that value and the example's token ids, so identical examples in
/// a batch receive identical perturbations.
pub fn adversarial_term(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    examples: &[&Example],
    technique: Technique,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Var> {
    adversarial_term_reusing(tape, pv, params, examples, &[], technique, spec, rng)
}

/// As [`adversarial_term`], reusing the clean encoder pass `clean[i]` of
/// `examples[i]` where one exists on the tape. Only attention-space
/// perturbations can reuse it, since they leave the encoder untouched.
#[allow(clippy::too_many_arguments)]
fn adversarial_term_reusing(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    examples: &[&Example],
    clean: &[ForwardVars],
    technique: Technique,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Var> {
    let (Some(space), Some(objective)) = (technique.space(), technique.objective()) else {
        return Err(TrainError::Contract(format!("{technique} has no adversarial term")));
    };
    if examples.is_empty() {
        return Err(TrainError::Contract("adversarial term over an empty batch".into()));
    }
    let step_key = rng.next_u64();
    let mut terms = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut ex_rng = example_rng(step_key, &ex.ids);
        let label = match objective {
            Objective::Virtual => None,
            Objective::Adversarial => Some(
                ex.label
                    .ok_or_else(|| TrainError::Contract(format!("{technique} needs labeled examples")))?,
            ),
        };
        let r = perturb(
            params,
            &ex.ids,
            label,
            space,
            objective,
            technique.interpretable(),
            spec,
            &mut ex_rng,
        )?;
        let rv = tape.constant(r.values);
        let inject = match space {
            Space::Attention => Injection {
                embedding: None,
                scores: Some(rv),
            },
            Space::Word => Injection {
                embedding: Some(rv),
                scores: None,
            },
        };
        let prob = match (clean.get(i), space) {
            (Some(c), Space::Attention) => attend(tape, pv, c.hidden, c.scores, inject.scores)?.prob,
            _ => forward_on_tape(tape, pv, params.config(), &ex.ids, inject)?.prob,
        };
        let term = match objective {
            Objective::Virtual => {
                let target = tape.constant(Tensor::scalar(r.clean_probability));
                tape.kl_bernoulli(target, prob)?
            }
            Objective::Adversarial => nll_loss(tape, prob, label.expect("checked"))?,
        };
        terms.push(term);
    }
    mean(tape, &terms)
}

/// Mean KL divergence between clean and virtually-adversarial predictions.
pub fn vat_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    batch: &[&Example],
    technique: Technique,
    spec: &PerturbationSpec,
    rng: &mut Rng,
) -> Result<Var> {
    if !technique.is_semi_supervised() {
        return Err(TrainError::Contract(format!("{technique} is not a VAT technique")));
    }
    adversarial_term(tape, pv, params, batch, technique, spec, rng)
}

/// `nll + lambda * adversarial + l2` for one step.
///
/// The adversarial term covers the labeled batch for AT variants and the
/// labeled and unlabeled batches together for VAT variants. Supervised
/// techniques reject unlabeled data.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    labeled: &[&Example],
    unlabeled: &[&Example],
    technique: Technique,
    spec: &PerturbationSpec,
    l2_coefficient: f64,
    rng: &mut Rng,
) -> Result<LossTerms> {
    if !unlabeled.is_empty() && !technique.is_semi_supervised() {
        return Err(TrainError::Contract(format!(
            "{technique} is supervised and cannot use unlabeled data"
        )));
    }
    if labeled.is_empty() {
        return Err(TrainError::Contract("empty labeled batch".into()));
    }
    let mut nlls = Vec::with_capacity(labeled.len());
    let mut clean = Vec::with_capacity(labeled.len());
    for ex in labeled {
        let label = ex
            .label
            .ok_or_else(|| TrainError::Contract("labeled batch holds an unlabeled example".into()))?;
        let out = forward_on_tape(tape, pv, params.config(), &ex.ids, Injection::default())?;
        nlls.push(nll_loss(tape, out.prob, label)?);
        clean.push(out);
    }
    let nll = mean(tape, &nlls)?;
    let adversarial = match technique.objective() {
        None => None,
        Some(objective) => {
            let domain: Vec<&Example> = match objective {
                Objective::Adversarial => labeled.to_vec(),
                Objective::Virtual => labeled.iter().chain(unlabeled).copied().collect(),
            };
            Some(adversarial_term_reusing(
                tape, pv, params, &domain, &clean, technique, spec, rng,
            )?)
        }
    };
    let l2 = l2_penalty(tape, pv, l2_coefficient);
    let mut total = tape.add(nll, l2)?;
    if let Some(adv) = adversarial {
        let weighted = tape.scale(adv, spec.lambda);
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        nll,
        adversarial,
        l2,
    })
}
