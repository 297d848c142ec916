//! Perturbation generators: norms, worst-case quality, loss structure and
//! gradient stopping.

use attnvat::advtrain::{
    difference_vectors, embedding_directions, example_rng, perturb, total_loss, vat_loss, Objective, PerturbationSpec,
    Space, Technique,
};
use attnvat::autodiff::{kl_bernoulli_value, l2_norm, Tape, Tensor};
use attnvat::model::{forward, forward_on_tape, Injection, ModelConfig, ModelParams, Param};
use attnvat::rng;
use attnvat::textdata::Example;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

const GENERATORS: [Technique; 8] = [
    Technique::AttnVat,
    Technique::AttnIvat,
    Technique::AttnAt,
    Technique::AttnIat,
    Technique::WordVat,
    Technique::WordIvat,
    Technique::WordAt,
    Technique::WordIat,
];

struct Case {
    params: ModelParams,
    ids: Vec<usize>,
    label: u8,
}

/// A small model with weights spread wider than the default initialization
/// so attention is far from uniform.
fn random_case(seed: u64, min_len: usize, max_len: usize, weight_scale: f64) -> Case {
    let mut r = rng::seeded(seed, 200, 0);
    let config = ModelConfig {
        vocab_size: 12,
        embed_dim: r.random_range(2..=4),
        hidden: r.random_range(2..=4),
        attention_dim: None,
    };
    let mut params = ModelParams::init(config, seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v *= weight_scale;
        }
    }
    let len = r.random_range(min_len..=max_len);
    Case {
        ids: (0..len).map(|_| r.random_range(2..12)).collect(),
        label: u8::from(r.random_bool(0.5)),
        params,
    }
}

fn generate(case: &Case, technique: Technique, epsilon: f64, seed: u64) -> attnvat::advtrain::Perturbation {
    let spec = PerturbationSpec {
        epsilon,
        ..Default::default()
    };
    let label = (technique.objective() == Some(Objective::Adversarial)).then_some(case.label);
    perturb(
        &case.params,
        &case.ids,
        label,
        technique.space().unwrap(),
        technique.objective().unwrap(),
        technique.interpretable(),
        &spec,
        &mut rng::seeded(seed, 201, 0),
    )
    .unwrap()
}

pub fn norms() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..50 {
        let case = random_case(seed, 1, 8, 3.0);
        for technique in GENERATORS {
            for epsilon in [0.01, 1.0, 30.0] {
                let r = generate(&case, technique, epsilon, seed);
                worst = worst.max((r.values.norm() - epsilon).abs());
                checked += 1;
            }
        }
    }
    let msg = format!("max | |r| - eps | = {worst:.2e} over {checked} perturbations (8 generators)");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// The generator's own objective at perturbation `r`: KL from the clean
/// prediction for virtual variants, NLL of the label for adversarial ones.
fn objective(case: &Case, technique: Technique, r: &[f64]) -> f64 {
    let clean = forward(&case.params, &case.ids, None).unwrap().0.probability;
    let mut tape = Tape::new();
    let pv = case.params.bind(&mut tape, false);
    let t = case.ids.len();
    let inject = match technique.space().unwrap() {
        Space::Attention => Injection {
            embedding: None,
            scores: Some(tape.constant(Tensor::vector(r.to_vec()))),
        },
        Space::Word => Injection {
            embedding: Some(tape.constant(Tensor::new(vec![t, r.len() / t], r.to_vec()).unwrap())),
            scores: None,
        },
    };
    let prob = forward_on_tape(&mut tape, &pv, case.params.config(), &case.ids, inject)
        .unwrap()
        .prob;
    let q = tape.value(prob).item();
    match technique.objective().unwrap() {
        Objective::Virtual => kl_bernoulli_value(clean, q),
        Objective::Adversarial => {
            let q = q.clamp(1e-7, 1.0 - 1e-7);
            if case.label == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        }
    }
}

/// Random direction of norm `epsilon`, drawn in the full perturbation space
/// or, for interpretable variants, as a random mixture of the same direction
/// set the generator uses.
fn random_direction(case: &Case, technique: Technique, epsilon: f64, r: &mut rng::Rng) -> Vec<f64> {
    let t = case.ids.len();
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(r)).collect() };
    let raw = if technique.interpretable() {
        let (dirs, d) = match technique.space().unwrap() {
            Space::Attention => {
                let (_, att) = forward(&case.params, &case.ids, None).unwrap();
                (difference_vectors(&att.scores).normalized.into_data(), 1)
            }
            Space::Word => {
                let table = case.params.get(Param::Embedding);
                let d = table.shape()[1];
                let rows: Vec<f64> = case.ids.iter().flat_map(|&i| table.row(i).to_vec()).collect();
                let embedded = Tensor::new(vec![t, d], rows).unwrap();
                (embedding_directions(&embedded).into_data(), d)
            }
        };
        let alpha = gauss(t * t);
        let mut out = vec![0.0; t * d];
        for a in 0..t {
            for k in 0..t {
                for j in 0..d {
                    out[a * d + j] += alpha[a * t + k] * dirs[(a * t + k) * d + j];
                }
            }
        }
        out
    } else {
        let n = match technique.space().unwrap() {
            Space::Attention => t,
            Space::Word => t * case.params.config().embed_dim,
        };
        gauss(n)
    };
    let norm = l2_norm(&raw);
    raw.iter().map(|v| v * epsilon / norm).collect()
}

pub fn oracle() -> Result<String, String> {
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut min_rank: f64 = 1.0;
    for model in 0..10u64 {
        let case = random_case(1000 + model, 6, 8, 2.0);
        for technique in GENERATORS {
            for epsilon in [0.01, 0.1, 0.5] {
                let generated = generate(&case, technique, epsilon, model);
                if generated.degenerate || generated.subspace_fallback {
                    continue;
                }
                let achieved = objective(&case, technique, generated.values.data());
                let mut r = rng::seeded(model, 202, epsilon.to_bits());
                let mut random: Vec<f64> = (0..1000)
                    .map(|_| {
                        let d = random_direction(&case, technique, epsilon, &mut r);
                        objective(&case, technique, &d)
                    })
                    .collect();
                random.sort_by(f64::total_cmp);
                let p95 = random[949];
                let rank = random.iter().filter(|&&v| v <= achieved).count() as f64 / 1000.0;
                min_rank = min_rank.min(rank);
                checked += 1;
                if achieved < p95 {
                    failures.push(format!(
                        "model {model} {technique} eps {epsilon}: {achieved:.3e} < p95 {p95:.3e}"
                    ));
                }
            }
        }
    }
    let msg = format!(
        "{checked} cases, lowest percentile of the generated perturbation {:.1}%",
        100.0 * min_rank
    );
    if failures.is_empty() && checked > 0 {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", failures.join("; ")))
    }
}

fn example(ids: &[usize], label: Option<u8>) -> Example {
    Example {
        ids: ids.to_vec(),
        label,
        raw_tokens: ids.iter().map(|i| format!("t{i}")).collect(),
        rationale: None,
    }
}

/// Loss decomposition and the lambda = 0 and epsilon = 0 limits.
pub fn decomposition() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let case = random_case(seed, 2, 6, 1.0);
        let other = random_case(seed + 500, 2, 6, 1.0);
        let a = example(&case.ids, Some(case.label));
        let b = example(&other.ids, Some(1 - case.label));
        let u = example(&other.ids[1..], None);
        for technique in Technique::ALL {
            let unlabeled: Vec<&Example> = if technique.is_semi_supervised() {
                vec![&u]
            } else {
                vec![]
            };
            for (lambda, epsilon) in [(0.7, 1.0), (0.0, 1.0), (1.0, 0.0)] {
                let spec = PerturbationSpec {
                    lambda,
                    epsilon,
                    ..Default::default()
                };
                let mut tape = Tape::new();
                let pv = case.params.bind(&mut tape, true);
                let mut r = rng::seeded(seed, 203, 0);
                let terms = total_loss(
                    &mut tape,
                    &pv,
                    &case.params,
                    &[&a, &b],
                    &unlabeled,
                    technique,
                    &spec,
                    1e-3,
                    &mut r,
                )
                .map_err(|e| e.to_string())?;
                let total = tape.value(terms.total).item();
                let nll = tape.value(terms.nll).item();
                let l2 = tape.value(terms.l2).item();
                let adv = terms.adversarial.map_or(0.0, |v| tape.value(v).item());

                // Each term recomputed on its own.
                let labels = [case.label, 1 - case.label];
                let nll_direct = [&a, &b]
                    .iter()
                    .zip(labels)
                    .map(|(ex, y)| {
                        let q = forward(&case.params, &ex.ids, None).unwrap().0.probability;
                        if y == 1 {
                            -q.ln()
                        } else {
                            -(1.0 - q).ln()
                        }
                    })
                    .sum::<f64>()
                    / 2.0;
                let l2_direct = attnvat::model::l2_value(&case.params, 1e-3);
                worst = worst
                    .max((total - (nll + lambda * adv + l2)).abs())
                    .max((nll - nll_direct).abs())
                    .max((l2 - l2_direct).abs());
                if lambda == 0.0 {
                    worst = worst.max((total - (nll + l2)).abs());
                }
                if epsilon == 0.0 && technique.is_semi_supervised() {
                    worst = worst.max(adv.abs());
                }
            }
        }
    }
    let msg = format!("max deviation {worst:.2e} over 20 models x 9 techniques");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Gradient of the VAT loss against central differences in which the clean
/// prediction and the perturbation stay fixed at their values for the
/// unperturbed parameters.
pub fn detachment() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let case = random_case(seed + 300, 2, 5, 1.5);
        let ex = example(&case.ids, None);
        for technique in [
            Technique::AttnVat,
            Technique::AttnIvat,
            Technique::WordVat,
            Technique::WordIvat,
        ] {
            let spec = PerturbationSpec::default();
            let mut tape = Tape::new();
            let pv = case.params.bind(&mut tape, true);
            let mut r = rng::seeded(seed, 204, 0);
            let mut replay = r.clone();
            let loss =
                vat_loss(&mut tape, &pv, &case.params, &[&ex], technique, &spec, &mut r).map_err(|e| e.to_string())?;
            let grads = tape.backward(loss).map_err(|e| e.to_string())?;

            let step_key = replay.next_u64();
            let frozen = perturb(
                &case.params,
                &case.ids,
                None,
                technique.space().unwrap(),
                Objective::Virtual,
                technique.interpretable(),
                &spec,
                &mut example_rng(step_key, &case.ids),
            )
            .map_err(|e| e.to_string())?;
            let p = frozen.clean_probability;
            let frozen_case = |params: ModelParams| Case {
                params,
                ids: case.ids.clone(),
                label: 0,
            };
            let loss_at = |params: ModelParams| -> f64 {
                let c = frozen_case(params);
                let t = c.ids.len();
                let mut tape = Tape::new();
                let pv = c.params.bind(&mut tape, false);
                let rv = tape.constant(frozen.values.clone());
                let inject = match technique.space().unwrap() {
                    Space::Attention => Injection {
                        embedding: None,
                        scores: Some(rv),
                    },
                    Space::Word => Injection {
                        embedding: Some(tape.reshape(rv, &[t, c.params.config().embed_dim]).unwrap()),
                        scores: None,
                    },
                };
                let out = forward_on_tape(&mut tape, &pv, c.params.config(), &c.ids, inject).unwrap();
                kl_bernoulli_value(p, tape.value(out.prob).item())
            };
            let h = 1e-5;
            for (k, var) in pv.all().iter().enumerate() {
                let analytic = grads
                    .get(*var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; case.params.tensors()[k].len()]);
                for (i, &a) in analytic.iter().enumerate() {
                    let mut plus = case.params.clone();
                    plus.tensors_mut()[k].data_mut()[i] += h;
                    let mut minus = case.params.clone();
                    minus.tensors_mut()[k].data_mut()[i] -= h;
                    let numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(err);
                }
            }
        }
    }
    let msg = format!("worst relative error {worst:.2e} over 10 models x 4 VAT techniques");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
