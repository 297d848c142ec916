//! Central finite differences against tape gradients.

use attnvat::autodiff::{Tape, Tensor, Var};
use attnvat::model::{forward_on_tape, l2_penalty, nll_loss, Injection, ModelConfig, ModelParams, Param};
use attnvat::rng;
use rand::Rng;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Worst relative error over every coordinate of every input.
fn check(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += STEP;
            let plus = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * STEP;
            let minus = eval(&xs);
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    worst
}

/// Reduces a tensor node to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct amount.
fn reduce(tape: &mut Tape, v: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.reshaped(tape.shape(v).to_vec()).unwrap());
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

fn primitives(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng::seeded(seed, 100, 0);
    let t = r.random_range(1..=5usize);
    let m = r.random_range(1..=3usize);
    let n = r.random_range(1..=3usize);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   out_len: usize,
                   r: &mut rng::Rng,
                   f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        let w = random(&[out_len], -1.5, 1.5, r);
        let err = check(&inputs, &|tape, v| {
            let y = f(tape, v);
            reduce(tape, y, &w)
        });
        out.push((name, err));
    };

    let ins = vec![
        random(&[m], -1.0, 1.0, &mut r),
        random(&[n, m], -1.0, 1.0, &mut r),
        random(&[n], -1.0, 1.0, &mut r),
    ];
    run("affine", ins, n, &mut r, &|tp, v| tp.affine(v[0], v[1], v[2]).unwrap());
    let ins = vec![
        random(&[t, m], -1.0, 1.0, &mut r),
        random(&[n, m], -1.0, 1.0, &mut r),
        random(&[n], -1.0, 1.0, &mut r),
    ];
    run("linear_rows", ins, t * n, &mut r, &|tp, v| {
        tp.linear_rows(v[0], v[1], v[2]).unwrap()
    });
    let ins = vec![random(&[t, n], -1.0, 1.0, &mut r), random(&[n], -1.0, 1.0, &mut r)];
    run("matvec", ins, t, &mut r, &|tp, v| tp.matvec(v[0], v[1]).unwrap());
    let ins = vec![random(&[t], -1.0, 1.0, &mut r), random(&[t, n], -1.0, 1.0, &mut r)];
    run("vecmat", ins, n, &mut r, &|tp, v| tp.vecmat(v[0], v[1]).unwrap());
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let ins = vec![random(&[t, n], -2.0, 2.0, &mut r), random(&[t, n], -2.0, 2.0, &mut r)];
        run(name, ins, t * n, &mut r, &move |tp, v| match op {
            0 => tp.add(v[0], v[1]).unwrap(),
            1 => tp.sub(v[0], v[1]).unwrap(),
            _ => tp.mul(v[0], v[1]).unwrap(),
        });
    }
    let factor = r.random_range(-3.0..3.0);
    run(
        "scale",
        vec![random(&[t], -2.0, 2.0, &mut r)],
        t,
        &mut r,
        &move |tp, v| tp.scale(v[0], factor),
    );
    run(
        "tanh",
        vec![random(&[t, n], -3.0, 3.0, &mut r)],
        t * n,
        &mut r,
        &|tp, v| tp.tanh(v[0]),
    );
    run(
        "sigmoid",
        vec![random(&[t, n], -4.0, 4.0, &mut r)],
        t * n,
        &mut r,
        &|tp, v| tp.sigmoid(v[0]),
    );
    run("softmax", vec![random(&[t], -3.0, 3.0, &mut r)], t, &mut r, &|tp, v| {
        tp.softmax(v[0]).unwrap()
    });
    run("sum", vec![random(&[t, n], -1.0, 1.0, &mut r)], 1, &mut r, &|tp, v| {
        tp.sum(v[0])
    });
    run(
        "sum_squares",
        vec![random(&[t + 1, n], -1.0, 1.0, &mut r)],
        1,
        &mut r,
        &|tp, v| tp.sum_squares(v[0], 1),
    );
    let ins = vec![random(&[1], 0.05, 0.95, &mut r), random(&[1], 0.05, 0.95, &mut r)];
    run("kl_bernoulli", ins, 1, &mut r, &|tp, v| {
        tp.kl_bernoulli(v[0], v[1]).unwrap()
    });
    let y = f64::from(u8::from(r.random_bool(0.5)));
    run(
        "binary_nll",
        vec![random(&[1], 0.05, 0.95, &mut r)],
        1,
        &mut r,
        &move |tp, v| tp.binary_nll(v[0], y).unwrap(),
    );
    let ids: Vec<usize> = (0..t).map(|_| r.random_range(0..4)).collect();
    run(
        "gather",
        vec![random(&[4, m], -1.0, 1.0, &mut r)],
        t * m,
        &mut r,
        &move |tp, v| tp.gather(v[0], &ids).unwrap(),
    );
    let ins = vec![random(&[t], -1.0, 1.0, &mut r), random(&[n], -1.0, 1.0, &mut r)];
    run("concat", ins, t + n, &mut r, &|tp, v| tp.concat(&[v[0], v[1]]).unwrap());
    let start = r.random_range(0..t);
    let len = r.random_range(1..=t - start);
    run(
        "slice",
        vec![random(&[t], -1.0, 1.0, &mut r)],
        len,
        &mut r,
        &move |tp, v| tp.slice(v[0], start, len).unwrap(),
    );
    let ins = vec![random(&[n], -1.0, 1.0, &mut r), random(&[n], -1.0, 1.0, &mut r)];
    run("stack", ins, 3 * n, &mut r, &|tp, v| {
        tp.stack(&[v[0], v[1], v[0]]).unwrap()
    });
    let row = r.random_range(0..t);
    run(
        "row",
        vec![random(&[t, n], -1.0, 1.0, &mut r)],
        n,
        &mut r,
        &move |tp, v| tp.row(v[0], row).unwrap(),
    );
    run(
        "reshape",
        vec![random(&[t, n], -1.0, 1.0, &mut r)],
        t * n,
        &mut r,
        &move |tp, v| tp.reshape(v[0], &[n * t]).unwrap(),
    );
    let k = r.random_range(1..=3usize);
    let ins = vec![
        random(&[t, k], -1.0, 1.0, &mut r),
        random(&[t, k, m], -1.0, 1.0, &mut r),
    ];
    run("contract", ins, t * m, &mut r, &|tp, v| {
        tp.contract(v[0], v[1]).unwrap()
    });
    out
}

fn tiny_config(r: &mut rng::Rng) -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        embed_dim: r.random_range(1..=3),
        hidden: r.random_range(1..=3),
        attention_dim: Some(r.random_range(1..=3)),
    }
}

/// NLL plus L2 of the full model, with both perturbation sites active, as a
/// function of all parameter tensors followed by the two injected tensors.
fn model_loss<'a>(config: &'a ModelConfig, ids: &'a [usize], label: u8) -> impl Fn(&mut Tape, &[Var]) -> Var + 'a {
    move |tape, v| {
        let pv = attnvat::model::ParamVars::from_vars(v[..Param::COUNT].to_vec()).unwrap();
        let inject = Injection {
            embedding: Some(v[Param::COUNT]),
            scores: Some(v[Param::COUNT + 1]),
        };
        let out = forward_on_tape(tape, &pv, config, ids, inject).unwrap();
        let nll = nll_loss(tape, out.prob, label).unwrap();
        let l2 = l2_penalty(tape, &pv, 0.05);
        tape.add(nll, l2).unwrap()
    }
}

fn model(seed: u64) -> f64 {
    let mut r = rng::seeded(seed, 101, 0);
    let config = tiny_config(&mut r);
    let t = r.random_range(1..=5usize);
    let ids: Vec<usize> = (0..t).map(|_| r.random_range(0..config.vocab_size)).collect();
    let label = u8::from(r.random_bool(0.5));
    let params = ModelParams::init(config.clone(), seed);
    let mut inputs = params.tensors().to_vec();
    // Larger weights than the default initialization so gates leave their linear regime.
    for x in inputs.iter_mut() {
        for v in x.data_mut() {
            *v *= 2.0;
        }
    }
    inputs.push(random(&[t, config.embed_dim], -0.3, 0.3, &mut r));
    inputs.push(random(&[t], -0.5, 0.5, &mut r));
    let loss = model_loss(&config, &ids, label);
    check(&inputs, &loss)
}

pub fn criterion() -> Result<String, String> {
    let mut worst = ("", 0.0f64);
    for seed in 0..100 {
        for (name, err) in primitives(seed) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
        let err = model(seed);
        if err > worst.1 {
            worst = ("model loss", err);
        }
    }
    let msg = format!("worst relative error {:.2e} ({}) over 100 seeds", worst.1, worst.0);
    if worst.1 < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
