//! Embedding -> BiLSTM -> additive attention -> sigmoid decoder.
//!
//! The forward pass is recorded on a [`Tape`] so that gradients can be taken
//! with respect to the parameters, the embedded words, or the pre-softmax
//! attention scores. A perturbation may be injected at either of the last two.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::rng::{self, stream};
use crate::textdata;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("score perturbation has length {got}, sequence has {expected} tokens")]
    PerturbationLength { expected: usize, got: usize },
    #[error("label {0} is not 0 or 1")]
    Label(u8),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size of each LSTM direction.
    pub hidden: usize,
    /// Attention projection size; defaults to half the concatenated state.
    #[serde(default)]
    pub attention_dim: Option<usize>,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 50,
            hidden: 32,
            attention_dim: None,
        }
    }

    /// Width of the concatenated bidirectional state.
    pub fn state_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn attn_dim(&self) -> usize {
        self.attention_dim.unwrap_or((self.state_dim() / 2).max(1))
    }

    fn shapes(&self) -> [Vec<usize>; Param::COUNT] {
        let (d, u, m, a) = (self.embed_dim, self.hidden, self.state_dim(), self.attn_dim());
        [
            vec![self.vocab_size, d],
            vec![4 * u, d],
            vec![4 * u, u],
            vec![4 * u],
            vec![4 * u, d],
            vec![4 * u, u],
            vec![4 * u],
            vec![a, m],
            vec![a],
            vec![a],
            vec![1, m],
            vec![1],
        ]
    }
}

/// Parameter groups, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Embedding,
    FwdInput,
    FwdRecurrent,
    FwdBias,
    BwdInput,
    BwdRecurrent,
    BwdBias,
    AttnW,
    AttnB,
    AttnC,
    DecW,
    DecB,
}

impl Param {
    pub const COUNT: usize = 12;
    pub const ALL: [Param; Param::COUNT] = [
        Param::Embedding,
        Param::FwdInput,
        Param::FwdRecurrent,
        Param::FwdBias,
        Param::BwdInput,
        Param::BwdRecurrent,
        Param::BwdBias,
        Param::AttnW,
        Param::AttnB,
        Param::AttnC,
        Param::DecW,
        Param::DecB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::Embedding => "embedding",
            Param::FwdInput => "lstm_fwd.w_ih",
            Param::FwdRecurrent => "lstm_fwd.w_hh",
            Param::FwdBias => "lstm_fwd.b",
            Param::BwdInput => "lstm_bwd.w_ih",
            Param::BwdRecurrent => "lstm_bwd.w_hh",
            Param::BwdBias => "lstm_bwd.b",
            Param::AttnW => "attention.w",
            Param::AttnB => "attention.b",
            Param::AttnC => "attention.c",
            Param::DecW => "decoder.w",
            Param::DecB => "decoder.b",
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Random initialization: embeddings from `U(-0.1, 0.1)` with a zero PAD
    /// row, weight matrices from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases
    /// zero.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let embedding = textdata::random_embeddings(config.vocab_size, config.embed_dim, seed);
        Self::init_with_embedding(config, embedding, seed)
    }

    pub fn init_with_embedding(config: ModelConfig, embedding: Tensor, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, stream::INIT, 0);
        let shapes = config.shapes();
        assert_eq!(embedding.shape(), shapes[0].as_slice(), "embedding shape");
        let mut tensors = vec![embedding];
        for (p, shape) in Param::ALL.iter().zip(&shapes).skip(1) {
            let mut t = Tensor::zeros(shape);
            let bias = matches!(p, Param::FwdBias | Param::BwdBias | Param::AttnB | Param::DecB);
            if !bias {
                let fan_in = if shape.len() == 2 { shape[1] } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            tensors.push(t);
        }
        ModelParams { config, tensors }
    }

    /// Assembles parameters from tensors in [`Param::ALL`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Option<Self> {
        let shapes = config.shapes();
        if tensors.len() != Param::COUNT || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice()) {
            return None;
        }
        Some(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.tensors[p as usize]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p as usize]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps existing tape nodes, one per [`Param`] in declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Option<Self> {
        (vars.len() == Param::COUNT).then_some(ParamVars { vars })
    }

    pub fn get(&self, p: Param) -> Var {
        self.vars[p as usize]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Attention scores, weights and context of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
}

/// Tape nodes of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedded: Var,
    pub hidden: Var,
    /// Clean scores, before any injected perturbation.
    pub scores: Var,
    pub weights: Var,
    pub context: Var,
    pub logit: Var,
    pub prob: Var,
}

impl ForwardVars {
    pub fn attention(&self, tape: &Tape) -> AttentionState {
        AttentionState {
            scores: tape.value(self.scores).data().to_vec(),
            weights: tape.value(self.weights).data().to_vec(),
            context: tape.value(self.context).data().to_vec(),
        }
    }

    pub fn prediction(&self, tape: &Tape) -> Prediction {
        Prediction {
            probability: tape.value(self.prob).item(),
            logit: tape.value(self.logit).item(),
        }
    }
}

/// Optional perturbations injected into a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Injection {
    /// Added to the embedded sequence, shape `[T, d]`.
    pub embedding: Option<Var>,
    /// Added to the attention scores before the softmax, shape `[T]`.
    pub scores: Option<Var>,
}

fn lstm_direction(
    tape: &mut Tape,
    embedded: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let steps = tape.shape(embedded)[0];
    let projected = tape.linear_rows(embedded, w_ih, bias)?;
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x_t = tape.row(projected, t)?;
        let gates = tape.affine(h, w_hh, x_t)?;
        let i = tape.slice(gates, 0, hidden)?;
        let f = tape.slice(gates, hidden, hidden)?;
        let g = tape.slice(gates, 2 * hidden, hidden)?;
        let o = tape.slice(gates, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional LSTM over `embedded: [T, d]`, giving `[T, 2u]` with the
/// forward state first in each row.
pub fn encode_bilstm(tape: &mut Tape, embedded: Var, pv: &ParamVars, hidden: usize) -> Result<Var> {
    let fwd = lstm_direction(
        tape,
        embedded,
        pv.get(Param::FwdInput),
        pv.get(Param::FwdRecurrent),
        pv.get(Param::FwdBias),
        hidden,
        false,
    )?;
    let bwd = lstm_direction(
        tape,
        embedded,
        pv.get(Param::BwdInput),
        pv.get(Param::BwdRecurrent),
        pv.get(Param::BwdBias),
        hidden,
        true,
    )?;
    let rows = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.stack(&rows)?)
}

/// Additive attention scores `c . tanh(W h_t + b)` for each row of `hidden`.
pub fn attention_scores(tape: &mut Tape, hidden: Var, pv: &ParamVars) -> Result<Var> {
    let proj = tape.linear_rows(hidden, pv.get(Param::AttnW), pv.get(Param::AttnB))?;
    let act = tape.tanh(proj);
    Ok(tape.matvec(act, pv.get(Param::AttnC))?)
}

/// Full forward pass for one token sequence.
pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    ids: &[usize],
    inject: Injection,
) -> Result<ForwardVars> {
    let mut embedded = tape.gather(pv.get(Param::Embedding), ids)?;
    if let Some(r) = inject.embedding {
        embedded = tape.add(embedded, r)?;
    }
    let hidden = encode_bilstm(tape, embedded, pv, config.hidden)?;
    let scores = attention_scores(tape, hidden, pv)?;
    let head = attend(tape, pv, hidden, scores, inject.scores)?;
    Ok(ForwardVars {
        embedded,
        hidden,
        scores,
        weights: head.weights,
        context: head.context,
        logit: head.logit,
        prob: head.prob,
    })
}

/// Output of the attention pooling and decoder stages.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weights: Var,
    pub context: Var,
    pub logit: Var,
    pub prob: Var,
}

/// Softmax over `scores + shift`, pooling of `hidden` and the sigmoid decoder.
/// Lets callers reuse one encoder pass for several score perturbations.
pub fn attend(tape: &mut Tape, pv: &ParamVars, hidden: Var, scores: Var, shift: Option<Var>) -> Result<HeadVars> {
    let mut shifted = scores;
    if let Some(r) = shift {
        let expected = tape.shape(scores)[0];
        let got = tape.shape(r).iter().product();
        if got != expected {
            return Err(ModelError::PerturbationLength { expected, got });
        }
        shifted = tape.add(scores, r)?;
    }
    let weights = tape.softmax(shifted)?;
    let context = tape.vecmat(weights, hidden)?;
    let logit = tape.affine(context, pv.get(Param::DecW), pv.get(Param::DecB))?;
    let prob = tape.sigmoid(logit);
    Ok(HeadVars {
        weights,
        context,
        logit,
        prob,
    })
}

/// Untracked forward pass with an optional score perturbation.
pub fn forward(
    params: &ModelParams,
    ids: &[usize],
    score_perturbation: Option<&[f64]>,
) -> Result<(Prediction, AttentionState)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let scores = match score_perturbation {
        Some(r) if r.len() != ids.len() => {
            return Err(ModelError::PerturbationLength {
                expected: ids.len(),
                got: r.len(),
            })
        }
        Some(r) => Some(tape.constant(Tensor::vector(r.to_vec()))),
        None => None,
    };
    let out = forward_on_tape(
        &mut tape,
        &pv,
        params.config(),
        ids,
        Injection {
            embedding: None,
            scores,
        },
    )?;
    Ok((out.prediction(&tape), out.attention(&tape)))
}

/// Binary negative log-likelihood of `label` for a probability node.
pub fn nll_loss(tape: &mut Tape, prob: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(ModelError::Label(label));
    }
    Ok(tape.binary_nll(prob, f64::from(label))?)
}

/// `coefficient * sum of squares` over every parameter except the PAD row.
pub fn l2_penalty(tape: &mut Tape, pv: &ParamVars, coefficient: f64) -> Var {
    let parts: Vec<Var> = Param::ALL
        .iter()
        .map(|&p| {
            let skip = usize::from(p == Param::Embedding);
            tape.sum_squares(pv.get(p), skip)
        })
        .collect();
    let stacked = tape.concat(&parts).expect("scalar parts");
    let total = tape.sum(stacked);
    tape.scale(total, coefficient)
}

/// Plain-value version of [`l2_penalty`].
pub fn l2_value(params: &ModelParams, coefficient: f64) -> f64 {
    let d = params.config().embed_dim;
    let total: f64 = Param::ALL
        .iter()
        .map(|&p| {
            let data = params.get(p).data();
            let start = if p == Param::Embedding { d } else { 0 };
            data[start..].iter().map(|x| x * x).sum::<f64>()
        })
        .sum();
    coefficient * total
}
