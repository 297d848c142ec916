//! Define-by-run reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its nodes. Nodes are
//! addressed by [`Var`] handles, which are plain indices and only meaningful
//! on the tape that produced them. [`Tape::backward`] walks the tape once in
//! reverse and returns a [`Gradients`] map covering every ancestor of the
//! loss that was created with `requires_grad`.
//!
//! ```
//! use attnvat::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AutodiffError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Two-dimensional tensor from rows of equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(AutodiffError::Shape {
                op: "matrix",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    LinearRows { x: Var, w: Var, b: Var },
    MatVec { a: Var, v: Var },
    VecMat { v: Var, a: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax(Var),
    Sum(Var),
    SumSquares { a: Var, skip_rows: usize },
    KlBernoulli { p: Var, q: Var },
    BinaryNll { q: Var, y: f64 },
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Stack(Vec<Var>),
    Row { a: Var, index: usize },
    Reshape(Var),
    Contract { alpha: Var, dirs: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Nodes are appended in creation order, so parents
/// always precede children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if `v` is not a differentiable ancestor
    /// of the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v).map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.to_vec(),
        })
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn clamp_slope(p: f64) -> f64 {
    if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Bernoulli KL divergence `KL(p || q)` on plain numbers, with clamping.
pub fn kl_bernoulli_value(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a new constant; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `w · x + b` for `x: [m]`, `w: [n, m]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("affine", ws, xs));
        }
        if bs.len() != 1 || bs[0] != ws[0] {
            return Err(shape_err("affine", ws, bs));
        }
        let (n, m) = (ws[0], ws[1]);
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let out: Vec<f64> = (0..n).map(|i| bv[i] + dot(&wv[i * m..(i + 1) * m], xv)).collect();
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Row-wise affine map: `x: [t, m]`, `w: [n, m]`, `b: [n]` gives `[t, n]`.
    pub fn linear_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear_rows", xs, ws));
        }
        if bs.len() != 1 || bs[0] != ws[0] {
            return Err(shape_err("linear_rows", ws, bs));
        }
        let (t, m, n) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = Vec::with_capacity(t * n);
        for r in 0..t {
            let row = &xv[r * m..(r + 1) * m];
            for i in 0..n {
                out.push(bv[i] + dot(&wv[i * m..(i + 1) * m], row));
            }
        }
        let value = Tensor::new(vec![t, n], out)?;
        Ok(self.push(value, Op::LinearRows { x, w, b }, &[x, w, b]))
    }

    /// `a: [t, n]` times `v: [n]` gives `[t]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (as_, vs) = (self.shape(a), self.shape(v));
        if as_.len() != 2 || vs.len() != 1 || as_[1] != vs[0] {
            return Err(shape_err("matvec", as_, vs));
        }
        let (t, n) = (as_[0], as_[1]);
        let (av, vv) = (&self.value(a).data, &self.value(v).data);
        let out = (0..t).map(|r| dot(&av[r * n..(r + 1) * n], vv)).collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec { a, v }, &[a, v]))
    }

    /// `v: [t]` weighting the rows of `a: [t, m]`, giving `[m]`.
    pub fn vecmat(&mut self, v: Var, a: Var) -> Result<Var> {
        let (vs, as_) = (self.shape(v), self.shape(a));
        if as_.len() != 2 || vs.len() != 1 || as_[0] != vs[0] {
            return Err(shape_err("vecmat", vs, as_));
        }
        let (t, m) = (as_[0], as_[1]);
        let (vv, av) = (&self.value(v).data, &self.value(a).data);
        let mut out = vec![0.0; m];
        for r in 0..t {
            for (o, x) in out.iter_mut().zip(&av[r * m..(r + 1) * m]) {
                *o += vv[r] * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat { v, a }, &[v, a]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (&self.value(a), &self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scaled(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let src = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(value, Op::Act(a, kind), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape.len() != 1 {
            return Err(AutodiffError::Domain {
                op: "softmax",
                msg: format!("expected a vector, got shape {:?}", src.shape),
            });
        }
        let out = softmax_values(&src.data);
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sum of squared entries, skipping the first `skip_rows` rows.
    pub fn sum_squares(&mut self, a: Var, skip_rows: usize) -> Var {
        let t = self.value(a);
        let start = if skip_rows == 0 {
            0
        } else {
            let cols: usize = t.shape[1..].iter().product();
            (skip_rows * cols).min(t.data.len())
        };
        let s = t.data[start..].iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { a, skip_rows: start }, &[a])
    }

    /// `KL(Bernoulli(p) || Bernoulli(q))` for scalar probabilities.
    pub fn kl_bernoulli(&mut self, p: Var, q: Var) -> Result<Var> {
        let pv = self.scalar_prob(p, "kl_bernoulli")?;
        let qv = self.scalar_prob(q, "kl_bernoulli")?;
        let value = Tensor::scalar(kl_bernoulli_value(pv, qv));
        Ok(self.push(value, Op::KlBernoulli { p, q }, &[p, q]))
    }

    /// Negative log-likelihood of label `y` under `Bernoulli(q)`.
    pub fn binary_nll(&mut self, q: Var, y: f64) -> Result<Var> {
        if y != 0.0 && y != 1.0 {
            return Err(AutodiffError::Domain {
                op: "binary_nll",
                msg: format!("label {y} is not 0 or 1"),
            });
        }
        let qv = clamp_prob(self.scalar_prob(q, "binary_nll")?);
        let loss = -(y * qv.ln() + (1.0 - y) * (1.0 - qv).ln());
        Ok(self.push(Tensor::scalar(loss), Op::BinaryNll { q, y }, &[q]))
    }

    fn scalar_prob(&self, v: Var, op: &'static str) -> Result<f64> {
        let t = self.value(v);
        if t.data.len() != 1 {
            return Err(shape_err(op, &t.shape, &[1]));
        }
        let p = t.data[0];
        if !(0.0..=1.0).contains(&p) {
            return Err(AutodiffError::Domain {
                op,
                msg: format!("probability {p} outside [0, 1]"),
            });
        }
        Ok(p)
    }

    /// Rows of `table: [v, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids.is_empty() {
            return Err(shape_err("gather", ts, &[ids.len()]));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Domain {
                op: "gather",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let tv = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 1 {
                return Err(shape_err("concat", &t.shape, &[]));
            }
            out.extend_from_slice(&t.data);
        }
        if out.is_empty() {
            return Err(shape_err("concat", &[], &[]));
        }
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), parts))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 1 || len == 0 || start + len > t.data.len() {
            return Err(shape_err("slice", &t.shape, &[start, len]));
        }
        let out = t.data[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(out), Op::Slice { a, start }, &[a]))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| shape_err("stack", &[], &[]))?;
        let m = self.shape(*first).to_vec();
        if m.len() != 1 {
            return Err(shape_err("stack", &m, &[]));
        }
        let mut out = Vec::with_capacity(rows.len() * m[0]);
        for &r in rows {
            if self.shape(r) != m.as_slice() {
                return Err(shape_err("stack", &m, self.shape(r)));
            }
            out.extend_from_slice(&self.value(r).data);
        }
        let value = Tensor::new(vec![rows.len(), m[0]], out)?;
        Ok(self.push(value, Op::Stack(rows.to_vec()), rows))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || index >= t.shape[0] {
            return Err(shape_err("row", &t.shape, &[index]));
        }
        let out = t.row(index).to_vec();
        Ok(self.push(Tensor::vector(out), Op::Row { a, index }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `out[t, j] = sum_k alpha[t, k] * dirs[t, k, j]` for `alpha: [t, k]`
    /// and `dirs: [t, k, d]`, giving `[t, d]`.
    pub fn contract(&mut self, alpha: Var, dirs: Var) -> Result<Var> {
        let (al, ds) = (self.shape(alpha), self.shape(dirs));
        if al.len() != 2 || ds.len() != 3 || al[0] != ds[0] || al[1] != ds[1] {
            return Err(shape_err("contract", al, ds));
        }
        let (t, k, d) = (ds[0], ds[1], ds[2]);
        let (av, dv) = (&self.value(alpha).data, &self.value(dirs).data);
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..k {
                let a = av[r * k + c];
                let dir = &dv[(r * k + c) * d..(r * k + c + 1) * d];
                for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(dir) {
                    *o += a * x;
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(value, Op::Contract { alpha, dirs }, &[alpha, dirs]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != [1] {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let m = xv.len();
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        for (gxj, wij) in gx.iter_mut().zip(&wv[i * m..(i + 1) * m]) {
                            *gxj += gi * wij;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        for (gwij, xj) in gw[i * m..(i + 1) * m].iter_mut().zip(xv) {
                            *gwij += gi * xj;
                        }
                    }
                });
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::LinearRows { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = nodes[b.0].value.data.len();
                let m = wv.len() / n;
                let t = xv.len() / m;
                acc(*x, &mut |gx| {
                    for r in 0..t {
                        for i in 0..n {
                            let gi = g[r * n + i];
                            for (gxj, wij) in gx[r * m..(r + 1) * m].iter_mut().zip(&wv[i * m..(i + 1) * m]) {
                                *gxj += gi * wij;
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..t {
                        for i in 0..n {
                            let gi = g[r * n + i];
                            for (gwij, xj) in gw[i * m..(i + 1) * m].iter_mut().zip(&xv[r * m..(r + 1) * m]) {
                                *gwij += gi * xj;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..t {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::MatVec { a, v } => {
                let (av, vv) = (val(*a), val(*v));
                let n = vv.len();
                acc(*a, &mut |ga| {
                    for (r, gr) in g.iter().enumerate() {
                        for (gaj, vj) in ga[r * n..(r + 1) * n].iter_mut().zip(vv) {
                            *gaj += gr * vj;
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for (r, gr) in g.iter().enumerate() {
                        for (gvj, aj) in gv.iter_mut().zip(&av[r * n..(r + 1) * n]) {
                            *gvj += gr * aj;
                        }
                    }
                });
            }
            Op::VecMat { v, a } => {
                let (vv, av) = (val(*v), val(*a));
                let m = g.len();
                acc(*v, &mut |gv| {
                    for (r, gvr) in gv.iter_mut().enumerate() {
                        *gvr += dot(&av[r * m..(r + 1) * m], g);
                    }
                });
                acc(*a, &mut |ga| {
                    for (r, vr) in vv.iter().enumerate() {
                        for (gaj, gj) in ga[r * m..(r + 1) * m].iter_mut().zip(g) {
                            *gaj += vr * gj;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * f;
                }
            }),
            Op::Act(a, kind) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        let d = match kind {
                            Activation::Tanh => 1.0 - yi * yi,
                            Activation::Sigmoid => yi * (1.0 - yi),
                        };
                        *x += gi * d;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let gy = dot(g, y);
                acc(*a, &mut |ga| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += yi * (gi - gy);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::SumSquares { a, skip_rows } => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for (x, ai) in ga[*skip_rows..].iter_mut().zip(&av[*skip_rows..]) {
                        *x += 2.0 * ai * g[0];
                    }
                });
            }
            Op::KlBernoulli { p, q } => {
                let (pr, qr) = (val(*p)[0], val(*q)[0]);
                let (pc, qc) = (clamp_prob(pr), clamp_prob(qr));
                acc(*p, &mut |gp| {
                    let d = (pc / qc).ln() - ((1.0 - pc) / (1.0 - qc)).ln();
                    gp[0] += g[0] * d * clamp_slope(pr);
                });
                acc(*q, &mut |gq| {
                    let d = -pc / qc + (1.0 - pc) / (1.0 - qc);
                    gq[0] += g[0] * d * clamp_slope(qr);
                });
            }
            Op::BinaryNll { q, y } => {
                let qr = val(*q)[0];
                let qc = clamp_prob(qr);
                acc(*q, &mut |gq| {
                    let d = -y / qc + (1.0 - y) / (1.0 - qc);
                    gq[0] += g[0] * d * clamp_slope(qr);
                });
            }
            Op::Gather { table, ids } => {
                let d = g.len() / ids.len();
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.data.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Slice { a, start } => acc(*a, &mut |ga| {
                add_into(&mut ga[*start..*start + g.len()], g);
            }),
            Op::Stack(rows) => {
                let m = g.len() / rows.len();
                for (r, &p) in rows.iter().enumerate() {
                    acc(p, &mut |gp| add_into(gp, &g[r * m..(r + 1) * m]));
                }
            }
            Op::Row { a, index } => {
                let m = g.len();
                acc(*a, &mut |ga| add_into(&mut ga[index * m..(index + 1) * m], g));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Contract { alpha, dirs } => {
                let (av, dv) = (val(*alpha), val(*dirs));
                let ds = &nodes[dirs.0].value.shape;
                let (t, k, d) = (ds[0], ds[1], ds[2]);
                acc(*alpha, &mut |ga| {
                    for r in 0..t {
                        let gr = &g[r * d..(r + 1) * d];
                        for c in 0..k {
                            ga[r * k + c] += dot(gr, &dv[(r * k + c) * d..(r * k + c + 1) * d]);
                        }
                    }
                });
                acc(*dirs, &mut |gd| {
                    for r in 0..t {
                        let gr = &g[r * d..(r + 1) * d];
                        for c in 0..k {
                            let a = av[r * k + c];
                            for (x, gj) in gd[(r * k + c) * d..(r * k + c + 1) * d].iter_mut().zip(gr) {
                                *x += a * gj;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-shifted softmax on plain values.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Largest relative discrepancy between the tape gradient of `f` at `x` and a
/// central finite difference with step `h`, measured per coordinate as
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
