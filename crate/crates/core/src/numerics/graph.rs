//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order; a [`Var`] is an
//! index into that record. Because a node can only reference nodes that
//! already exist, the record is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Gradients only flow into nodes that (transitively) depend on a leaf
//! created with `requires_grad = true`. Everything else is treated as a
//! constant and never allocates a gradient buffer.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{add_into, matmul_nn, matmul_nt, matmul_tn};
use super::{Scalar, Tensor};
use crate::error::{contract, Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    pub(crate) bindings: HashMap<usize, Var>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter bound through the graph's binding table.
    pub fn param(&self, param: usize) -> Option<&[T]> {
        self.params.get(&param).and_then(|&v| self.get(v))
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf holding a copy of `t`; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub(crate) fn tag_param(&mut self, v: Var, param: usize) {
        self.bindings.insert(param, v);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape invariant")
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn expect_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_rank2("matmul", a)?;
        let (k2, n) = self.expect_rank2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = matmul_nn(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    /// `a[m,k] · w[n,k]ᵀ`: a bias-free linear layer with weight `w[out,in]`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, k) = self.expect_rank2("matmul_t", a)?;
        let (n, k2) = self.expect_rank2("matmul_t", w)?;
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, w));
        }
        let value = matmul_nt(self.value(a), self.value(w), m, k, n);
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(vec![m, n], value, Op::MatMulT(a, w), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), ng))
    }

    /// `x[.., d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(x);
        if self.value(bias).len() != d {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|r| r.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Sigmoid(a), ng)
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if d < 2 {
            return Err(contract(format!("layernorm needs d >= 2, got {d}")));
        }
        if self.value(gain).len() != d {
            return Err(self.shape_err("layernorm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err("layernorm", x, bias));
        }
        let eps = T::of(LAYERNORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` inputs, with
    /// `d` split evenly across `heads`. `causal` masks keys after the query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.expect_rank2("attention", q)?;
        if self.shape(k) != self.shape(q) {
            return Err(self.shape_err("attention", q, k));
        }
        if self.shape(v) != self.shape(q) {
            return Err(self.shape_err("attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                let limit = if causal { i + 1 } else { n };
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..limit {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = T::zero();
                for pj in p.iter_mut().take(limit) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut().take(limit) {
                    *pj /= z;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..limit {
                    let w = p[j];
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout. Returns `x` itself when inactive, so inference and
    /// `p = 0` are exact identities.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout(x, mask), ng))
    }

    /// Mean cross-entropy over rows where `mask[i]` is true.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, vocab) = self.expect_rank2("softmax_ce", logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "softmax_ce",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let zs = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(contract(format!("target {t} outside vocabulary {vocab}")));
            }
            let row = &zs[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let pr = &mut probs[i * vocab..(i + 1) * vocab];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Rows `start..start+len` of a rank-2 value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.expect_rank2("slice_rows", x)?;
        if len == 0 || start + len > n {
            return Err(contract(format!("rows {start}..{} outside 0..{n}", start + len)));
        }
        let value = self.value(x)[start * d..(start + len) * d].to_vec();
        let ng = self.ng(x);
        Ok(self.push(vec![len, d], value, Op::SliceRows(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let (_, d) = self.expect_rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.expect_rank2("concat_rows", p)?;
            if c != d {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, d], value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Rows of `table[v, d]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.expect_rank2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(contract("gather of no rows"));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(contract(format!("row {i} outside table of {v}")));
            }
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), d], value, Op::GatherRows(table, ids.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // Intermediate buffers are only kept for differentiable leaves and the
        // loss-side nodes that reached them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        let params = self.bindings.clone();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn propagate(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    self.acc(grads, *a, matmul_nt(gout, self.value(*b), m, n, k));
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    self.acc(grads, *b, matmul_tn(self.value(*a), gout, m, k, n));
                }
            }
            Op::MatMulT(a, w) => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*w);
                if self.ng(*a) {
                    // dA = dC · W
                    self.acc(grads, *a, matmul_nn(gout, self.value(*w), m, n, k));
                }
                if self.ng(*w) {
                    // dW = dCᵀ · A
                    self.acc(grads, *w, matmul_tn(gout, self.value(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.to_vec());
                self.acc(grads, *b, gout.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, gout.to_vec());
                let d = self.value(*bias).len();
                self.acc_with(grads, *bias, |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, gout.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gout.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, gout.iter().map(|&g| g * *c).collect());
            }
            Op::Gelu(a) => {
                let xs = self.value(*a);
                self.acc(
                    grads,
                    *a,
                    gout.iter().zip(xs).map(|(&g, &x)| g * gelu_grad(x)).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let ys = &node.value;
                self.acc(
                    grads,
                    *a,
                    gout.iter()
                        .zip(ys)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let g = self.value(*gain);
                if self.ng(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); gout.len()];
                    for (r, (dy, xh)) in gout.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = dy[j] * g[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = dy[j] * g[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *gain, |gg| {
                    for (dy, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * xh[j];
                        }
                    }
                });
                self.acc_with(grads, *bias, |gb| {
                    for dy in gout.chunks(d) {
                        add_into(gb, dy);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gout, grads),
            Op::Dropout(x, mask) => {
                self.acc(grads, *x, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::SoftmaxCe {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.dims2(*logits).1;
                let scale = gout[0] / T::of(*count as f64);
                let mut dz = vec![T::zero(); probs.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..vocab {
                        dz[r * vocab + j] = probs[r * vocab + j] * scale;
                    }
                    dz[r * vocab + targets[r]] -= scale;
                }
                self.acc(grads, *logits, dz);
            }
            Op::SliceRows(x, start) => {
                let d = self.dims2(*x).1;
                let off = start * d;
                self.acc_with(grads, *x, |g| add_into(&mut g[off..off + gout.len()], gout));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, gout[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, gout.to_vec()),
            Op::GatherRows(table, ids) => {
                let d = self.dims2(*table).1;
                self.acc_with(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![gout[0]; n]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = self.dims2(q);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let go = &gout[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..n {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vs[j * d + off..j * d + off + dh];
                    let s = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    dp[j] = s;
                    dot += p[j] * s;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (x, &g) in dvj.iter_mut().zip(go) {
                        *x += p[j] * g;
                    }
                }
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * ks[j * d + off + t];
                        dk[j * d + off + t] += ds * qs[i * d + off + t];
                    }
                }
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}
