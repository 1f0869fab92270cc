//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Shapes are explicit; the only broadcast is a row vector added to every
//! row of a matrix.

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Smallest row norm accepted by normalization ops.
pub const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
///
/// `grads_in[i]` arrives zeroed with the shape of `inputs[i]`.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]);
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Softmax(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    MeanInner { x: Var, inner: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn Backward> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Softmax(_) => "softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::MeanInner { .. } => "mean_inner",
            Op::Attention { .. } => "attention",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<(usize, &'static str)>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradient of `v`, zeros if it did not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Errors if any op so far produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((idx, name)) => Err(Error::NonFinite(format!("{name} (node {idx})"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(idx)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers an op whose backward rule lives elsewhere.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMulBt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[c, r], out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds row vector `r` (length d) to every row of `a` (n×d).
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (_, d) = self.value(a).dims2();
        assert_eq!(self.value(r).len(), d, "add_row width mismatch");
        let row = self.value(r).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(&row).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape(), data);
        let rg = self.rg(&[a, r]);
        self.push(t, Op::AddRow(a, r), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu_and_grad(x).0, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for (i, row) in self.value(x).data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (out, norms) = l2_normalize_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Row-wise cosine similarity `n×m` between `a` (n×d) and `b` (m×d).
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        Ok(self.matmul_bt(an, bn))
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (n, d) = self.value(x).dims2();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather index {i} out of range {n}");
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[idx.len(), d], out), Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// Row concatenation; 1-D inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let d = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, d, "concat_rows width mismatch");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(&[rows, d], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over rows: n×d -> d.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[d], out), Op::MeanRows(x), rg)
    }

    /// Mean over all but the leading axis: C×… -> C.
    pub fn mean_inner(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let inner = t.len() / c;
        let out = t.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c], out), Op::MeanInner { x, inner }, rg)
    }

    /// Multi-head scaled dot-product attention core. `q`: n×D, `k`,`v`: m×D.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, dm) = self.value(q).dims2();
        let (m, dk) = self.value(k).dims2();
        assert_eq!(dm, dk);
        assert_eq!(self.value(v).dims2(), (m, dm));
        assert_eq!(dm % heads, 0, "width {dm} not divisible by {heads} heads");
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * dm];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qd[i * dm + off..i * dm + off + dh];
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    p[j] = dot(qi, &kd[j * dm + off..j * dm + off + dh]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * dm + off..i * dm + off + dh];
                for j in 0..m {
                    let w = p[j];
                    for (oo, vv) in o.iter_mut().zip(&vd[j * dm + off..j * dm + off + dh]) {
                        *oo += w * vv;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::new(&[n, dm], out), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() }
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |g| matmul_bt_acc(gout, val(*b).data(), g, m, n, k));
                acc(*b, &mut |g| matmul_at_acc(val(*a).data(), gout, g, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().0;
                // C = A Bᵀ: dA = G · B, dB = Gᵀ · A
                acc(*a, &mut |g| matmul_acc(gout, val(*b).data(), g, m, n, k));
                acc(*b, &mut |g| matmul_at_acc(gout, val(*a).data(), g, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gout)),
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * db[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * da[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |g| add_into(g, gout));
                let d = val(*r).len();
                acc(*r, &mut |g| {
                    for chunk in gout.chunks(d) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y)),
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_and_grad(x[i]).1;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).len();
                let gm = val(*gamma).data();
                acc(*x, &mut |g| {
                    for (i, r) in rstd.iter().enumerate() {
                        let go = &gout[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dxh: Vec<f64> = go.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
                        for j in 0..d {
                            g[i * d + j] += r * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += go[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for go in gout.chunks(d) {
                        add_into(g, go);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                acc(*x, &mut |g| {
                    for (i, nrm) in norms.iter().enumerate() {
                        let yr = &y[i * d..(i + 1) * d];
                        let go = &gout[i * d..(i + 1) * d];
                        let proj = dot(yr, go);
                        for j in 0..d {
                            g[i * d + j] += (go[j] - yr[j] * proj) / nrm;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.dims2().1;
                acc(*x, &mut |g| {
                    for (i, (yr, go)) in y.chunks(d).zip(gout.chunks(d)).enumerate() {
                        let s = dot(yr, go);
                        for j in 0..d {
                            g[i * d + j] += yr[j] * (go[j] - s);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.dims2().1;
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |g| add_into(g, &gout[off..off + len]));
                    off += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dims2();
                acc(*x, &mut |g| {
                    for i in 0..n {
                        for j in 0..d {
                            g[i * d + j] += gout[j] / n as f64;
                        }
                    }
                });
            }
            Op::MeanInner { x, inner } => {
                acc(*x, &mut |g| {
                    for (c, chunk) in g.chunks_mut(*inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += gout[c] / *inner as f64);
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gout, grads);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let mut gins: Vec<Vec<f64>> = ins.iter().map(|t| vec![0.0; t.len()]).collect();
                rule.backward(&ins, &node.value, gout, &mut gins);
                for (&v, gi) in inputs.iter().zip(&gins) {
                    acc(v, &mut |g| add_into(g, gi));
                }
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
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, dm) = self.value(q).dims2();
        let m = self.value(k).dims2().0;
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; n * dm];
        let mut gk = vec![0.0; m * dm];
        let mut gv = vec![0.0; m * dm];
        let mut ds = vec![0.0; m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let go = &gout[i * dm + off..i * dm + off + dh];
                let mut s = 0.0;
                for j in 0..m {
                    let da = dot(go, &vd[j * dm + off..j * dm + off + dh]);
                    ds[j] = da;
                    s += da * p[j];
                    for (g, o) in gv[j * dm + off..j * dm + off + dh].iter_mut().zip(go) {
                        *g += p[j] * o;
                    }
                }
                for j in 0..m {
                    let dsj = p[j] * (ds[j] - s) * scale;
                    if dsj == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        gq[i * dm + off + t] += dsj * kd[j * dm + off + t];
                        gk[j * dm + off + t] += dsj * qd[i * dm + off + t];
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                let len = g.len();
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
                add_into(slot, &g);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu_and_grad(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Max-shifted softmax of every row (a 1-D tensor is one row).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (_, d) = x.dims2();
    let mut out = x.data().to_vec();
    out.chunks_mut(d).for_each(softmax_in_place);
    Tensor::new(x.shape(), out)
}

/// Scales every row to unit Euclidean norm; returns the normalized rows and
/// the original norms.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (_, d) = x.dims2();
    let mut out = x.data().to_vec();
    let mut norms = Vec::new();
    for (row, chunk) in out.chunks_mut(d).enumerate() {
        let norm = dot(chunk, chunk).sqrt();
        if norm <= NORM_EPS || !norm.is_finite() {
            return Err(Error::ZeroVector { row, norm });
        }
        chunk.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((Tensor::new(x.shape(), out), norms))
}

/// Cosine similarity matrix between the rows of `a` (n×d) and `b` (m×d).
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2();
    let (m, d2) = b.dims2();
    if d != d2 {
        return Err(Error::BadShape(format!("cosine widths {d} vs {d2}")));
    }
    let (an, _) = l2_normalize_rows(a)?;
    let (bn, _) = l2_normalize_rows(b)?;
    let mut out = vec![0.0; n * m];
    matmul_bt_acc(an.data(), bn.data(), &mut out, n, d, m);
    out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(Tensor::new(&[n, m], out))
}
