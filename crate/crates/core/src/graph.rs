//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! enough context to run its backward rule. [`Graph::backward`] consumes the
//! tape, walks it in exact reverse execution order and returns the gradients
//! of every leaf that requires them. One graph is built per forward pass.

use crate::error::{Error, Result};
use crate::tensor::{vecops, Tensor};

/// Additive mask value for disallowed attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Softplus(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    SoftmaxRows(Var),
    CausalMask(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Select { x: Var, index: usize },
    Stack(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    /// Finite-value checks are on whenever debug assertions are compiled in.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that may receive a gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, node, rg, op)
    }

    fn map(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, node: Op) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, node, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + c, Op::AddConst(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = vecops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    /// Normalises each slice along the last axis by its root mean square,
    /// then scales elementwise by `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(weight) != [d] {
            return Err(Error::shape(
                "rms_norm",
                format!("weight {:?} does not match last axis {d}", self.shape(weight)),
            ));
        }
        let vx = self.value(x);
        let w = self.value(weight).data();
        let rows = vx.rows();
        let mut data = Vec::with_capacity(vx.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(w).map(|(v, wv)| v * inv * wv));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, weight]);
        self.push(out, Op::RmsNorm { x, w: weight, inv_rms }, rg, "rms_norm")
    }

    /// Softmax along the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    /// Adds [`MASK_VALUE`] above the diagonal of a square score matrix.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("causal_mask")?;
        if m != n {
            return Err(Error::shape("causal_mask", format!("non-square [{m}, {n}]")));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                data[i * n + j] += MASK_VALUE;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::CausalMask(x), rg, "causal_mask")
    }

    /// Row gather from an embedding table `[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} outside table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, d) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).dims2("concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Concatenates matrices along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (t, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2("concat_cols")?;
            if r != t {
                return Err(Error::shape("concat_cols", format!("height {r} vs {t}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(t, total, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Row `i` of a matrix as a vector of shape `[d]`.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (_, c) = self.value(x).dims2("row")?;
        let r = self.slice_rows(x, i, 1)?;
        self.reshape(r, vec![c])
    }

    /// A single element (by flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let vx = self.value(x);
        if index >= vx.len() {
            return Err(Error::shape("select", format!("index {index} of {}", vx.len())));
        }
        let out = Tensor::scalar(vx.data()[index]);
        let rg = self.rg(&[x]);
        self.push(out, Op::Select { x, index }, rg, "select")
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for s in scalars {
            let v = self.value(*s);
            if v.len() != 1 {
                return Err(Error::shape("stack", format!("non-scalar input {:?}", v.shape())));
            }
            data.push(v.item());
        }
        let out = Tensor::vector(data)?;
        let rg = self.rg(scalars);
        self.push(out, Op::Stack(scalars.to_vec()), rg, "stack")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Cosine similarity of two equally shaped tensors, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_sim", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let na = vecops::norm(va);
        let nb = vecops::norm(vb);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::degenerate("cosine_sim", "zero-norm input"));
        }
        let c = vecops::dot(va, vb) / (na * nb);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(c), Op::Cosine { a, b, na, nb }, rg, "cosine_sim")
    }

    /// `ln Σ exp(x)` over all elements, as a scalar.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x).data();
        let (arg, max) = vx
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, v)| if v > bm { (i, v) } else { (bi, bm) });
        // The maximum contributes exactly 1; ln_1p keeps precision when the
        // remaining terms are tiny.
        let rest: f64 = vx
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != arg)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let s = max + rest.ln_1p();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::LogSumExp(x), rg, "logsumexp")
    }

    /// Causal scaled-dot-product attention for a single head.
    /// `q`, `k`, `v` are `[T, dh]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let dh = self.value(q).last_dim();
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = self.causal_mask(scores)?;
        let probs = self.softmax_rows(masked)?;
        self.matmul(probs, v)
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = Sink {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    sink.add(*a, |o| axpy(o, &g, 1.0));
                    sink.add(*b, |o| axpy(o, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    sink.add(*a, |o| axpy(o, &g, 1.0));
                    sink.add(*b, |o| axpy(o, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    sink.add(*a, |o| {
                        for ((o, g), y) in o.iter_mut().zip(&g).zip(vb) {
                            *o += g * y;
                        }
                    });
                    sink.add(*b, |o| {
                        for ((o, g), x) in o.iter_mut().zip(&g).zip(va) {
                            *o += g * x;
                        }
                    });
                }
                Op::Scale(x, c) => sink.add(*x, |o| axpy(o, &g, *c)),
                Op::AddConst(x) | Op::Reshape(x) | Op::CausalMask(x) => sink.add(*x, |o| axpy(o, &g, 1.0)),
                Op::MatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let nn = vb.shape()[1];
                    let (ad, bd) = (va.data(), vb.data());
                    sink.add(*a, |o| {
                        // dA = dC · Bᵀ
                        for r in 0..m {
                            let grow = &g[r * nn..(r + 1) * nn];
                            for p in 0..k {
                                let brow = &bd[p * nn..(p + 1) * nn];
                                o[r * k + p] += vecops::dot(grow, brow);
                            }
                        }
                    });
                    sink.add(*b, |o| {
                        // dB = Aᵀ · dC
                        for r in 0..m {
                            let grow = &g[r * nn..(r + 1) * nn];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                let orow = &mut o[p * nn..(p + 1) * nn];
                                for (ov, gv) in orow.iter_mut().zip(grow) {
                                    *ov += av * gv;
                                }
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (m, nn) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    sink.add(*x, |o| {
                        for r in 0..m {
                            for c in 0..nn {
                                o[r * nn + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Silu(x) => {
                    let vx = nodes[x.0].value.data();
                    sink.add(*x, |o| {
                        for ((o, g), x) in o.iter_mut().zip(&g).zip(vx) {
                            let s = sigmoid(*x);
                            *o += g * (s + x * s * (1.0 - s));
                        }
                    });
                }
                Op::Softplus(x) => {
                    let vx = nodes[x.0].value.data();
                    sink.add(*x, |o| {
                        for ((o, g), x) in o.iter_mut().zip(&g).zip(vx) {
                            *o += g * sigmoid(*x);
                        }
                    });
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let vx = &nodes[x.0].value;
                    let wd = nodes[w.0].value.data();
                    let d = wd.len();
                    let rows = vx.rows();
                    sink.add(*x, |o| {
                        for r in 0..rows {
                            let xr = vx.row(r);
                            let gr = &g[r * d..(r + 1) * d];
                            let inv = inv_rms[r];
                            let gwx: f64 = gr.iter().zip(wd).zip(xr).map(|((g, w), x)| g * w * x).sum();
                            let coef = inv * inv * inv * gwx / d as f64;
                            for j in 0..d {
                                o[r * d + j] += inv * gr[j] * wd[j] - coef * xr[j];
                            }
                        }
                    });
                    sink.add(*w, |o| {
                        for r in 0..rows {
                            let xr = vx.row(r);
                            let gr = &g[r * d..(r + 1) * d];
                            for j in 0..d {
                                o[j] += gr[j] * xr[j] * inv_rms[r];
                            }
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    sink.add(*x, |o| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let dotp = vecops::dot(gr, yr);
                            for j in 0..c {
                                o[r * c + j] += yr[j] * (gr[j] - dotp);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    sink.add(*table, |o| {
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(&mut o[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        sink.add(*p, |o| axpy(o, &g[off..off + len], 1.0));
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (t, total) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut col = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        sink.add(*p, |o| {
                            for r in 0..t {
                                axpy(&mut o[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w], 1.0);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = nodes[x.0].value.shape()[1];
                    sink.add(*x, |o| axpy(&mut o[start * c..start * c + g.len()], &g, 1.0));
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.shape()[1];
                    let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                    sink.add(*x, |o| {
                        for i in 0..r {
                            axpy(&mut o[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len], 1.0);
                        }
                    });
                }
                Op::Select { x, index } => sink.add(*x, |o| o[*index] += g[0]),
                Op::Stack(parts) => {
                    for (j, p) in parts.iter().enumerate() {
                        sink.add(*p, |o| o[0] += g[j]);
                    }
                }
                Op::Sum(x) => sink.add(*x, |o| o.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(x) => {
                    let scale = g[0] / nodes[x.0].value.len() as f64;
                    sink.add(*x, |o| o.iter_mut().for_each(|v| *v += scale));
                }
                Op::Cosine { a, b, na, nb } => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    let c = node.value.item();
                    let inv = 1.0 / (na * nb);
                    // dc/da = b/(|a||b|) - c·a/|a|², symmetric for b
                    sink.add(*a, |o| {
                        for ((o, x), y) in o.iter_mut().zip(va).zip(vb) {
                            *o += g[0] * (y * inv - c * x / (na * na));
                        }
                    });
                    sink.add(*b, |o| {
                        for ((o, x), y) in o.iter_mut().zip(va).zip(vb) {
                            *o += g[0] * (x * inv - c * y / (nb * nb));
                        }
                    });
                }
                Op::LogSumExp(x) => {
                    let vx = nodes[x.0].value.data();
                    let lse = node.value.item();
                    sink.add(*x, |o| {
                        for (o, v) in o.iter_mut().zip(vx) {
                            *o += g[0] * (v - lse).exp();
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf was not reached or does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
