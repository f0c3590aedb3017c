//! Reverse-mode differentiation over an explicit, per-forward-pass tape.
//!
//! Every operation appends a node holding its output value. `backward`
//! replays the nodes in reverse and returns a fresh [`Gradients`] store, so
//! one tape can be differentiated with respect to several roots (the
//! training loss, a single class logit, ...).

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::sparse::SparseMatrix;
use super::Tensor;
use crate::error::{GtpError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivByScalar(Var, Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    Trace(Var),
    FrobNorm(Var),
    L2NormalizeRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize, out_ch: usize },
    GlobalAvgPool { x: Var, batch: usize, ch: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Saved forward intermediates (normalized values, norms, probabilities).
    aux: Vec<f64>,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Ordered record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of one scalar root with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, or zeros of the node's shape when the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GtpError {
    GtpError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true, Vec::new())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false, Vec::new())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var], aux: Vec<f64>) -> Result<Var> {
        if !value.is_finite() {
            return Err(GtpError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad, aux))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b], Vec::new())
    }

    /// Constant sparse operator times `x`.
    pub fn spmm(&mut self, m: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.rows() != m.cols() {
            return Err(GtpError::Shape {
                op: "spmm",
                left: vec![m.rows(), m.cols()],
                right: tx.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let value = Tensor::matrix(m.rows(), n, m.matmul(tx.data(), n))?;
        self.push("spmm", value, Op::SpMM(Arc::clone(m), x), &[x], Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a], Vec::new())
    }

    fn zip_same(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b], Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b], Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b], Vec::new())
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let n = tx.cols();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % n];
        }
        self.push("add_row", value, Op::AddRow(x, row), &[x, row], Vec::new())
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x], Vec::new())
    }

    /// `x / s` for a single-element `s`.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("div_by_scalar", self.value(x), ts));
        }
        let d = ts.data()[0];
        let value = self.value(x).map(|v| v / d);
        self.push("div_by_scalar", value, Op::DivByScalar(x, s), &[x, s], Vec::new())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x], Vec::new())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x), &[x], Vec::new())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push("softmax_rows", value, Op::SoftmaxRows(x), &[x], Vec::new())
    }

    /// Normalizes over the last axis, then applies `gain`/`bias` (both length d).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if d == 0 || tg.len() != d || tb.len() != d {
            return Err(shape_err("layernorm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        xhat.extend(inv);
        self.push("layernorm", value, Op::LayerNorm { x, gain, bias }, &[x, gain, bias], xhat)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| GtpError::invalid("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts, Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| GtpError::invalid("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts, Vec::new())
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(GtpError::invalid(format!(
                "slice_rows {}..{} out of {} rows",
                start,
                start + len,
                t.rows()
            )));
        }
        let c = t.cols();
        let value = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x], Vec::new())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(GtpError::invalid(format!(
                "slice_cols {}..{} out of {} cols",
                start,
                start + len,
                t.cols()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(t.rows(), len, data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x], Vec::new())
    }

    /// Mean over `axis` of a matrix: 0 gives a 1×n row, 1 gives an m×1 column.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(t.row(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                let value = Tensor::matrix(1, n, out)?;
                self.push("mean_rows", value, Op::MeanRows(x), &[x], Vec::new())
            }
            1 => {
                let out = (0..m).map(|r| t.row(r).iter().sum::<f64>() / n as f64).collect();
                let value = Tensor::matrix(m, 1, out)?;
                self.push("mean_cols", value, Op::MeanCols(x), &[x], Vec::new())
            }
            _ => Err(GtpError::invalid(format!("mean over axis {axis} of a matrix"))),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x], Vec::new())
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != t.cols() {
            return Err(shape_err("trace", t, t));
        }
        let value = Tensor::scalar((0..t.rows()).map(|i| t.get(i, i)).sum());
        self.push("trace", value, Op::Trace(x), &[x], Vec::new())
    }

    /// Frobenius norm; its gradient at the origin is taken as zero.
    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.push("frobenius_norm", value, Op::FrobNorm(x), &[x], Vec::new())
    }

    /// Scales every row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.clone();
        let c = t.cols();
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(GtpError::ZeroNorm(r));
            }
            norms.push(norm);
            out.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= norm);
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows(x), &[x], norms)
    }

    /// Mean over rows of `logsumexp(logits[i, k]) - logits[i, targets[i]]`.
    /// With `exclude_diag`, column `i` is left out of row `i`'s sum.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], exclude_diag: bool) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(GtpError::invalid(format!("{} targets for {} rows", targets.len(), m)));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= n || (exclude_diag && target == i) {
                return Err(GtpError::invalid(format!("target {target} invalid for row {i}")));
            }
            let row = t.row(i);
            let keep = |k: usize| !(exclude_diag && k == i);
            let max = (0..n).filter(|&k| keep(k)).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in (0..n).filter(|&k| keep(k)) {
                let e = (row[k] - max).exp();
                probs[i * n + k] = e;
                z += e;
            }
            probs[i * n..(i + 1) * n].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[target];
        }
        let value = Tensor::scalar(total / m as f64);
        self.push(
            "cross_entropy_rows",
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),

            },
            &[logits],
            probs,
        )
    }

    /// Square-kernel convolution of `[B, C, H, W]` by `[O, C, k, k]` plus bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || tb.len() != ws[0] || stride == 0 {
            return Err(shape_err("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        if geom.height + 2 * pad < geom.kernel || geom.width + 2 * pad < geom.kernel {
            return Err(shape_err("conv2d", tx, tw));
        }
        let (batch, out_ch) = (xs[0], ws[0]);
        let (ho, wo) = geom.out_hw();
        let img_len = geom.in_ch * geom.height * geom.width;
        let out_len = out_ch * ho * wo;
        let mut out = vec![0.0; batch * out_len];
        for bi in 0..batch {
            let cols = kernels::im2col(&tx.data()[bi * img_len..(bi + 1) * img_len], &geom);
            let dst = &mut out[bi * out_len..(bi + 1) * out_len];
            for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = tb.data()[o]);
            }
            kernels::matmul_acc(tw.data(), &cols, dst, out_ch, geom.patch_len(), ho * wo);
        }
        let value = Tensor::new(vec![batch, out_ch, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            },
            &[x, w, b],
            Vec::new(),
        )
    }

    /// `[B, C, H, W]` → `[B, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", t, t));
        }
        let (batch, ch, area) = (s[0], s[1], s[2] * s[3]);
        let out = t.data().chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        let value = Tensor::matrix(batch, ch, out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x, batch, ch }, &[x], Vec::new())
    }

    /// Gradient of the single-element node `root` with respect to every
    /// upstream node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(GtpError::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GtpError::NonFinite(op_name(&self.nodes[i].op)));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::SpMM(m, x) => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| m.transpose_matmul_acc(g, n, gx));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    acc(*a, &mut |ga| kernels::matmul_nt_acc(g, tb.data(), ga, m, n, k));
                }
                if needs(*b) {
                    acc(*b, &mut |gb| kernels::matmul_tn_acc(ta.data(), g, gb, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let n = val(*row).len();
                acc(*row, &mut |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % n] += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b));
            }
            Op::DivByScalar(x, s) => {
                let d = val(*s).data()[0];
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b / d));
                let tx = val(*x);
                acc(*s, &mut |gs| {
                    let dot: f64 = g.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    gs[0] -= dot / (d * d);
                });
            }
            Op::Relu(x) => {
                let tx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *a += b * gelu_grad(*v);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let (xhat, inv) = node.aux.split_at(rows * d);
                let tg = val(*gain);
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * tg.data()[c];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * tg.data()[c];
                            gx[r * d + c] += inv[r] * (dh - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    acc(*p, &mut |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = (val(*p).rows(), val(*p).cols());
                    acc(*p, &mut |gp| {
                        for i in 0..r {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                acc(*x, &mut |gx| {
                    gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c] / m as f64;
                        }
                    }
                });
            }
            Op::MeanCols(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[r] / n as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Trace(x) => {
                let n = val(*x).rows();
                acc(*x, &mut |gx| (0..n).for_each(|i| gx[i * n + i] += g[0]));
            }
            Op::FrobNorm(x) => {
                let norm = node.value.data()[0];
                if norm > 0.0 {
                    let tx = val(*x);
                    acc(*x, &mut |gx| {
                        gx.iter_mut().zip(tx.data()).for_each(|(a, v)| *a += g[0] * v / norm)
                    });
                }
            }
            Op::L2NormalizeRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / node.aux[r];
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, .. } => {
                let n = val(*logits).cols();
                let m = targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for k in 0..n {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            gl[i * n + k] += g[0] * (node.aux[i * n + k] - onehot) / m;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            } => {
                let (ho, wo) = geom.out_hw();
                let area = ho * wo;
                let img_len = geom.in_ch * geom.height * geom.width;
                let out_len = out_ch * area;
                let (tx, tw) = (val(*x), val(*w));
                acc(*b, &mut |gb| {
                    for bi in 0..*batch {
                        for o in 0..*out_ch {
                            let s = bi * out_len + o * area;
                            gb[o] += g[s..s + area].iter().sum::<f64>();
                        }
                    }
                });
                let (need_w, need_x) = (needs(*w), needs(*x));
                let mut gw_local = vec![0.0; if need_w { tw.len() } else { 0 }];
                let mut gx_local = vec![0.0; if need_x { tx.len() } else { 0 }];
                for bi in 0..*batch {
                    let gout = &g[bi * out_len..(bi + 1) * out_len];
                    if need_w {
                        let cols = kernels::im2col(&tx.data()[bi * img_len..(bi + 1) * img_len], geom);
                        kernels::matmul_nt_acc(gout, &cols, &mut gw_local, *out_ch, area, geom.patch_len());
                    }
                    if need_x {
                        let mut gcols = vec![0.0; geom.patch_len() * area];
                        kernels::matmul_tn_acc(tw.data(), gout, &mut gcols, geom.patch_len(), *out_ch, area);
                        kernels::col2im_acc(&gcols, geom, &mut gx_local[bi * img_len..(bi + 1) * img_len]);
                    }
                }
                if need_w {
                    acc(*w, &mut |gw| gw.iter_mut().zip(&gw_local).for_each(|(a, b)| *a += b));
                }
                if need_x {
                    acc(*x, &mut |gx| gx.iter_mut().zip(&gx_local).for_each(|(a, b)| *a += b));
                }
            }
            Op::GlobalAvgPool { x, batch, ch } => {
                let area = val(*x).len() / (batch * ch);
                acc(*x, &mut |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i / area] / area as f64;
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::SpMM(..) => "spmm",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::DivByScalar(..) => "div_by_scalar",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layernorm",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::MeanRows(_) => "mean_rows",
        Op::MeanCols(_) => "mean_cols",
        Op::Sum(_) => "sum",
        Op::Trace(_) => "trace",
        Op::FrobNorm(_) => "frobenius_norm",
        Op::L2NormalizeRows(_) => "l2_normalize_rows",
        Op::CrossEntropyRows { .. } => "cross_entropy_rows",
        Op::Conv2d { .. } => "conv2d",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(2));
        let a = tape.leaf(m(2, 2, &[1., 2., 3., 4.]));
        let p = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let r = tape.leaf(m(1, 2, &[1., 2.]));
        let c = tape.leaf(m(2, 1, &[3., 4.]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(GtpError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 2, &[0., 0.]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.leaf(m(1, 1, &[7.]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(1, 3, &[1., 2., 3.]));
        let y = tape.softmax_rows(x).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_forced_values() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.leaf(m(1, 3, &[5., 5., 5.]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.leaf(m(1, 2, &[1., 3.]));
        let y = tape.layernorm(x, g, b).unwrap();
        let v = tape.value(y).data();
        // variance 1 plus eps in the denominator
        let expect = 1.0 / (1.0f64 + LAYERNORM_EPS).sqrt();
        assert!((v[0] + expect).abs() < 1e-12 && (v[1] - expect).abs() < 1e-12);
        assert!((v[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.div_by_scalar(x, z), Err(GtpError::NonFinite(_))));
    }

    #[test]
    fn zero_norm_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(2, 2, &[1., 0., 0., 0.]));
        assert!(matches!(tape.l2_normalize_rows(x), Err(GtpError::ZeroNorm(1))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![3.0]));
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_can_run_twice_on_one_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let a = tape.sum(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let b = tape.sum(sq).unwrap();
        let ga = tape.backward(a).unwrap();
        let gb = tape.backward(b).unwrap();
        assert_eq!(ga.get(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(gb.get(x).unwrap().data(), &[2.0, -4.0]);
    }
}
