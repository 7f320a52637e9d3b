//! Reverse-mode differentiation over a recorded tape of array primitives.
//!
//! A [`Graph`] records every primitive as a node; [`Var`] is an index into
//! it. Forward values are computed eagerly. [`Graph::backward`] replays the
//! tape in reverse from a scalar node and returns the adjoint of every node
//! that depends on a differentiable leaf.

use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Recip,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Offset { x: Var },
    Unary { kind: Unary, x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Transpose { x: Var },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    precision: Precision,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<Array> {
        self.grads[v.0].as_ref().map(|g| {
            let mut data = g.clone();
            self.precision.round_slice(&mut data);
            Array::from_parts(self.shapes[v.0].clone(), data, self.precision)
        })
    }

    /// Gradient for `v`, with exact zeros when it is unreachable from the loss.
    pub fn get_or_zero(&self, v: Var) -> Array {
        self.get(v).unwrap_or_else(|| {
            Array::zeros(self.shapes[v.0].clone()).with_precision(self.precision)
        })
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat offset into an input of `in_shape`
/// broadcast up to `out_shape`.
fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        let oi = i + rank - in_shape.len();
        strides[oi] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

enum Layout {
    Same,
    Offsets(Vec<usize>),
}

fn layout(in_shape: &[usize], out_shape: &[usize]) -> Layout {
    if in_shape == out_shape {
        Layout::Same
    } else {
        Layout::Offsets(broadcast_offsets(in_shape, out_shape))
    }
}

impl Layout {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Offsets(o) => o[i],
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_at_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push_leaf(&mut self, value: Array, needs_grad: bool) -> Result<Var> {
        let value = value.with_precision(self.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        self.precision.round_slice(&mut data);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Array::from_parts(shape, data, self.precision),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (k2, n) = self.check_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.emit("matmul", vec![m, n], out, Op::MatMul { a, b, transpose_b: false }, &[a, b])
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul_t", a)?;
        let (n, k2) = self.check_matrix("matmul_t", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.emit("matmul_t", vec![m, n], out, Op::MatMul { a, b, transpose_b: true }, &[a, b])
    }

    fn binary(&mut self, name: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let la = layout(&sa, &out_shape);
        let lb = layout(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = (0..n).map(|i| f(va[la.at(i)], vb[lb.at(i)])).collect();
        self.emit(name, out_shape, out, Op::Binary { kind, a, b }, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale", shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.emit("offset", shape, out, Op::Offset { x }, &[x])
    }

    fn unary(&mut self, name: &'static str, kind: Unary, x: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
            Unary::Recip => |v| 1.0 / v,
            Unary::Gelu => gelu,
        };
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(name, shape, out, Op::Unary { kind, x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", Unary::Log, x)
    }

    /// Absolute value; the gradient at exactly zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", Unary::Sqrt, x)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary("recip", Unary::Recip, x)
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", Unary::Gelu, x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = a.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = a.shape().to_vec();
        self.emit("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = a.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = a.shape().to_vec();
        self.emit("log_softmax", shape, out, Op::LogSoftmax { x }, &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = a.data().to_vec();
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstds.push(rstd);
        }
        let shape = a.shape().to_vec();
        self.emit("layer_norm", shape, out, Op::LayerNorm { x, rstd: rstds }, &[x])
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let a = self.value(x);
        let shape = a.shape().to_vec();
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = a.data().iter().sum();
                let n = a.len().max(1) as f64;
                (vec![1], vec![if mean { s / n } else { s }])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: shape,
                        rhs: vec![ax],
                    });
                }
                let (outer, len, inner) = axis_split(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                let d = a.data();
                for o in 0..outer {
                    for k in 0..len {
                        let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut s = shape.clone();
                s[ax] = 1;
                (s, out)
            }
        };
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        self.emit(name, out_shape, out, op, &[x])
    }

    /// Sum over one axis (kept with extent 1), or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.emit("concat", out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.emit("slice", out_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != from.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).data().to_vec();
        self.emit("reshape", shape.to_vec(), out, Op::Reshape { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("transpose", x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.emit("transpose", vec![n, m], out, Op::Transpose { x }, &[x])
    }

    /// Replays the tape backward from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Nodes that do not depend on a differentiable leaf carry no adjoint.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            precision: self.precision,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                if !transpose_b {
                    let n = vb.shape()[1];
                    if self.wants(*a) {
                        // dA = G B^T
                        accumulate(&mut grads[a.0], m * k, |buf| matmul_bt_into(g, vb.data(), m, n, k, buf));
                    }
                    if self.wants(*b) {
                        // dB = A^T G
                        accumulate(&mut grads[b.0], k * n, |buf| matmul_at_into(va.data(), g, m, k, n, buf));
                    }
                } else {
                    let n = vb.shape()[0];
                    if self.wants(*a) {
                        // dA = G B
                        accumulate(&mut grads[a.0], m * k, |buf| matmul_into(g, vb.data(), m, n, k, buf));
                    }
                    if self.wants(*b) {
                        // dB = G^T A
                        accumulate(&mut grads[b.0], n * k, |buf| matmul_at_into(g, va.data(), m, n, k, buf));
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let la = layout(va.shape(), out_shape);
                let lb = layout(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], da.len(), |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add | Binary::Sub => 1.0,
                                Binary::Mul => db[lb.at(i)],
                                Binary::Div => 1.0 / db[lb.at(i)],
                            };
                            buf[la.at(i)] += gi * d;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], db.len(), |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add => 1.0,
                                Binary::Sub => -1.0,
                                Binary::Mul => da[la.at(i)],
                                Binary::Div => {
                                    let bv = db[lb.at(i)];
                                    -da[la.at(i)] / (bv * bv)
                                }
                            };
                            buf[lb.at(i)] += gi * d;
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi * factor)
                });
            }
            Op::Offset { x } | Op::Reshape { x } => {
                accumulate(&mut grads[x.0], g.len(), |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi));
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Abs => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xv[i],
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Recip => -y[i] * y[i],
                            Unary::Gelu => gelu_grad(xv[i]),
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Softmax { x } => {
                let cols = node.value.cols();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for r in 0..node.value.rows() {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for c in s {
                            buf[c] += y[c] * (g[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let cols = node.value.cols();
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for r in 0..node.value.rows() {
                        let s = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[s.clone()].iter().sum();
                        for c in s {
                            buf[c] += g[c] - y[c].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let cols = node.value.cols();
                let n = cols as f64;
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let s = r * cols..(r + 1) * cols;
                        let gmean: f64 = g[s.clone()].iter().sum::<f64>() / n;
                        let gymean: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in s {
                            buf[c] += rs * (g[c] - gmean - y[c] * gymean);
                        }
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let xs = self.shape(*x).to_vec();
                let total: usize = xs.iter().product();
                accumulate(&mut grads[x.0], total, |buf| match axis {
                    None => {
                        let v = if is_mean { g[0] / total.max(1) as f64 } else { g[0] };
                        buf.iter_mut().for_each(|b| *b += v);
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(&xs, *ax);
                        let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..len {
                                let dst = &mut buf[(o * len + k) * inner..(o * len + k + 1) * inner];
                                for (d, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += gi * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut cursor = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], outer * len * inner, |buf| {
                            for o in 0..outer {
                                let src = &g[(o * total + cursor) * inner..(o * total + cursor + len) * inner];
                                for (d, s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    cursor += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, full, inner) = axis_split(&xs, *axis);
                let len = node.value.shape()[*axis];
                accumulate(&mut grads[x.0], outer * full * inner, |buf| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        for (d, s) in buf[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                accumulate(&mut grads[x.0], m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph {
        Graph::new(Precision::F64)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = g64();
        let x = g.constant(Array::row(&[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = g64();
        let x = g.constant(Array::row(&[2.5; 6])).unwrap();
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let mut g = g64();
        let i3 = g.constant(Array::identity(3)).unwrap();
        let a = Array::new(vec![3, 2], vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let y = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(y).data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = g64();
        let a = g.constant(Array::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Array::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = g64();
        let x = g.constant(Array::row(&[0.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = g64();
        let p = g.param(Array::row(&[1.0, 2.0])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let mut g = g64();
        let p = g.param(Array::row(&[1.0, 2.0])).unwrap();
        let q = g.param(Array::row(&[3.0])).unwrap();
        let loss = g.sum(q, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get_or_zero(p).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = g64();
        let p = g.param(Array::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = g64();
        let a = g.constant(Array::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap()).unwrap();
        let b = g.constant(Array::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap()).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        let back = g.slice(c, 0, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let tail = g.slice(c, 0, 2, 1).unwrap();
        assert_eq!(g.value(tail).data(), g.value(b).data());
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut g = g64();
        let m = g.constant(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let r = g.constant(Array::row(&[10.0, 20.0])).unwrap();
        let c = g.constant(Array::new(vec![2, 1], vec![100.0, 200.0]).unwrap()).unwrap();
        let s = g.add(m, r).unwrap();
        let s = g.add(s, c).unwrap();
        assert_eq!(g.value(s).data(), &[111.0, 122.0, 213.0, 224.0]);
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(Array::row(&[0.1])).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let v = g.value(y).data()[0];
        assert_eq!(v, v as f32 as f64);
        assert_eq!(g.value(y).precision(), Precision::F32);
    }
}
