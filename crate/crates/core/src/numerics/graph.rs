//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse scan.

use std::borrow::Cow;

use super::ops::{self, LayerNormCache};
use super::{NumericsError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation record. Leaves may borrow their values for `'a`.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn leaf(&mut self, value: Cow<'a, Tensor>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Frozen leaf: takes part in the forward pass, never accumulates a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn leaf_with(&mut self, t: &'a Tensor, trainable: bool) -> Var {
        self.leaf(Cow::Borrowed(t), trainable)
    }

    /// Copies the value of `v` into a new frozen leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant_owned(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Shape { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        if b.len() != n {
            return Err(NumericsError::Shape {
                op: "add_row",
                detail: format!("bias length {} vs {n} columns", b.len()),
            });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// `a * scale + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * scale + shift);
        self.push("affine", out, Op::Affine(a, scale), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = ops::transpose(self.value(a))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|p| self.value(*p).cols()).ok_or(NumericsError::Shape {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    detail: format!("{:?} does not have {cols} columns", t.shape()),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|p| self.value(*p).rows()).ok_or(NumericsError::Shape {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    detail: format!("{:?} does not have {rows} rows", t.shape()),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if x.shape().len() != 2 || start > end || end > x.cols() {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                detail: format!("{start}..{end} of {:?}", x.shape()),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let out = Tensor::matrix(x.rows(), end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start, end), &[a])
    }

    /// Selects rows by index. The indices are constants of the graph.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::Shape {
                    op: "gather_rows",
                    detail: format!("row {i} out of {rows}"),
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Row-major flatten into a 1×n matrix.
    pub fn flatten(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).len();
        self.reshape(a, vec![1, n])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(ops::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let out = ops::softmax_axis(self.value(a), axis)?;
        self.push("softmax", out, Op::Softmax(a, axis), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar { shape: shape.to_vec() });
        }
        self.backward_from(loss, Tensor::new(shape.to_vec(), vec![1.0])?)
    }

    /// Reverse sweep seeded with an upstream gradient for `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor) -> Result<Gradients, NumericsError> {
        if seed.shape() != self.value(root).shape() {
            return Err(NumericsError::Shape {
                op: "backward",
                detail: format!("seed {:?} vs root {:?}", seed.shape(), self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ops::matmul_nt(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], ops::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*bias) {
                    let b = self.value(*bias);
                    let n = b.len();
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % n] += v;
                    }
                    accumulate(&mut grads[bias.0], Tensor::new(b.shape().to_vec(), gb)?);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let o = self.value(other);
                        let data = g.data().iter().zip(o.data()).map(|(p, q)| p * q).collect();
                        accumulate(&mut grads[this.0], Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.map(|v| v * s));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ops::transpose(g)?);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads[p.0], Tensor::matrix(rows, cols, slice)?);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = (self.value(*p).rows(), self.value(*p).cols());
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        accumulate(&mut grads[p.0], Tensor::matrix(rows, cols, data)?);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start, _end) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let mut full = Tensor::zeros(x.shape());
                    let (cols, width) = (x.cols(), g.cols());
                    let fd = full.data_mut();
                    for i in 0..g.rows() {
                        fd[i * cols + start..i * cols + start + width].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], full);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let mut full = Tensor::zeros(x.shape());
                    let cols = x.cols();
                    let fd = full.data_mut();
                    for (k, &i) in indices.iter().enumerate() {
                        for (dst, src) in fd[i * cols..(i + 1) * cols].iter_mut().zip(g.row(k)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads[a.0], full);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], g.clone().reshaped(shape)?);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], Tensor::full(x.shape(), g.data()[0] / x.len() as f64));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * ops::gelu_grad(*xv)).collect();
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?);
                }
            }
            Op::Softmax(a, axis) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let (m, n) = match y.shape() {
                        [len] => (*len, 1),
                        _ => (y.rows(), y.cols()),
                    };
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0; yd.len()];
                    if *axis == 0 {
                        for j in 0..n {
                            let dot: f64 = (0..m).map(|i| yd[i * n + j] * gd[i * n + j]).sum();
                            for i in 0..m {
                                dx[i * n + j] = yd[i * n + j] * (gd[i * n + j] - dot);
                            }
                        }
                    } else {
                        for i in 0..m {
                            let r = i * n..(i + 1) * n;
                            let dot: f64 = yd[r.clone()].iter().zip(&gd[r.clone()]).map(|(p, q)| p * q).sum();
                            for j in r {
                                dx[j] = yd[j] * (gd[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let xs = self.value(*x);
                let (m, n) = (xs.rows(), xs.cols());
                let h = cache.normalized.data();
                let gd = g.data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * h[i * n + j];
                            db[j] += gd[i * n + j];
                        }
                    }
                    if self.wants(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        accumulate(&mut grads[gain.0], Tensor::new(shape, dg)?);
                    }
                    if self.wants(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads[bias.0], Tensor::new(shape, db)?);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gd[i * n + j] * gain_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[i * n + j];
                        }
                        let is = cache.inv_std[i];
                        for j in 0..n {
                            let dh = gd[i * n + j] * gain_v[j];
                            dx[i * n + j] = is / nf * (nf * dh - sum_dh - h[i * n + j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xs.shape().to_vec(), dx)?);
                }
            }
        }
        Ok(())
    }
}
