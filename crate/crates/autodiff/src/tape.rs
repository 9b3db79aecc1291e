//! Append-only computation tape and the differentiable primitives recorded on it.
//!
//! Every operation evaluates eagerly, appends a node holding its output value,
//! and remembers its inputs. Node inputs always precede the node itself, so a
//! single reverse sweep over the tape visits each node once in a valid order.

use crate::error::{Result, TensorError};
use crate::kernel::{axis_extents, gemm, permute};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are plain indices; using a handle with a tape other than the one
/// that produced it is a logic error.
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleGrad(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records differentiable operations for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b == [1] || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
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

    /// Records a trainable leaf that will receive a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a constant; constants never accumulate gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
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

    /// Accumulated gradient of a leaf. Trainable leaves that were not reached
    /// by any backward pass report zeros; constants report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            node.grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())),
        )
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("primitive produced a consistent shape");
        self.push(value, requires_grad, op)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let shape = value.shape().to_vec();
        let data = value.data().iter().map(|&v| f(v)).collect();
        self.record(shape, data, &[x], op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % nb]))
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.record(shape, data, &[a, b], op))
    }

    /// Elementwise sum. `b` may broadcast over the leading axes of `a` when
    /// its shape is a suffix of `a`'s shape, or when it is a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v, Op::ScaleGrad(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was in range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        Ok(self.record(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product of `[g×m×k]` with `[g×k×n]`, or with `[g×n×k]`
    /// transposed per batch when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.record(vec![g, m, n], out, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    /// Softmax along `axis`, with the running maximum subtracted first.
    /// Entries equal to `-inf` receive exactly zero weight; a slice that is
    /// entirely `-inf` maps to zeros.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x);
        let shape = value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.record(shape, out, &[x], Op::Softmax { x, axis }))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance, then applies `gain` and `bias` (both shaped like that axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self.value(x);
        let shape = value.shape().to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = value.len() / d;
        let mut xhat = vec![0.0; value.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; value.len()];
        for r in 0..rows {
            let row = &value.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.record(shape, out, &[x, gain, bias], op))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.record(shape, out, inputs, op))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.record(vec![1], vec![m], &[x], Op::Mean(x))
    }

    /// Copies `x` so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let out = permute(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        Ok(self.record(out_shape, out, &[x], op))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a matrix, got shape {:?}", self.shape(x)),
            });
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let data = value.into_data();
        Ok(self.record(shape.to_vec(), data, &[x], Op::Reshape(x)))
    }

    /// Copies the half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} invalid for axis of length {}", shape[axis]),
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.record(out_shape, out, &[x], Op::Slice { x, axis, start }))
    }

    /// Gathers rows (slices along axis 0) of `table` by index; repeated
    /// indices accumulate gradient.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                reason: "no indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                reason: format!("index {bad} out of range for {} rows", shape[0]),
            });
        }
        let row = numel(&shape[1..]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.record(out_shape, out, &[table], op))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1] {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), g)
                                .expect("gradient matches value shape"),
                        )
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let nb = gb.len();
                    g.iter().enumerate().for_each(|(i, y)| gb[i % nb] += sign * y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = bv.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut()
                        .enumerate()
                        .for_each(|(i, x)| *x += g[i] * bv[i % nb]);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    g.iter()
                        .enumerate()
                        .for_each(|(i, y)| gb[i % nb] += y * av[i]);
                }
            }
            Op::Scale(x, c) | Op::ScaleGrad(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += c * y);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (batches, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let (sza, szb, szc) = (m * k, k * n, m * n);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..batches {
                        let gi = &g[i * szc..(i + 1) * szc];
                        let bi = &bv[i * szb..(i + 1) * szb];
                        // dA = G·Bᵀ, or G·B when B was used transposed.
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * sza..(i + 1) * sza], true);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..batches {
                        let gi = &g[i * szc..(i + 1) * szc];
                        let ai = &av[i * sza..(i + 1) * sza];
                        let dst = &mut gb[i * szb..(i + 1) * szb];
                        if *trans_b {
                            // d(Bᵀ) = Aᵀ·G, so dB = Gᵀ·A.
                            gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if out[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Log(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| out[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let rows = g.len() / d;
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (i, y) in g.iter().enumerate() {
                        gg[i % d] += y * xhat[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = nodes[v.0].value.shape()[*axis] * inner;
                        if let Some(gv) = slot(nodes, grads, v) {
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[offset..offset + chunk])
                                .for_each(|(a, y)| *a += y);
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let scale = match node.op {
                    Op::Mean(_) => 1.0 / nodes[x.0].value.len() as f64,
                    _ => 1.0,
                };
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] * scale);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute(g, node.value.shape(), &inverse);
                    gx.iter_mut().zip(back).for_each(|(a, y)| *a += y);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, len, inner) = axis_extents(in_shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        gx[dst..dst + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let row = numel(&node.value.shape()[1..]);
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        gt[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
