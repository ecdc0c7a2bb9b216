use std::borrow::Cow;

use super::kernels::{gelu_grad_scalar, gelu_scalar, gemm, row_log_softmax, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// per-row (mean, 1/std)
        stats: Vec<(f64, f64)>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// consumers and [`Tape::backward`] is a single reverse sweep. Leaves may
/// borrow their tensors (`'a`) so parameters are not copied per forward.
/// A tape is meant to stay on the thread that built it.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Contract(format!(
            "{op}: expected a 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf. `requires_grad = false` makes it a constant that never
    /// receives a gradient buffer.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf, used for model parameters.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` is on a
    /// differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// `x[r×c] + bias[c]`, the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v += s;
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::AddScalar(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_2d("transpose", tx)?;
        let src = tx.data();
        let out = Tensor::from_fn(&[c, r], |i| {
            let (row, col) = (i / r, i % r);
            src[col * c + row]
        });
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Transpose(x), rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(TensorError::Contract(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (d[at(i)] - max).exp();
                    d[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    d[at(i)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Softmax { x, axis }, rg))
    }

    /// Per-row standardisation over the last axis followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != c {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut out = tx.clone();
        let mut stats = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (i, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[i] - mean) * rstd * tg.data()[i] + tb.data()[i];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| gelu_scalar(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Gelu(x), rg)
    }

    /// Embedding lookup: rows `ids` of a table viewed as `[rows × h]`
    /// (leading axes flattened).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() < 2 {
            return Err(TensorError::Contract(format!(
                "gather: table must have rank >= 2, got {:?}",
                tt.shape()
            )));
        }
        let (v, h) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), h], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat: no inputs".into()));
        }
        if axis > 1 {
            return Err(TensorError::Contract(format!("concat: axis {axis} invalid")));
        }
        let first = self.value(parts[0]);
        let (r0, c0) = require_2d("concat", first)?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_2d("concat", t)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(shape_err("concat", first, t));
            }
            total += if axis == 0 { r } else { c };
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![total, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![r0, total], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a 2-D tensor starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_2d("slice", tx)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(TensorError::Contract(format!("slice: axis {axis} invalid"))),
        };
        if start + len > extent {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                size: extent,
            });
        }
        let out = if axis == 0 {
            tx.slice_rows(start, len)
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&tx.row(row)[start..start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Slice { x, axis, start }, rg))
    }

    /// Mean token cross entropy against a label-smoothed target distribution
    /// `(1 - s)·onehot + s/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = require_2d("cross_entropy", tl)?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: smoothing {smoothing} outside [0, 1)"
            )));
        }
        if n == 0 {
            return Err(TensorError::Contract("cross_entropy: no rows".into()));
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut loss = 0.0;
        let off = smoothing / v as f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let logp = row_log_softmax(tl.row(r));
            for (i, lp) in logp.iter().enumerate() {
                let q = off + if i == t { 1.0 - smoothing } else { 0.0 };
                if q > 0.0 {
                    loss -= q * lp;
                }
                probs.push(lp.exp());
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sum(x), rg)
    }

    /// Populate gradients of the scalar `loss` with respect to every node on a
    /// differentiable path. Gradients from repeated uses accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let loss_shape = lv.shape().to_vec();
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            backprop_node(&self.nodes, i, g, lo);
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Apply the backward rule of node `i`, whose output gradient is `g`,
/// accumulating into the operand gradient slots held in `grads` (all operand
/// indices are `< i`).
fn backprop_node(nodes: &[Node<'_>], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if rg(v) {
                    grad_slot(grads, v, g.shape()).add_assign(g);
                }
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if rg(v) {
                    let o = val(other).data();
                    let slot = grad_slot(grads, v, g.shape());
                    for ((s, gi), oi) in slot.data_mut().iter_mut().zip(g.data()).zip(o) {
                        *s += gi * oi;
                    }
                }
            }
        }
        Op::AddRow(x, bias) => {
            if rg(*x) {
                grad_slot(grads, *x, g.shape()).add_assign(g);
            }
            if rg(*bias) {
                let shape = val(*bias).shape().to_vec();
                let slot = grad_slot(grads, *bias, &shape);
                for r in 0..g.rows() {
                    for (s, gi) in slot.data_mut().iter_mut().zip(g.row(r)) {
                        *s += gi;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            if rg(*x) {
                let slot = grad_slot(grads, *x, g.shape());
                for (d, gi) in slot.data_mut().iter_mut().zip(g.data()) {
                    *d += s * gi;
                }
            }
        }
        Op::AddScalar(x) => {
            if rg(*x) {
                grad_slot(grads, *x, g.shape()).add_assign(g);
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            let gm = MatRef::new(g.data(), m, n);
            if rg(*a) {
                let slot = grad_slot(grads, *a, &[m, k]);
                gemm(gm, MatRef::new(tb.data(), k, n).t(), slot.data_mut(), 1.0);
            }
            if rg(*b) {
                let slot = grad_slot(grads, *b, &[k, n]);
                gemm(MatRef::new(ta.data(), m, k).t(), gm, slot.data_mut(), 1.0);
            }
        }
        Op::Transpose(x) => {
            if rg(*x) {
                let (r, c) = (g.shape()[1], g.shape()[0]);
                let slot = grad_slot(grads, *x, &[r, c]);
                let d = slot.data_mut();
                for row in 0..r {
                    for col in 0..c {
                        d[row * c + col] += g.data()[col * r + row];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if rg(*x) {
                let y = &nodes[i].value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let slot = grad_slot(grads, *x, y.shape());
                let d = slot.data_mut();
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] += yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let tx = val(*x);
            let gam = val(*gamma).data();
            let c = tx.cols();
            let rows = tx.rows();
            let xhat_at = |r: usize, k: usize| (tx.row(r)[k] - stats[r].0) * stats[r].1;
            if rg(*gamma) {
                let shape = val(*gamma).shape().to_vec();
                let slot = grad_slot(grads, *gamma, &shape);
                for r in 0..rows {
                    for (k, s) in slot.data_mut().iter_mut().enumerate() {
                        *s += g.row(r)[k] * xhat_at(r, k);
                    }
                }
            }
            if rg(*beta) {
                let shape = val(*beta).shape().to_vec();
                let slot = grad_slot(grads, *beta, &shape);
                for r in 0..rows {
                    for (s, gi) in slot.data_mut().iter_mut().zip(g.row(r)) {
                        *s += gi;
                    }
                }
            }
            if rg(*x) {
                let slot = grad_slot(grads, *x, tx.shape());
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let gr = g.row(r);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for k in 0..c {
                        dxhat[k] = gr[k] * gam[k];
                        mean_d += dxhat[k];
                        mean_dx += dxhat[k] * xhat_at(r, k);
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    let rstd = stats[r].1;
                    for (k, s) in slot.row_mut(r).iter_mut().enumerate() {
                        *s += rstd * (dxhat[k] - mean_d - xhat_at(r, k) * mean_dx);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if rg(*x) {
                let tx = val(*x);
                let slot = grad_slot(grads, *x, g.shape());
                for ((s, gi), xi) in slot.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                    *s += gi * gelu_grad_scalar(*xi);
                }
            }
        }
        Op::Gather { table, ids } => {
            if rg(*table) {
                let shape = val(*table).shape().to_vec();
                let slot = grad_slot(grads, *table, &shape);
                for (r, &id) in ids.iter().enumerate() {
                    for (s, gi) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                        *s += gi;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let shape = val(p).shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                if rg(p) {
                    let slot = grad_slot(grads, p, &shape);
                    if *axis == 0 {
                        let src = &g.data()[offset * c..(offset + r) * c];
                        for (s, gi) in slot.data_mut().iter_mut().zip(src) {
                            *s += gi;
                        }
                    } else {
                        for row in 0..r {
                            let src = &g.row(row)[offset..offset + c];
                            for (s, gi) in slot.row_mut(row).iter_mut().zip(src) {
                                *s += gi;
                            }
                        }
                    }
                }
                offset += if *axis == 0 { r } else { c };
            }
        }
        Op::Slice { x, axis, start } => {
            if rg(*x) {
                let shape = val(*x).shape().to_vec();
                let slot = grad_slot(grads, *x, &shape);
                let c = shape[1];
                if *axis == 0 {
                    let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                    for (s, gi) in dst.iter_mut().zip(g.data()) {
                        *s += gi;
                    }
                } else {
                    let len = g.cols();
                    for row in 0..shape[0] {
                        let dst = &mut slot.row_mut(row)[*start..start + len];
                        for (s, gi) in dst.iter_mut().zip(g.row(row)) {
                            *s += gi;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            probs,
        } => {
            if rg(*logits) {
                let shape = val(*logits).shape().to_vec();
                let (n, v) = (shape[0], shape[1]);
                let scale = g.data()[0] / n as f64;
                let off = smoothing / v as f64;
                let slot = grad_slot(grads, *logits, &shape);
                for (r, &t) in targets.iter().enumerate() {
                    let row = slot.row_mut(r);
                    for (k, s) in row.iter_mut().enumerate() {
                        let q = off + if k == t { 1.0 - smoothing } else { 0.0 };
                        *s += scale * (probs[r * v + k] - q);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if rg(*x) {
                let gv = g.data()[0];
                let shape = val(*x).shape().to_vec();
                let slot = grad_slot(grads, *x, &shape);
                for s in slot.data_mut() {
                    *s += gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    /// Central-difference check of every leaf that requires grad.
    fn check_grads<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let l = f(&mut t, &vs);
            t.value(l).data()[0]
        };
        let h = 1e-5;
        for (which, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
            for k in 0..inputs[which].len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {which}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (va, vi) = (tape.constant(a.clone()), tape.constant(i));
        let c = tape.matmul(va, vi).unwrap();
        assert_eq!(tape.value(c), &a);

        let s = tape.constant(Tensor::from_rows(&[vec![2.0]]));
        let t = tape.constant(Tensor::from_rows(&[vec![3.0]]));
        let st = tape.matmul(s, t).unwrap();
        assert_eq!(tape.value(st).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert!(tape.value(c).max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 5], 0.3));
        let su = tape.softmax(u, 1).unwrap();
        for v in tape.value(su).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 2f64.ln()]]));
        let sx = tape.softmax(x, 1).unwrap();
        let d = tape.value(sx).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);

        let raw = Tensor::from_rows(&[vec![0.1, -2.0, 3.5], vec![1.0, 1.0, -1.0]]);
        let mut shifted = raw.clone();
        for v in shifted.data_mut() {
            *v += 17.25;
        }
        let (a, b) = (tape.constant(raw), tape.constant(shifted));
        let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-15);
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn softmax_axis0_matches_transposed_axis1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let s0 = tape.softmax(vx, 0).unwrap();
        let xt = tape.transpose(vx).unwrap();
        let s1 = tape.softmax(xt, 1).unwrap();
        let back = tape.transpose(s1).unwrap();
        assert!(tape.value(s0).max_abs_diff(tape.value(back)) < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]));
        let y = tape.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let b = tape.constant(Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap());
        let g = tape.constant(Tensor::full(&[3], 1.7));
        let c = tape.constant(Tensor::full(&[1, 3], 4.2));
        let yc = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(yc).max_abs_diff(&Tensor::new(vec![1, 3], vec![0.5, -0.25, 2.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[1, 7]);
        let gamma = rand_tensor(&mut rng, &[7]);
        let beta = rand_tensor(&mut rng, &[7]);
        let eps = 1e-5;
        let mut mean = 0.0;
        for v in x.data() {
            mean += v;
        }
        mean /= 7.0;
        let mut var = 0.0;
        for v in x.data() {
            var += (v - mean) * (v - mean);
        }
        var /= 7.0;
        let expected: Vec<f64> = (0..7)
            .map(|i| (x.data()[i] - mean) / (var + eps).sqrt() * gamma.data()[i] + beta.data()[i])
            .collect();
        let mut tape = Tape::new();
        let (vx, vg, vb) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
        let y = tape.layer_norm(vx, vg, vb, eps).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let v = 7;
        let u = tape.constant(Tensor::full(&[3, v], 0.4));
        for s in [0.0, 0.1] {
            let l = tape.cross_entropy(u, &[0, 3, 6], s).unwrap();
            assert!((tape.value(l).data()[0] - (v as f64).ln()).abs() < 1e-12);
        }
        let peaked = tape.constant(Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]));
        let l = tape.cross_entropy(peaked, &[0], 0.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
        assert!(matches!(
            tape.cross_entropy(peaked, &[3], 0.0),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_tensor(&mut rng, &[2, 4]);
        let targets = [2usize, 0];
        let s = 0.1;
        let mut expected = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (k, v) in row.iter().enumerate() {
                let q = s / 4.0 + if k == t { 1.0 - s } else { 0.0 };
                expected -= q * (v.exp() / z).ln();
            }
        }
        expected /= 2.0;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape.cross_entropy(l, &targets, s).unwrap();
        assert!((tape.value(ce).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_bilinear() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let xv = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let yv = Tensor::new(vec![3, 1], vec![4.0, 0.25, -3.0]).unwrap();
        let x = tape.leaf(xv.clone(), true);
        let y = tape.leaf(yv.clone(), true);
        let d = tape.matmul(x, y).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), yv.data());
        assert_eq!(tape.grad(y).unwrap().data(), xv.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_never_get_grads() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 2], 2.0));
        let x = tape.leaf(Tensor::full(&[1, 2], 3.0), true);
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn accumulation_equals_single_path_rewrite() {
        // loss = sum(w·x + w·y) uses w twice; the rewrite sum(w·(x+y)) uses it once.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, &[2, 3]);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let y = rand_tensor(&mut rng, &[3, 2]);

        let mut t1 = Tape::new();
        let (vw, vx, vy) = (t1.leaf(w.clone(), true), t1.constant(x.clone()), t1.constant(y.clone()));
        let a = t1.matmul(vw, vx).unwrap();
        let b = t1.matmul(vw, vy).unwrap();
        let ab = t1.add(a, b).unwrap();
        let l1 = t1.sum(ab);
        t1.backward(l1).unwrap();

        let mut t2 = Tape::new();
        let (vw2, vx2, vy2) = (t2.leaf(w, true), t2.constant(x), t2.constant(y));
        let xy = t2.add(vx2, vy2).unwrap();
        let c = t2.matmul(vw2, xy).unwrap();
        let l2 = t2.sum(c);
        t2.backward(l2).unwrap();

        assert!(t1.grad(vw).unwrap().max_abs_diff(t2.grad(vw2).unwrap()) < 1e-14);
    }

    #[test]
    fn gradient_check_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        check_grads(vec![a, b, gamma, beta, table, bias], |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap(); // 3x3
            let abt = t.transpose(ab).unwrap();
            let g = t.gelu(abt);
            let ln = t.layer_norm(g, v[2], v[3], 1e-5).unwrap();
            let emb = t.gather(v[4], &[1, 4, 1]).unwrap();
            let m = t.mul(ln, emb).unwrap();
            let r = t.add_row(m, v[5]).unwrap();
            let sm = t.softmax(r, 0).unwrap();
            let cat = t.concat(&[sm, ln], 1).unwrap(); // 3x6
            let sl = t.slice(cat, 1, 1, 4).unwrap(); // 3x4
            let rows = t.concat(&[sl, sl], 0).unwrap(); // 6x4
            let part = t.slice(rows, 0, 2, 3).unwrap();
            let sc = t.scale(part, 1.5);
            let sh = t.add_scalar(sc, -0.3);
            let s2 = t.softmax(sh, 1).unwrap();
            let fin = t.add(s2, sh).unwrap();
            t.cross_entropy(fin, &[0, 3, 2], 0.1).unwrap()
        });
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = rand_tensor(&mut rng, &[4, 4]);
            let mut t = Tape::new();
            let va = t.leaf(a, true);
            let m = t.matmul(va, va).unwrap();
            let s = t.softmax(m, 1).unwrap();
            let l = t.cross_entropy(s, &[0, 1, 2, 3], 0.0).unwrap();
            t.backward(l).unwrap();
            (t.value(s).clone(), t.grad(va).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.bit_eq(&v2) && g1.bit_eq(&g2));
    }
}
