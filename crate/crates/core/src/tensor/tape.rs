//! Wengert-list autodiff.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order: walking it backwards visits every node after all of
//! its consumers.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels;
use super::{numel, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, batch_a: bool, batch_b: bool, batches: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    RowScale { x: usize, w: usize },
    SelectLast { x: usize, index: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Broadcast { a: usize },
    Softmax { a: usize, outer: usize, axis: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { a: usize },
    Tanh { a: usize },
    Concat { parts: Vec<usize>, outer: usize, widths: Vec<usize>, inner: usize },
    Mean { a: usize, outer: usize, axis: usize, inner: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of every grad-requiring leaf, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f32]> {
        self.by_leaf.get(&var.id).map(|v| v.as_slice())
    }

    /// Accumulates the gradient of `var` into `target.grad`.
    pub fn write_to(&self, var: Var<'_>, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Err(TensorError::Contract(format!(
                "no gradient recorded for node {}",
                var.id
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// `constant` that takes ownership, avoiding a copy.
    pub fn constant_owned(&self, mut t: Tensor) -> Var<'_> {
        t.clear_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn node_value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn emit(&self, op_name: &'static str, shape: &[usize], data: Vec<f32>, op: Op, rg: bool) -> Result<Var<'_>> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, rg))
    }

    /// Reverse pass from a scalar `loss`. Intermediate gradients are dropped
    /// on return; only leaf gradients are kept.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, contrib: Vec<f32>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    out.by_leaf.insert(id, g);
                }
                Op::MatMul { a, b, batch_a, batch_b, batches, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; nodes[*a].value.len()];
                        for bi in 0..*batches {
                            let go = &g[bi * m * n..(bi + 1) * m * n];
                            let bs = if *batch_b { &bv[bi * k * n..(bi + 1) * k * n] } else { bv };
                            let gs = if *batch_a { &mut ga[bi * m * k..(bi + 1) * m * k] } else { &mut ga[..] };
                            kernels::gemm_a_bt_acc(go, bs, gs, m, k, n);
                        }
                        send(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; nodes[*b].value.len()];
                        for bi in 0..*batches {
                            let go = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = if *batch_a { &av[bi * m * k..(bi + 1) * m * k] } else { av };
                            let gs = if *batch_b { &mut gb[bi * k * n..(bi + 1) * k * n] } else { &mut gb[..] };
                            kernels::gemm_at_b_acc(as_, go, gs, m, k, n);
                        }
                        send(*b, gb);
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    let la = nodes[*a].value.len();
                    let lb = nodes[*b].value.len();
                    send(*a, reduce_to(&g, la, 1.0));
                    send(*b, reduce_to(&g, lb, sign));
                }
                Op::Mul { a, b } => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    if nodes[*a].requires_grad {
                        let full: Vec<f32> = g.iter().enumerate().map(|(i, gv)| gv * bv[i % bv.len()]).collect();
                        send(*a, reduce_to(&full, av.len(), 1.0));
                    }
                    if nodes[*b].requires_grad {
                        let full: Vec<f32> = g.iter().enumerate().map(|(i, gv)| gv * av[i % av.len()]).collect();
                        send(*b, reduce_to(&full, bv.len(), 1.0));
                    }
                }
                Op::Scale { a, c } => send(*a, g.iter().map(|v| v * c).collect()),
                Op::RowScale { x, w } => {
                    let xv = nodes[*x].value.data();
                    let wv = nodes[*w].value.data();
                    let d = xv.len() / wv.len();
                    if nodes[*x].requires_grad {
                        send(*x, g.iter().enumerate().map(|(i, gv)| gv * wv[i / d]).collect());
                    }
                    if nodes[*w].requires_grad {
                        let gw = (0..wv.len())
                            .map(|r| (0..d).map(|j| g[r * d + j] * xv[r * d + j]).sum())
                            .collect();
                        send(*w, gw);
                    }
                }
                Op::SelectLast { x, index } => {
                    let lx = nodes[*x].value.len();
                    let last = *nodes[*x].value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; lx];
                    for (r, gv) in g.iter().enumerate() {
                        gx[r * last + index] = *gv;
                    }
                    send(*x, gx);
                }
                Op::Permute { a, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (ga, _) = kernels::permute(&g, node.value.shape(), &inv);
                    send(*a, ga);
                }
                Op::Reshape { a } => send(*a, g),
                Op::Broadcast { a } => {
                    let la = nodes[*a].value.len();
                    send(*a, reduce_to(&g, la, 1.0));
                }
                Op::Softmax { a, outer, axis, inner } => {
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis * inner + i;
                            let mut dot = 0.0f32;
                            for j in 0..*axis {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..*axis {
                                let p = base + j * inner;
                                ga[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = nodes[*gain].value.data();
                    let d = gv.len();
                    let rows = xhat.len() / d;
                    if nodes[*x].requires_grad {
                        let mut gx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let row = r * d..(r + 1) * d;
                            let mut mean_dxh = 0.0f32;
                            let mut mean_dxh_xh = 0.0f32;
                            for j in 0..d {
                                let dxh = g[row.start + j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[row.start + j];
                            }
                            mean_dxh /= d as f32;
                            mean_dxh_xh /= d as f32;
                            for j in 0..d {
                                let p = row.start + j;
                                let dxh = g[p] * gv[j];
                                gx[p] = rstd[r] * (dxh - mean_dxh - xhat[p] * mean_dxh_xh);
                            }
                        }
                        send(*x, gx);
                    }
                    if nodes[*gain].requires_grad {
                        let mut gg = vec![0.0; d];
                        for (p, gv) in g.iter().enumerate() {
                            gg[p % d] += gv * xhat[p];
                        }
                        send(*gain, gg);
                    }
                    if nodes[*bias].requires_grad {
                        send(*bias, reduce_to(&g, d, 1.0));
                    }
                }
                Op::Gelu { a } => {
                    let xv = nodes[*a].value.data();
                    send(*a, g.iter().zip(xv).map(|(gv, &x)| gv * kernels::gelu_grad(x)).collect());
                }
                Op::Tanh { a } => {
                    let y = node.value.data();
                    send(*a, g.iter().zip(y).map(|(gv, &t)| gv * (1.0 - t * t)).collect());
                }
                Op::Concat { parts, outer, widths, inner } => {
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&part, &w) in parts.iter().zip(widths) {
                        if nodes[part].requires_grad {
                            let mut gp = Vec::with_capacity(outer * w * inner);
                            for o in 0..*outer {
                                let start = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[start..start + w * inner]);
                            }
                            send(part, gp);
                        }
                        offset += w;
                    }
                }
                Op::Mean { a, outer, axis, inner } => {
                    let mut ga = vec![0.0; outer * axis * inner];
                    let s = 1.0 / *axis as f32;
                    for o in 0..*outer {
                        for j in 0..*axis {
                            for i in 0..*inner {
                                ga[(o * axis + j) * inner + i] = g[o * inner + i] * s;
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum { a } => {
                    let la = nodes[*a].value.len();
                    send(*a, vec![g[0]; la]);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f32;
                    let mut gl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (r, &lab) in labels.iter().enumerate() {
                        gl[r * c + lab] -= scale;
                    }
                    send(*logits, gl);
                }
            }
        }
        Ok(out)
    }
}

/// Sums a gradient over leading broadcast dimensions down to `len` elements.
fn reduce_to(g: &[f32], len: usize, sign: f32) -> Vec<f32> {
    if g.len() == len {
        if sign == 1.0 {
            return g.to_vec();
        }
        return g.iter().map(|v| v * sign).collect();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    if sign != 1.0 {
        out.iter_mut().for_each(|v| *v *= sign);
    }
    out
}

/// Shape of the broadcast result when one operand's shape is a suffix of the other's.
fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long.ends_with(short) {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.node_value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f32> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands recorded on different tapes".into()))
        }
    }

    /// Matrix product over the last two axes; leading batch axes must be
    /// equal, or one operand must be a plain matrix shared across the batch.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (out_shape, data, op) = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch());
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return Err(mismatch());
            }
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let batch_a = !ba.is_empty();
            let batch_b = !bb.is_empty();
            if batch_a && batch_b && ba != bb {
                return Err(mismatch());
            }
            let lead = if batch_a { ba } else { bb };
            let batches = numel(lead);
            let mut out = vec![0.0; batches * m * n];
            for bi in 0..batches {
                let as_ = if batch_a { &a.data()[bi * m * k..(bi + 1) * m * k] } else { a.data() };
                let bs = if batch_b { &b.data()[bi * k * n..(bi + 1) * k * n] } else { b.data() };
                kernels::gemm_acc(as_, bs, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            (shape, out, Op::MatMul { a: self.id, b: other.id, batch_a, batch_b, batches, m, k, n })
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.emit("matmul", &out_shape, data, op, rg)
    }

    fn zip_broadcast(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (shape, data) = {
            let a = self.value();
            let b = other.value();
            let shape = suffix_broadcast(name, a.shape(), b.shape())?;
            let n = numel(&shape);
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
            (shape, data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.emit(name, &shape, data, op, rg)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_broadcast(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_broadcast(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_broadcast(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(&self, c: f32) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.value();
            (a.shape().to_vec(), a.data().iter().map(|v| v * c).collect())
        };
        self.tape.emit("scale", &shape, data, Op::Scale { a: self.id, c }, self.requires_grad())
    }

    /// Multiplies every last-axis row of `self` by the matching scalar in `w`,
    /// where `w.shape == self.shape[..rank-1]`.
    pub fn row_scale(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w)?;
        let (shape, data) = {
            let x = self.value();
            let wv = w.value();
            let sx = x.shape();
            if sx.is_empty() || &sx[..sx.len() - 1] != wv.shape() {
                return Err(TensorError::ShapeMismatch { op: "row_scale", lhs: sx.to_vec(), rhs: wv.shape().to_vec() });
            }
            let d = sx[sx.len() - 1];
            let data = x.data().iter().enumerate().map(|(i, v)| v * wv.data()[i / d]).collect();
            (sx.to_vec(), data)
        };
        let rg = self.requires_grad() || w.requires_grad();
        self.tape.emit("row_scale", &shape, data, Op::RowScale { x: self.id, w: w.id }, rg)
    }

    /// Picks column `index` of the last axis, dropping that axis.
    pub fn select_last(&self, index: usize) -> Result<Var<'t>> {
        let (shape, data) = {
            let x = self.value();
            let sx = x.shape();
            let last = *sx.last().ok_or_else(|| TensorError::Contract("select_last on a scalar".into()))?;
            if index >= last {
                return Err(TensorError::IndexOutOfRange { index, len: last });
            }
            let data = x.data().chunks(last).map(|row| row[index]).collect();
            (sx[..sx.len() - 1].to_vec(), data)
        };
        self.tape.emit("select_last", &shape, data, Op::SelectLast { x: self.id, index }, self.requires_grad())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = {
            let x = self.value();
            let rank = x.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::InvalidShape { shape: x.shape().to_vec(), reason: format!("bad permutation {perm:?}") });
            }
            let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
            (shape, data)
        };
        self.tape.emit("permute", &shape, data, Op::Permute { a: self.id, perm: perm.to_vec() }, self.requires_grad())
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(TensorError::InvalidShape { shape: self.shape(), reason: "transpose needs rank >= 2".into() });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let data = {
            let x = self.value();
            if numel(shape) != x.len() {
                return Err(TensorError::ShapeMismatch { op: "reshape", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
            }
            x.data().to_vec()
        };
        self.tape.emit("reshape", shape, data, Op::Reshape { a: self.id }, self.requires_grad())
    }

    /// Repeats `self` over new leading axes `lead`.
    pub fn broadcast_leading(&self, lead: &[usize]) -> Result<Var<'t>> {
        let (shape, data) = {
            let x = self.value();
            let reps = numel(lead);
            let mut shape = lead.to_vec();
            shape.extend_from_slice(x.shape());
            let mut data = Vec::with_capacity(reps * x.len());
            for _ in 0..reps {
                data.extend_from_slice(x.data());
            }
            (shape, data)
        };
        self.tape.emit("broadcast", &shape, data, Op::Broadcast { a: self.id }, self.requires_grad())
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, data, outer, len, inner) = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(TensorError::IndexOutOfRange { index: axis, len: x.rank() });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mx = (0..len).map(|j| xd[base + j * inner]).fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f32;
                    for j in 0..len {
                        let e = (xd[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] /= sum;
                    }
                }
            }
            (x.shape().to_vec(), out, outer, len, inner)
        };
        self.tape.emit("softmax", &shape, data, Op::Softmax { a: self.id, outer, axis: len, inner }, self.requires_grad())
    }

    /// Layer normalisation over the last axis with learned `gain` and `bias` of width `d`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f32) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (shape, data, xhat, rstd) = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let d = *x.shape().last().unwrap_or(&1);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: x.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let rows = x.len() / d;
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (x.shape().to_vec(), out, xhat, rstd)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd };
        self.tape.emit("layer_norm", &shape, data, op, rg)
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        let (shape, data) = {
            let x = self.value();
            (x.shape().to_vec(), x.data().iter().map(|&v| kernels::gelu(v)).collect())
        };
        self.tape.emit("gelu", &shape, data, Op::Gelu { a: self.id }, self.requires_grad())
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let (shape, data) = {
            let x = self.value();
            (x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())
        };
        self.tape.emit("tanh", &shape, data, Op::Tanh { a: self.id }, self.requires_grad())
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (shape, data, outer, widths, inner) = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(TensorError::IndexOutOfRange { index: axis, len: s0.len() });
            }
            for v in &vals {
                let s = v.shape();
                if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                    return Err(TensorError::ShapeMismatch { op: "concat", lhs: s0.clone(), rhs: s.to_vec() });
                }
            }
            let outer = numel(&s0[..axis]);
            let inner = numel(&s0[axis + 1..]);
            let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
            for o in 0..outer {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
                }
            }
            let mut shape = s0;
            shape[axis] = widths.iter().sum();
            (shape, data, outer, widths, inner)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat { parts: parts.iter().map(|p| p.id).collect(), outer, widths, inner };
        tape.emit("concat", &shape, data, op, rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, data, outer, len, inner) = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(TensorError::IndexOutOfRange { index: axis, len: x.rank() });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * len + j) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f32);
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            (shape, out, outer, len, inner)
        };
        self.tape.emit("mean", &shape, data, Op::Mean { a: self.id, outer, axis: len, inner }, self.requires_grad())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum::<f32>();
        self.tape.emit("sum", &[], vec![s], Op::Sum { a: self.id }, self.requires_grad())
    }

    /// Mean cross-entropy `-log softmax(logits)[label]` over the rows of
    /// `logits` (`[C]` or `[B, C]`).
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let x = self.value();
            let c = *x.shape().last().ok_or_else(|| TensorError::Contract("cross_entropy on a scalar".into()))?;
            let rows = x.len() / c;
            if rows != labels.len() {
                return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: x.shape().to_vec(), rhs: vec![labels.len()] });
            }
            let mut probs = vec![0.0; x.len()];
            let mut loss = 0.0f32;
            for (r, &lab) in labels.iter().enumerate() {
                if lab >= c {
                    return Err(TensorError::IndexOutOfRange { index: lab, len: c });
                }
                let row = &x.data()[r * c..(r + 1) * c];
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + sum.ln();
                for j in 0..c {
                    probs[r * c + j] = (row[j] - lse).exp();
                }
                loss += lse - row[lab];
            }
            (loss / labels.len() as f32, probs)
        };
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        self.tape.emit("cross_entropy", &[], vec![loss], op, self.requires_grad())
    }
}
