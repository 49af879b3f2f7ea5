//! Computation tape for reverse-mode differentiation.
//!
//! Operations are recorded in execution order (define-by-run), so every
//! node's inputs precede it and one reverse sweep visits each node exactly
//! once. A tape and its tensors belong to one logical thread; independent
//! tapes can run in parallel.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{BoolTensor, NdArray};
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, eps: f64 },
    Cumsum { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize, mask: Option<BoolTensor> },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Transpose { a: usize, d0: usize, d1: usize },
    Reshape { a: usize },
    Slice { a: usize, axis: usize, start: usize },
    MaskedFill { a: usize, keep: BoolTensor },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Tanh { a: usize },
    Softplus { a: usize },
    ClampMin { a: usize, min: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Neg { .. } => "neg",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Matmul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Cumsum { .. } => "cumsum",
            Op::MeanAxis { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Concat { .. } => "concat",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sqrt { .. } => "sqrt",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Softplus { .. } => "softplus",
            Op::ClampMin { .. } => "clamp_min",
        }
    }

}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// A recording of one forward computation.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Inserts a leaf value. `requires_grad` leaves receive gradients from
    /// `backward`.
    pub fn leaf(&self, value: NdArray, requires_grad: bool) -> Tensor {
        let shape = value.shape().to_vec();
        self.record(shape, value.into_data(), requires_grad, Op::Leaf)
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&self, value: NdArray) -> Tensor {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(NdArray::scalar(value))
    }

    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor {
        // Leaves carry user data as-is; every computed op output is checked.
        debug_assert!(
            matches!(op, Op::Leaf) || data.iter().all(|v| v.is_finite()),
            "{}: produced non-finite output",
            op.name()
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            id,
            shape,
            inner: Rc::clone(&self.inner),
        }
    }

    /// Concatenates tensors along `axis`.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Usage {
                detail: "concat: no inputs".into(),
            });
        }
        for p in parts {
            if !Rc::ptr_eq(&p.inner, &self.inner) {
                return Err(TensorError::Usage {
                    detail: "concat: tensors belong to a different tape".into(),
                });
            }
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut out_shape = parts[0].shape.clone();
        let mut total = 0usize;
        for p in parts {
            if p.shape.len() != rank
                || p.shape[..axis] != out_shape[..axis]
                || p.shape[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        out_shape[axis] = total;
        let inner_sz: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = vec![0.0; kernels::numel(&out_shape)];
        let requires_grad;
        {
            let inner = self.inner.borrow();
            requires_grad = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
            let mut offset = 0usize;
            for p in parts {
                let len = p.shape[axis];
                let src = &inner.nodes[p.id].data;
                for o in 0..outer {
                    let dst_start = (o * total + offset) * inner_sz;
                    let src_start = o * len * inner_sz;
                    data[dst_start..dst_start + len * inner_sz]
                        .copy_from_slice(&src[src_start..src_start + len * inner_sz]);
                }
                offset += len;
            }
        }
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of every `requires_grad`
    /// tensor accumulate additively across repeated calls.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&loss.inner, &self.inner) {
            return Err(TensorError::Usage {
                detail: "backward: loss belongs to a different tape".into(),
            });
        }
        if kernels::numel(&loss.shape) != 1 {
            return Err(TensorError::Usage {
                detail: format!("backward: loss must be scalar, got shape {:?}", loss.shape),
            });
        }
        let loss_id = loss.id;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        {
            let inner = self.inner.borrow();
            if inner.nodes.is_empty() {
                return Err(TensorError::Usage {
                    detail: "backward: tape is empty".into(),
                });
            }
            grads.resize_with(loss_id + 1, || None);
            grads[loss_id] = Some(vec![1.0]);
            for id in (0..=loss_id).rev() {
                if grads[id].is_none() || !inner.nodes[id].requires_grad {
                    continue;
                }
                let g = grads[id].clone().expect("checked");
                propagate(&inner.nodes, id, &g, &mut grads);
            }
        }
        let mut inner = self.inner.borrow_mut();
        for (id, slot) in grads.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &mut inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(buf) => {
                    for (b, v) in buf.iter_mut().zip(&g) {
                        *b += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    match &mut grads[id] {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Routes the output gradient `g` of node `id` to its inputs.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out_shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            backward_binary(nodes, *a, *b, out_shape, g, grads, |g, _, _| (g, g));
        }
        Op::Sub { a, b } => {
            backward_binary(nodes, *a, *b, out_shape, g, grads, |g, _, _| (g, -g));
        }
        Op::Mul { a, b } => {
            backward_binary(nodes, *a, *b, out_shape, g, grads, |g, av, bv| {
                (g * bv, g * av)
            });
        }
        Op::Div { a, b } => {
            backward_binary(nodes, *a, *b, out_shape, g, grads, |g, av, bv| {
                (g / bv, -g * av / (bv * bv))
            });
        }
        Op::Neg { a } => {
            if nodes[*a].requires_grad {
                add_into(grads, *a, g.iter().map(|v| -v).collect());
            }
        }
        Op::AddScalar { a } => {
            if nodes[*a].requires_grad {
                add_into(grads, *a, g.to_vec());
            }
        }
        Op::MulScalar { a, c } => {
            if nodes[*a].requires_grad {
                add_into(grads, *a, g.iter().map(|v| v * c).collect());
            }
        }
        Op::Matmul { a, b } => {
            let na = &nodes[*a];
            let nb = &nodes[*b];
            let mut da = vec![0.0; na.data.len()];
            let mut db = vec![0.0; nb.data.len()];
            kernels::matmul_backward(&na.data, &na.shape, &nb.data, &nb.shape, g, &mut da, &mut db);
            if na.requires_grad {
                add_into(grads, *a, da);
            }
            if nb.requires_grad {
                add_into(grads, *b, db);
            }
        }
        Op::Softmax { a, axis } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let y = &node.data;
            let mut dx = vec![0.0; y.len()];
            kernels::for_each_lane(out_shape, *axis, |start, stride, len| {
                let mut dot = 0.0;
                for t in 0..len {
                    let i = start + t * stride;
                    dot += g[i] * y[i];
                }
                for t in 0..len {
                    let i = start + t * stride;
                    dx[i] = y[i] * (g[i] - dot);
                }
            });
            add_into(grads, *a, dx);
        }
        Op::LayerNorm { a, gain, bias, eps } => {
            backward_layer_norm(nodes, *a, *gain, *bias, *eps, g, grads);
        }
        Op::Cumsum { a, axis } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let mut dx = vec![0.0; node.data.len()];
            kernels::for_each_lane(out_shape, *axis, |start, stride, len| {
                let mut acc = 0.0;
                for t in (0..len).rev() {
                    let i = start + t * stride;
                    acc += g[i];
                    dx[i] = acc;
                }
            });
            add_into(grads, *a, dx);
        }
        Op::MeanAxis { a, axis, mask } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let x_shape = &nodes[*a].shape;
            let len = x_shape[*axis];
            let inner: usize = x_shape[*axis + 1..].iter().product();
            let mut dx = vec![0.0; nodes[*a].data.len()];
            kernels::for_each_lane(x_shape, *axis, |start, stride, lane_len| {
                let o = start / (lane_len * inner.max(1)).max(1);
                let i_post = start % inner.max(1);
                let out_idx = o * inner.max(1) + i_post;
                match mask {
                    None => {
                        let inv = 1.0 / lane_len as f64;
                        for t in 0..lane_len {
                            dx[start + t * stride] = g[out_idx] * inv;
                        }
                    }
                    Some(m) => {
                        let mdata = m.data();
                        let count = (0..lane_len).filter(|&t| mdata[o * len + t]).count() as f64;
                        for t in 0..lane_len {
                            if mdata[o * len + t] {
                                dx[start + t * stride] = g[out_idx] / count;
                            }
                        }
                    }
                }
            });
            add_into(grads, *a, dx);
        }
        Op::SumAxis { a, axis } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let x_shape = &nodes[*a].shape;
            let inner: usize = x_shape[*axis + 1..].iter().product();
            let mut dx = vec![0.0; nodes[*a].data.len()];
            kernels::for_each_lane(x_shape, *axis, |start, stride, lane_len| {
                let o = start / (lane_len * inner.max(1)).max(1);
                let i_post = start % inner.max(1);
                let out_idx = o * inner.max(1) + i_post;
                for t in 0..lane_len {
                    dx[start + t * stride] = g[out_idx];
                }
            });
            add_into(grads, *a, dx);
        }
        Op::SumAll { a } => {
            if nodes[*a].requires_grad {
                add_into(grads, *a, vec![g[0]; nodes[*a].data.len()]);
            }
        }
        Op::Concat { parts, axis } => {
            let total = out_shape[*axis];
            let inner_sz: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let mut offset = 0usize;
            for pid in parts {
                let len = nodes[*pid].shape[*axis];
                if nodes[*pid].requires_grad {
                    let mut dp = vec![0.0; nodes[*pid].data.len()];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner_sz;
                        let dst_start = o * len * inner_sz;
                        dp[dst_start..dst_start + len * inner_sz]
                            .copy_from_slice(&g[src_start..src_start + len * inner_sz]);
                    }
                    add_into(grads, *pid, dp);
                }
                offset += len;
            }
        }
        Op::Transpose { a, d0, d1 } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let (dx, _) = kernels_transpose(g, out_shape, *d0, *d1);
            add_into(grads, *a, dx);
        }
        Op::Reshape { a } => {
            if nodes[*a].requires_grad {
                add_into(grads, *a, g.to_vec());
            }
        }
        Op::Slice { a, axis, start } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let x_shape = &nodes[*a].shape;
            let len = out_shape[*axis];
            let full = x_shape[*axis];
            let inner_sz: usize = x_shape[*axis + 1..].iter().product();
            let outer: usize = x_shape[..*axis].iter().product();
            let mut dx = vec![0.0; nodes[*a].data.len()];
            for o in 0..outer {
                let dst = (o * full + start) * inner_sz;
                let src = o * len * inner_sz;
                dx[dst..dst + len * inner_sz].copy_from_slice(&g[src..src + len * inner_sz]);
            }
            add_into(grads, *a, dx);
        }
        Op::MaskedFill { a, keep } => {
            if !nodes[*a].requires_grad {
                return;
            }
            let kd = keep.data();
            let dx: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, &v)| if kd[i] { v } else { 0.0 })
                .collect();
            add_into(grads, *a, dx);
        }
        Op::Exp { a } => unary(nodes, *a, grads, |i| g[i] * node.data[i]),
        Op::Log { a } => unary(nodes, *a, grads, |i| g[i] / nodes[*a].data[i]),
        Op::Sqrt { a } => unary(nodes, *a, grads, |i| g[i] * 0.5 / node.data[i]),
        Op::Relu { a } => unary(nodes, *a, grads, |i| {
            if nodes[*a].data[i] > 0.0 {
                g[i]
            } else {
                0.0
            }
        }),
        Op::Gelu { a } => unary(nodes, *a, grads, |i| {
            g[i] * kernels::gelu_grad(nodes[*a].data[i])
        }),
        Op::Tanh { a } => unary(nodes, *a, grads, |i| {
            g[i] * (1.0 - node.data[i] * node.data[i])
        }),
        Op::Softplus { a } => unary(nodes, *a, grads, |i| {
            g[i] * kernels::sigmoid(nodes[*a].data[i])
        }),
        Op::ClampMin { a, min } => unary(nodes, *a, grads, |i| {
            if nodes[*a].data[i] > *min {
                g[i]
            } else {
                0.0
            }
        }),
    }
}

fn unary(
    nodes: &[Node],
    a: usize,
    grads: &mut [Option<Vec<f64>>],
    f: impl Fn(usize) -> f64,
) {
    if !nodes[a].requires_grad {
        return;
    }
    let dx: Vec<f64> = (0..nodes[a].data.len()).map(f).collect();
    add_into(grads, a, dx);
}

fn backward_binary(
    nodes: &[Node],
    a: usize,
    b: usize,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    rule: impl Fn(f64, f64, f64) -> (f64, f64),
) {
    let need_a = nodes[a].requires_grad;
    let need_b = nodes[b].requires_grad;
    if !need_a && !need_b {
        return;
    }
    let mut da = vec![0.0; nodes[a].data.len()];
    let mut db = vec![0.0; nodes[b].data.len()];
    let ad = &nodes[a].data;
    let bd = &nodes[b].data;
    kernels::zip_broadcast(out_shape, &nodes[a].shape, &nodes[b].shape, |io, ia, ib| {
        let (ga, gb) = rule(g[io], ad[ia], bd[ib]);
        da[ia] += ga;
        db[ib] += gb;
    });
    if need_a {
        add_into(grads, a, da);
    }
    if need_b {
        add_into(grads, b, db);
    }
}

fn backward_layer_norm(
    nodes: &[Node],
    a: usize,
    gain: usize,
    bias: usize,
    eps: f64,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let x = &nodes[a].data;
    let x_shape = &nodes[a].shape;
    let d = *x_shape.last().expect("validated in forward");
    let rows = x.len() / d;
    let gain_d = &nodes[gain].data;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxh = vec![0.0; d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mu) * rstd;
            dxh[j] = grow[j] * gain_d[j];
            dgain[j] += grow[j] * xhat[j];
            dbias[j] += grow[j];
        }
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = rstd * (dxh[j] - m1 - xhat[j] * m2);
        }
    }
    if nodes[a].requires_grad {
        add_into(grads, a, dx);
    }
    if nodes[gain].requires_grad {
        add_into(grads, gain, dgain);
    }
    if nodes[bias].requires_grad {
        add_into(grads, bias, dbias);
    }
}

/// Swaps two axes of a flat buffer; returns (data, new_shape).
pub(crate) fn kernels_transpose(
    data: &[f64],
    shape: &[usize],
    d0: usize,
    d1: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let in_strides = kernels::strides(shape);
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; shape.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        kernels::unravel(flat, &out_shape, &mut coords);
        coords.swap(d0, d1);
        let mut src = 0;
        for (dim, &c) in coords.iter().enumerate() {
            src += c * in_strides[dim];
        }
        *slot = data[src];
        coords.swap(d0, d1);
    }
    (out, out_shape)
}
