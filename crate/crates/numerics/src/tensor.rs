//! Tensor handle API. Each method computes its result eagerly and records
//! the operation on the owning tape so `Tape::backward` can replay it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{BoolTensor, NdArray};
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tape::{kernels_transpose, Op, TapeInner};

/// Handle to one value recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        kernels::numel(&self.shape)
    }

    /// Copies the forward value out of the tape.
    pub fn value(&self) -> NdArray {
        let inner = self.inner.borrow();
        NdArray::new(self.shape.clone(), inner.nodes[self.id].data.clone()).expect("shape matches")
    }

    /// The forward value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.borrow().nodes[self.id].data[0]
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<NdArray> {
        let inner = self.inner.borrow();
        inner.nodes[self.id]
            .grad
            .as_ref()
            .map(|g| NdArray::new(self.shape.clone(), g.clone()).expect("shape matches"))
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().nodes[self.id].requires_grad
    }

    fn same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(TensorError::Usage {
                detail: format!("{op}: operands belong to different tapes"),
            })
        }
    }

    fn record(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op on tensor {} produced non-finite output",
            self.id
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(crate::tape::Node {
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

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        make_op: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(other, name)?;
        let out_shape = kernels::broadcast_shapes(&self.shape, &other.shape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        let mut data = vec![0.0; kernels::numel(&out_shape)];
        let requires_grad;
        {
            let inner = self.inner.borrow();
            let ad = &inner.nodes[self.id].data;
            let bd = &inner.nodes[other.id].data;
            requires_grad =
                inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
            kernels::zip_broadcast(&out_shape, &self.shape, &other.shape, |io, ia, ib| {
                data[io] = f(ad[ia], bd[ib]);
            });
        }
        Ok(self.record(out_shape, data, requires_grad, make_op(self.id, other.id)))
    }

    fn unary(
        &self,
        make_op: impl Fn(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Tensor {
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.data.iter().map(|&v| f(v)).collect(), node.requires_grad)
        };
        self.record(self.shape.clone(), data, requires_grad, make_op(self.id))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| Op::Div { a, b }, |x, y| x / y)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|a| Op::Neg { a }, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|a| Op::AddScalar { a }, |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(|a| Op::MulScalar { a, c }, |x| x * c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|a| Op::Exp { a }, f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(|a| Op::Log { a }, f64::ln)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|a| Op::Sqrt { a }, f64::sqrt)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|a| Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn gelu(&self) -> Tensor {
        self.unary(|a| Op::Gelu { a }, kernels::gelu)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|a| Op::Tanh { a }, f64::tanh)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(|a| Op::Softplus { a }, kernels::softplus)
    }

    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(|a| Op::ClampMin { a, min }, |x| x.max(min))
    }

    /// Batched matrix product; leading dimensions broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul")?;
        let (data, out_shape, requires_grad) = {
            let inner = self.inner.borrow();
            let (data, out_shape) = kernels::matmul(
                &inner.nodes[self.id].data,
                &self.shape,
                &inner.nodes[other.id].data,
                &other.shape,
            )?;
            let rg = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
            (data, out_shape, rg)
        };
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Numerically stable softmax along `axis`. Rejects non-finite input
    /// (NaN would otherwise poison the whole row silently).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.shape.len(),
            });
        }
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            if let Some(pos) = x.iter().position(|v| v.is_nan()) {
                return Err(TensorError::NonFinite {
                    op: "softmax",
                    detail: format!("NaN at flat index {pos}"),
                });
            }
            let mut out = vec![0.0; x.len()];
            kernels::for_each_lane(&self.shape, axis, |start, stride, len| {
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    max = max.max(x[start + t * stride]);
                }
                let mut denom = 0.0;
                for t in 0..len {
                    let e = (x[start + t * stride] - max).exp();
                    out[start + t * stride] = e;
                    denom += e;
                }
                for t in 0..len {
                    out[start + t * stride] /= denom;
                }
            });
            (out, inner.nodes[self.id].requires_grad)
        };
        Ok(self.record(
            self.shape.clone(),
            data,
            requires_grad,
            Op::Softmax { a: self.id, axis },
        ))
    }

    /// Normalizes over the last (feature) axis, then applies `gain` and
    /// `bias` (both shaped `[feature]`).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(gain, "layer_norm")?;
        self.same_tape(bias, "layer_norm")?;
        let d = *self.shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                detail: format!("feature axis of size 0 in shape {:?}", self.shape),
            });
        }
        if gain.shape != [d] || bias.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Usage {
                detail: format!("layer_norm: eps must be positive, got {eps}"),
            });
        }
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let gd = &inner.nodes[gain.id].data;
            let bd = &inner.nodes[bias.id].data;
            let rows = x.len() / d;
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
                }
            }
            let rg = inner.nodes[self.id].requires_grad
                || inner.nodes[gain.id].requires_grad
                || inner.nodes[bias.id].requires_grad;
            (out, rg)
        };
        Ok(self.record(
            self.shape.clone(),
            data,
            requires_grad,
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        ))
    }

    /// Running prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "cumsum",
                axis,
                rank: self.shape.len(),
            });
        }
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; x.len()];
            kernels::for_each_lane(&self.shape, axis, |start, stride, len| {
                let mut acc = 0.0;
                for t in 0..len {
                    acc += x[start + t * stride];
                    out[start + t * stride] = acc;
                }
            });
            (out, inner.nodes[self.id].requires_grad)
        };
        Ok(self.record(
            self.shape.clone(),
            data,
            requires_grad,
            Op::Cumsum { a: self.id, axis },
        ))
    }

    /// Mean along `axis`. With a mask (shaped like `self.shape[..=axis]`),
    /// masked entries contribute to neither numerator nor denominator.
    pub fn mean_axis(&self, axis: usize, mask: Option<&BoolTensor>) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "mean",
                axis,
                rank: self.shape.len(),
            });
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(TensorError::DegenerateInput {
                op: "mean",
                detail: "reduction axis has size 0".into(),
            });
        }
        if let Some(m) = mask {
            if m.shape() != &self.shape[..=axis] {
                return Err(TensorError::ShapeMismatch {
                    op: "mean",
                    lhs: self.shape.clone(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; kernels::numel(&out_shape)];
            let mut degenerate: Option<usize> = None;
            kernels::for_each_lane(&self.shape, axis, |start, stride, lane_len| {
                let o = start / (lane_len * inner_sz.max(1)).max(1);
                let i_post = start % inner_sz.max(1);
                let out_idx = o * inner_sz.max(1) + i_post;
                match mask {
                    None => {
                        let mut acc = 0.0;
                        for t in 0..lane_len {
                            acc += x[start + t * stride];
                        }
                        out[out_idx] = acc / lane_len as f64;
                    }
                    Some(m) => {
                        let md = m.data();
                        let mut acc = 0.0;
                        let mut count = 0usize;
                        for t in 0..lane_len {
                            if md[o * len + t] {
                                acc += x[start + t * stride];
                                count += 1;
                            }
                        }
                        if count == 0 {
                            degenerate = Some(o);
                        } else {
                            out[out_idx] = acc / count as f64;
                        }
                    }
                }
            });
            if let Some(o) = degenerate {
                return Err(TensorError::DegenerateInput {
                    op: "mean",
                    detail: format!("slice {o} is fully masked"),
                });
            }
            (out, inner.nodes[self.id].requires_grad)
        };
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::MeanAxis {
                a: self.id,
                axis,
                mask: mask.cloned(),
            },
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: self.shape.len(),
            });
        }
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; kernels::numel(&out_shape)];
            kernels::for_each_lane(&self.shape, axis, |start, stride, lane_len| {
                let o = start / (lane_len * inner_sz.max(1)).max(1);
                let i_post = start % inner_sz.max(1);
                let mut acc = 0.0;
                for t in 0..lane_len {
                    acc += x[start + t * stride];
                }
                out[o * inner_sz.max(1) + i_post] = acc;
            });
            (out, inner.nodes[self.id].requires_grad)
        };
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::SumAxis { a: self.id, axis },
        ))
    }

    /// Sums every element into a scalar (rank-0) tensor.
    pub fn sum_all(&self) -> Tensor {
        let (total, requires_grad) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.data.iter().sum::<f64>(), node.requires_grad)
        };
        self.record(vec![], vec![total], requires_grad, Op::SumAll { a: self.id })
    }

    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: d0.max(d1),
                rank,
            });
        }
        let (data, out_shape, requires_grad) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[self.id];
            let (data, out_shape) = kernels_transpose(&node.data, &self.shape, d0, d1);
            (data, out_shape, node.requires_grad)
        };
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::Transpose {
                a: self.id,
                d0,
                d1,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(shape) != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                detail: format!("cannot reshape {:?} to {:?}", self.shape, shape),
            });
        }
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.data.clone(), node.requires_grad)
        };
        Ok(self.record(shape.to_vec(), data, requires_grad, Op::Reshape { a: self.id }))
    }

    /// Narrows `axis` to `[start, start + len)`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: self.shape.len(),
            });
        }
        if start + len > self.shape[axis] {
            return Err(TensorError::Dimension {
                op: "slice",
                detail: format!(
                    "range {}..{} exceeds axis {} of size {}",
                    start,
                    start + len,
                    axis,
                    self.shape[axis]
                ),
            });
        }
        let full = self.shape[axis];
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let mut out = vec![0.0; kernels::numel(&out_shape)];
            for o in 0..outer {
                let src = (o * full + start) * inner_sz;
                let dst = o * len * inner_sz;
                out[dst..dst + len * inner_sz].copy_from_slice(&x[src..src + len * inner_sz]);
            }
            (out, inner.nodes[self.id].requires_grad)
        };
        Ok(self.record(
            out_shape,
            data,
            requires_grad,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        ))
    }

    /// Replaces entries where `keep` is false with `fill`. Gradients flow
    /// only through kept entries.
    pub fn masked_fill(&self, keep: &BoolTensor, fill: f64) -> Result<Tensor> {
        if keep.shape() != self.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape.clone(),
                rhs: keep.shape().to_vec(),
            });
        }
        let (data, requires_grad) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[self.id];
            let kd = keep.data();
            let out: Vec<f64> = node
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| if kd[i] { v } else { fill })
                .collect();
            (out, node.requires_grad)
        };
        // fill may legitimately be a large negative sentinel for attention
        // logits, so the finite check runs on it too (it must stay finite).
        Ok(self.record(
            self.shape.clone(),
            data,
            requires_grad,
            Op::MaskedFill {
                a: self.id,
                keep: keep.clone(),
            },
        ))
    }
}
