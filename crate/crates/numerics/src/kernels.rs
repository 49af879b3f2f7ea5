//! Shape utilities and raw compute kernels shared by forward and backward
//! passes. Everything here works on flat row-major `&[f64]` buffers.

use crate::error::{Result, TensorError};

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decomposes `flat` into coordinates of `shape` (row-major).
pub fn unravel(mut flat: usize, shape: &[usize], coords: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] = flat % shape[d];
        flat /= shape[d];
    }
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() {
            1
        } else {
            a[d - (rank - a.len())]
        };
        let db = if d < rank - b.len() {
            1
        } else {
            b[d - (rank - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[d] = da.max(db);
    }
    Some(out)
}

/// Per-output-dim stride into `in_shape` when broadcasting to `out_shape`
/// (0 where the input dimension is broadcast). `None` when incompatible.
pub fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let in_strides = strides(in_shape);
    let offset = out_shape.len() - in_shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for (d, &od) in out_shape.iter().enumerate() {
        if d < offset {
            continue;
        }
        let id = in_shape[d - offset];
        if id == od {
            out[d] = in_strides[d - offset];
        } else if id == 1 {
            out[d] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Visits every (out_flat, a_flat, b_flat) triple of a broadcast zip.
pub fn zip_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if a_shape == b_shape && a_shape == out_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape).expect("checked by caller");
    let sb = broadcast_strides(b_shape, out_shape).expect("checked by caller");
    let mut coords = vec![0usize; out_shape.len()];
    for flat in 0..n {
        unravel(flat, out_shape, &mut coords);
        let mut ia = 0;
        let mut ib = 0;
        for (d, &c) in coords.iter().enumerate() {
            ia += c * sa[d];
            ib += c * sb[d];
        }
        f(flat, ia, ib);
    }
}

/// Visits each 1-D lane along `axis`: `f(start, stride, len)`.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

/// Batched matrix product with right-aligned broadcast over leading
/// (batch) dimensions. Both operands must have rank >= 2.
pub fn matmul(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (batch, m, k, n) = matmul_dims(a_shape, b_shape)?;
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; numel(&out_shape)];
    let sa = broadcast_strides(&a_shape[..a_shape.len() - 2], &batch).expect("checked");
    let sb = broadcast_strides(&b_shape[..b_shape.len() - 2], &batch).expect("checked");
    let n_batches = numel(&batch);
    let mut coords = vec![0usize; batch.len()];
    for bi in 0..n_batches {
        unravel(bi, &batch, &mut coords);
        let mut oa = 0;
        let mut ob = 0;
        for (d, &c) in coords.iter().enumerate() {
            oa += c * sa[d];
            ob += c * sb[d];
        }
        let a_mat = &a[oa * m * k..oa * m * k + m * k];
        let b_mat = &b[ob * k * n..ob * k * n + k * n];
        let c_mat = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a_mat[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b_mat[p * n..(p + 1) * n];
                let crow = &mut c_mat[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
    }
    Ok((out, out_shape))
}

/// Validates matmul operand shapes; returns (batch_shape, m, k, n).
pub fn matmul_dims(a_shape: &[usize], b_shape: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let m = a_shape[a_shape.len() - 2];
    let k = a_shape[a_shape.len() - 1];
    let k2 = b_shape[b_shape.len() - 2];
    let n = b_shape[b_shape.len() - 1];
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let batch = broadcast_shapes(&a_shape[..a_shape.len() - 2], &b_shape[..b_shape.len() - 2])
        .ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        })?;
    Ok((batch, m, k, n))
}

/// Accumulates matmul input gradients: dA += g @ B^T, dB += A^T @ g,
/// summing over broadcast batch dimensions.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    grad: &[f64],
    da: &mut [f64],
    db: &mut [f64],
) {
    let (batch, m, k, n) = matmul_dims(a_shape, b_shape).expect("validated in forward");
    let sa = broadcast_strides(&a_shape[..a_shape.len() - 2], &batch).expect("checked");
    let sb = broadcast_strides(&b_shape[..b_shape.len() - 2], &batch).expect("checked");
    let n_batches = numel(&batch);
    let mut coords = vec![0usize; batch.len()];
    for bi in 0..n_batches {
        unravel(bi, &batch, &mut coords);
        let mut oa = 0;
        let mut ob = 0;
        for (d, &c) in coords.iter().enumerate() {
            oa += c * sa[d];
            ob += c * sb[d];
        }
        let a_mat = &a[oa * m * k..oa * m * k + m * k];
        let b_mat = &b[ob * k * n..ob * k * n + k * n];
        let g_mat = &grad[bi * m * n..(bi + 1) * m * n];
        let da_mat = &mut da[oa * m * k..oa * m * k + m * k];
        for i in 0..m {
            let grow = &g_mat[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b_mat[p * n..(p + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += grow[j] * brow[j];
                }
                da_mat[i * k + p] += acc;
            }
        }
        let db_mat = &mut db[ob * k * n..ob * k * n + k * n];
        for p in 0..k {
            for i in 0..m {
                let aip = a_mat[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let grow = &g_mat[i * n..(i + 1) * n];
                let dbrow = &mut db_mat[p * n..(p + 1) * n];
                for j in 0..n {
                    dbrow[j] += aip * grow[j];
                }
            }
        }
    }
}

pub const GELU_COEF: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
