//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and row-major. Operations execute eagerly and record
//! themselves on a [`Tape`]; [`Tape::backward`] replays the recording in
//! reverse to accumulate exact analytic gradients. A tape and its tensors
//! are confined to one logical thread; independent tapes may run in
//! parallel. Debug builds assert that no operation produces NaN/Inf.

mod array;
pub mod check;
mod error;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use array::{BoolTensor, NdArray};
pub use error::{Result, TensorError};
pub use tape::Tape;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Tape, shape: &[usize], data: &[f64]) -> Tensor {
        tape.leaf(
            NdArray::new(shape.to_vec(), data.to_vec()).unwrap(),
            true,
        )
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = leaf(&tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&tape, &[2, 2], &[3.5, -1.25, 0.75, 9.0]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value().data(), a.value().data());
    }

    #[test]
    fn matmul_hand_expanded() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&tape, &[2, 1], &[1.0, 1.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&tape, &[2, 2], &[0.0; 4]);
        match a.matmul(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let a0 = [0.3, -1.1, 0.7, 2.0];
        let b0 = [0.5, 0.25, -0.75, 1.5];
        let f = |a_data: &[f64]| {
            let tape = Tape::new();
            let a = leaf(&tape, &[2, 2], a_data);
            let b = leaf(&tape, &[2, 2], &b0);
            a.matmul(&b).unwrap().sum_all().item()
        };
        let numeric = check::central_diff(f, &a0, 1e-5);
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 2], &a0);
        let b = leaf(&tape, &[2, 2], &b0);
        let loss = a.matmul(&b).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        let analytic = a.grad().unwrap();
        assert!(check::max_rel_err(analytic.data(), &numeric) < 1e-6);
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2,2,2] x [2,2] broadcasts the right operand over the batch.
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = leaf(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert_eq!(
            out.value().data(),
            &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]
        );
        let loss = out.sum_all();
        tape.backward(&loss).unwrap();
        // dB sums contributions from both batch elements.
        let db = b.grad().unwrap();
        assert_eq!(db.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_on_constant_input() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[0.0, 0.0, 0.0]);
        let y = x.softmax(0).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        // softmax([0, ln 3]) = [1/(1+3), 3/(1+3)] = [0.25, 0.75]
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[0.0, 3.0f64.ln()]);
        let y = x.softmax(0).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
        assert!((v.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.leaf(
            NdArray::new(vec![2], vec![f64::NAN, 0.0]).unwrap(),
            false,
        );
        assert!(matches!(
            x.softmax(0),
            Err(TensorError::NonFinite { op: "softmax", .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_zeroes_out() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1, 4], &[5.0, 5.0, 5.0, 5.0]);
        let gain = leaf(&tape, &[4], &[1.0; 4]);
        let bias = leaf(&tape, &[4], &[0.0; 4]);
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1, 2], &[1.0, -1.0]);
        let gain = leaf(&tape, &[2], &[1.0, 1.0]);
        let bias = leaf(&tape, &[2], &[0.0, 0.0]);
        let y = x.layer_norm(&gain, &bias, 1e-9).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-6);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_difference() {
        let x0 = [0.4, -0.9, 1.3, 0.2, 0.05, -1.7];
        let g0 = [1.1, 0.9, 1.05];
        let b0 = [0.1, -0.2, 0.0];
        let run = |x_data: &[f64], g_data: &[f64], b_data: &[f64]| -> (Tape, Tensor, Tensor, Tensor, Tensor) {
            let tape = Tape::new();
            let x = leaf(&tape, &[2, 3], x_data);
            let gain = leaf(&tape, &[3], g_data);
            let bias = leaf(&tape, &[3], b_data);
            // weight the output so per-element gradients differ
            let w = tape.constant(NdArray::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap());
            let loss = x.layer_norm(&gain, &bias, 1e-5).unwrap().mul(&w).unwrap().sum_all();
            (tape, x, gain, bias, loss)
        };
        let (tape, x, gain, bias, loss) = run(&x0, &g0, &b0);
        tape.backward(&loss).unwrap();
        let dx = x.grad().unwrap();
        let dg = gain.grad().unwrap();
        let db = bias.grad().unwrap();

        let nx = check::central_diff(|p| run(p, &g0, &b0).4.item(), &x0, 1e-5);
        let ng = check::central_diff(|p| run(&x0, p, &b0).4.item(), &g0, 1e-5);
        let nb = check::central_diff(|p| run(&x0, &g0, p).4.item(), &b0, 1e-5);
        assert!(check::max_rel_err(dx.data(), &nx) < 1e-5);
        assert!(check::max_rel_err(dg.data(), &ng) < 1e-5);
        assert!(check::max_rel_err(db.data(), &nb) < 1e-5);
    }

    #[test]
    fn layer_norm_empty_feature_axis_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![2, 0], vec![]).unwrap(), false);
        let gain = tape.leaf(NdArray::new(vec![0], vec![]).unwrap(), false);
        let bias = tape.leaf(NdArray::new(vec![0], vec![]).unwrap(), false);
        assert!(matches!(
            x.layer_norm(&gain, &bias, 1e-5),
            Err(TensorError::Dimension { op: "layer_norm", .. })
        ));
    }

    #[test]
    fn cumsum_direct_definition() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[1.0, 2.0, 3.0]);
        let y = x.cumsum(0).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn cumsum_zero_tail_keeps_prefix() {
        let tape = Tape::new();
        let x = leaf(&tape, &[5], &[2.0, -1.0, 0.0, 0.0, 0.0]);
        let y = x.cumsum(0).unwrap();
        assert_eq!(y.value().data(), &[2.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn cumsum_gradient_matches_finite_difference() {
        let x0 = [0.5, -0.25, 2.0, 1.0];
        let w = [1.0, 3.0, -2.0, 0.5];
        let f = |x_data: &[f64]| {
            let tape = Tape::new();
            let x = leaf(&tape, &[4], x_data);
            let wt = tape.constant(NdArray::new(vec![4], w.to_vec()).unwrap());
            x.cumsum(0).unwrap().mul(&wt).unwrap().sum_all().item()
        };
        let numeric = check::central_diff(f, &x0, 1e-6);
        let tape = Tape::new();
        let x = leaf(&tape, &[4], &x0);
        let wt = tape.constant(NdArray::new(vec![4], w.to_vec()).unwrap());
        let loss = x.cumsum(0).unwrap().mul(&wt).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        assert!(check::max_rel_err(x.grad().unwrap().data(), &numeric) < 1e-6);
    }

    #[test]
    fn mean_plain_and_masked() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[2.0, 4.0]);
        assert!((x.mean_axis(0, None).unwrap().item() - 3.0).abs() < 1e-15);

        let y = leaf(&tape, &[3], &[2.0, 4.0, 999.0]);
        let mask = BoolTensor::new(vec![3], vec![true, true, false]).unwrap();
        assert!((y.mean_axis(0, Some(&mask)).unwrap().item() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_masked_gradient_is_inverse_count_and_zero() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[2.0, 4.0, 999.0]);
        let mask = BoolTensor::new(vec![3], vec![true, true, false]).unwrap();
        let loss = x.mean_axis(0, Some(&mask)).unwrap();
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.data(), &[0.5, 0.5, 0.0]);
        // matches finite differences on the unmasked entries
        let numeric = check::central_diff(
            |p| {
                let tape = Tape::new();
                let x = leaf(&tape, &[3], p);
                x.mean_axis(0, Some(&mask)).unwrap().item()
            },
            &[2.0, 4.0, 999.0],
            1e-5,
        );
        assert!(check::max_rel_err(g.data(), &numeric) < 1e-6);
    }

    #[test]
    fn mean_fully_masked_slice_is_degenerate() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mask = BoolTensor::new(vec![2, 2], vec![true, true, false, false]).unwrap();
        assert!(matches!(
            x.mean_axis(1, Some(&mask)),
            Err(TensorError::DegenerateInput { op: "mean", .. })
        ));
    }

    #[test]
    fn backward_identity_and_square() {
        let tape = Tape::new();
        let x = leaf(&tape, &[], &[3.0]);
        tape.backward(&x).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0]);

        let tape = Tape::new();
        let x = leaf(&tape, &[], &[3.0]);
        let loss = x.mul(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::Usage { .. })
        ));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let tape = Tape::new();
        let x = leaf(&tape, &[], &[2.0]);
        let loss = x.mul(&x).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[8.0]);
    }

    #[test]
    fn backward_shared_subexpression_matches_expanded_graph() {
        // shared: s = x * x; loss = s + s
        let tape = Tape::new();
        let x = leaf(&tape, &[], &[1.7]);
        let s = x.mul(&x).unwrap();
        let loss = s.add(&s).unwrap();
        tape.backward(&loss).unwrap();
        let g_shared = x.grad().unwrap().data()[0];

        // expanded: loss = x*x + x*x with separate nodes
        let tape = Tape::new();
        let x = leaf(&tape, &[], &[1.7]);
        let s1 = x.mul(&x).unwrap();
        let s2 = x.mul(&x).unwrap();
        let loss = s1.add(&s2).unwrap();
        tape.backward(&loss).unwrap();
        let g_expanded = x.grad().unwrap().data()[0];
        assert_eq!(g_shared, g_expanded);
    }

    #[test]
    fn slice_concat_transpose_roundtrip_gradients() {
        let x0 = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let f = |x_data: &[f64]| {
            let tape = Tape::new();
            let x = leaf(&tape, &[2, 3], x_data);
            let left = x.slice(1, 0, 2).unwrap();
            let right = x.slice(1, 2, 1).unwrap();
            let glued = tape.concat(&[&left, &right], 1).unwrap();
            let t = glued.transpose(0, 1).unwrap();
            let sq = t.mul(&t).unwrap();
            sq.sum_all().item()
        };
        let numeric = check::central_diff(f, &x0, 1e-6);
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 3], &x0);
        let left = x.slice(1, 0, 2).unwrap();
        let right = x.slice(1, 2, 1).unwrap();
        let glued = tape.concat(&[&left, &right], 1).unwrap();
        let t = glued.transpose(0, 1).unwrap();
        let loss = t.mul(&t).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        assert!(check::max_rel_err(x.grad().unwrap().data(), &numeric) < 1e-6);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], &[1.0, 2.0, 3.0]);
        let keep = BoolTensor::new(vec![3], vec![true, false, true]).unwrap();
        let y = x.masked_fill(&keep, -5.0).unwrap();
        assert_eq!(y.value().data(), &[1.0, -5.0, 3.0]);
        let loss = y.sum_all();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn elementwise_unary_gradients_match_finite_difference() {
        type UnaryCase = (&'static str, fn(&Tensor) -> Tensor, Vec<f64>);
        let cases: Vec<UnaryCase> = vec![
            ("exp", |x| x.exp(), vec![0.1, -0.4, 0.9]),
            ("log", |x| x.log(), vec![0.5, 1.7, 3.0]),
            ("sqrt", |x| x.sqrt(), vec![0.25, 1.0, 4.0]),
            ("relu", |x| x.relu(), vec![-0.5, 0.3, 1.2]),
            ("gelu", |x| x.gelu(), vec![-1.0, 0.2, 0.8]),
            ("tanh", |x| x.tanh(), vec![-0.7, 0.1, 1.5]),
            ("softplus", |x| x.softplus(), vec![-2.0, 0.0, 2.5]),
        ];
        for (name, op, x0) in cases {
            let f = |x_data: &[f64]| {
                let tape = Tape::new();
                let x = leaf(&tape, &[3], x_data);
                op(&x).sum_all().item()
            };
            let numeric = check::central_diff(f, &x0, 1e-6);
            let tape = Tape::new();
            let x = leaf(&tape, &[3], &x0);
            let loss = op(&x).sum_all();
            tape.backward(&loss).unwrap();
            let err = check::max_rel_err(x.grad().unwrap().data(), &numeric);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn clamp_min_gradient_zero_below_floor() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[0.5, 2.0]);
        let loss = x.clamp_min(1.0).sum_all();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }
}
