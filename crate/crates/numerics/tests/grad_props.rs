//! Property tests for the differentiation invariants: analytic gradients
//! against central differences, softmax row normalization and shift
//! invariance, and cumsum/difference inversion.

use numerics::{check, BoolTensor, NdArray, Tape, Tensor};
use proptest::prelude::*;

fn leaf(tape: &Tape, shape: &[usize], data: &[f64]) -> Tensor {
    tape.leaf(NdArray::new(shape.to_vec(), data.to_vec()).unwrap(), true)
}

fn small_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n..=n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// |analytic - central_diff| / (|central_diff| + 1e-8) < 1e-4 for a
    /// composite graph touching matmul, softmax, layer_norm, cumsum, mean,
    /// gelu, and masked_fill.
    #[test]
    fn composite_graph_gradient_matches_central_difference(
        x0 in small_vals(6),
        w0 in small_vals(9),
    ) {
        let mask = BoolTensor::new(vec![2, 3], vec![true, true, false, true, true, true]).unwrap();
        let keep = BoolTensor::new(vec![2, 3], vec![true, false, true, true, true, true]).unwrap();
        let build = |x_data: &[f64], w_data: &[f64]| {
            let tape = Tape::new();
            let x = leaf(&tape, &[2, 3], x_data);
            let w = leaf(&tape, &[3, 3], w_data);
            let gain = tape.constant(NdArray::new(vec![3], vec![1.0, 1.1, 0.9]).unwrap());
            let bias = tape.constant(NdArray::new(vec![3], vec![0.0, 0.1, -0.1]).unwrap());
            let h = x.matmul(&w).unwrap();
            let h = h.layer_norm(&gain, &bias, 1e-5).unwrap();
            let h = h.gelu();
            let h = h.masked_fill(&keep, -3.0).unwrap();
            let a = h.softmax(1).unwrap();
            let c = a.cumsum(1).unwrap();
            let m = c.mean_axis(1, Some(&mask)).unwrap();
            let loss = m.mul(&m).unwrap().sum_all();
            (tape, x, w, loss)
        };

        let (tape, x, w, loss) = build(&x0, &w0);
        tape.backward(&loss).unwrap();
        let dx = x.grad().unwrap();
        let dw = w.grad().unwrap();

        let nx = check::central_diff(|p| build(p, &w0).3.item(), &x0, 1e-5);
        let nw = check::central_diff(|p| build(&x0, p).3.item(), &w0, 1e-5);
        prop_assert!(check::max_rel_err(dx.data(), &nx) < 1e-4);
        prop_assert!(check::max_rel_err(dw.data(), &nw) < 1e-4);
    }

    /// Softmax rows sum to 1 within 1e-9 and outputs are invariant to a
    /// constant shift of the logits.
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        x0 in small_vals(12),
        shift in -50.0f64..50.0,
    ) {
        let tape = Tape::new();
        let x = leaf(&tape, &[3, 4], &x0);
        let y = x.softmax(1).unwrap().value();
        for r in 0..3 {
            let row_sum: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((row_sum - 1.0).abs() < 1e-9);
        }
        let shifted: Vec<f64> = x0.iter().map(|v| v + shift).collect();
        let xs = leaf(&tape, &[3, 4], &shifted);
        let ys = xs.softmax(1).unwrap().value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// cumsum followed by adjacent differencing recovers the input.
    #[test]
    fn cumsum_then_difference_is_identity(x0 in small_vals(8)) {
        let tape = Tape::new();
        let x = leaf(&tape, &[8], &x0);
        let c = x.cumsum(0).unwrap().value();
        let mut recovered = vec![c.data()[0]];
        for i in 1..8 {
            recovered.push(c.data()[i] - c.data()[i - 1]);
        }
        for (a, b) in recovered.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Gradient accumulation over shared subexpressions equals the gradient
    /// of the equivalent expanded graph.
    #[test]
    fn shared_subexpression_gradients_accumulate(x0 in small_vals(4)) {
        let tape = Tape::new();
        let x = leaf(&tape, &[4], &x0);
        let s = x.gelu();
        let loss = s.mul(&s).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        let shared = x.grad().unwrap();

        let tape = Tape::new();
        let x = leaf(&tape, &[4], &x0);
        let s1 = x.gelu();
        let s2 = x.gelu();
        let loss = s1.mul(&s2).unwrap().sum_all();
        tape.backward(&loss).unwrap();
        let expanded = x.grad().unwrap();
        for (a, b) in shared.data().iter().zip(expanded.data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
