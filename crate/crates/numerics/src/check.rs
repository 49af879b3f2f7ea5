//! Finite-difference gradient checking support.
//!
//! The central-difference path only re-runs forward evaluations, so it stays
//! independent of the backward rules it is used to verify.

/// Central finite difference of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error |a - b| / (|b| + 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (b.abs() + 1e-8)
}

/// Largest elementwise relative error of `analytic` against `numeric`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
