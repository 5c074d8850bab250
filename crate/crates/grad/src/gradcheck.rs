//! Finite-difference gradient verification.
//!
//! Used throughout the test suites to check analytic gradients of custom ops
//! against central differences. Run these in `f64`: central differences in
//! `f32` cannot resolve 1e-4 relative agreement.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice().expect("standard layout")[idx];
        xp.as_slice_mut().expect("standard layout")[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().expect("standard layout")[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().expect("standard layout")[idx] = orig;
        grad.as_slice_mut().expect("standard layout")[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative disagreement between analytic and numeric gradients, measured as
/// max-abs error over the scale of the numeric gradient.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()))
        .max(1e-12);
    let max_abs = analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |a, (&x, &y)| a.max((x - y).abs()));
    max_abs / scale
}

/// Convenience wrapper: checks the gradient of `f` (forward to scalar) at `x`
/// against `analytic`, returning the relative error.
pub fn check_against<F>(x: &ArrayD<f64>, analytic: &ArrayD<f64>, eps: f64, f: F) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let numeric = finite_diff(x, eps, f);
    max_rel_error(analytic, &numeric)
}
