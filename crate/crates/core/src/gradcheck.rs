//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every differentiable primitive and
//! the end-to-end model against an independent numerical oracle.

use crate::tensor::Tensor;

/// Relative error with a floor on the denominator so near-zero gradients
/// compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-5);
    (a - b).abs() / denom
}

/// Central finite differences of `f` with respect to every element of
/// `inputs[which]`, step `h`.
pub fn numeric_grad(
    inputs: &[Tensor],
    which: usize,
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    let base = &inputs[which];
    let mut grad = vec![0.0; base.numel()];
    for i in 0..base.numel() {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let mut dp = base.data().to_vec();
        let mut dm = base.data().to_vec();
        dp[i] += h;
        dm[i] -= h;
        plus[which] = Tensor::new(base.shape().to_vec(), dp).unwrap();
        minus[which] = Tensor::new(base.shape().to_vec(), dm).unwrap();
        grad[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic gradient and finite differences
/// over the same input.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
