//! Independent finite-difference gradient verification.
//!
//! Central differences over the flattened parameter vector, for checking the
//! analytic backward pass of any scalar loss. This path never touches
//! `backward`; it only re-evaluates the loss at perturbed parameters.

use crate::nn::ModelParameters;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `loss` w.r.t. every scalar parameter.
pub fn numeric_gradient(
    params: &ModelParameters,
    eps: f64,
    mut loss: impl FnMut(&ModelParameters) -> f64,
) -> Vec<f64> {
    let mut flat = params.to_flat();
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        let plus = loss(&params.with_flat(&flat));
        flat[i] = orig - eps;
        let minus = loss(&params.with_flat(&flat));
        flat[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}

/// Relative error between two gradient values, floored so that a pair of
/// near-zero gradients compares as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Largest relative error between an analytic gradient and the
/// finite-difference estimate of `loss` at `params`.
pub fn max_relative_error(
    params: &ModelParameters,
    analytic: &ModelParameters,
    eps: f64,
    loss: impl FnMut(&ModelParameters) -> f64,
) -> f64 {
    let numeric = numeric_gradient(params, eps, loss);
    analytic
        .to_flat()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
