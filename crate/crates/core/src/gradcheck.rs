//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the graph's backward pass: it only re-runs a
//! caller-supplied forward closure with perturbed leaf values, so tests can
//! use it to audit analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every element of every
/// tensor in `leaves`, one result vector per leaf.
///
/// `f` must be a pure function of the leaf values.
pub fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> f64,
    leaves: &[Tensor],
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grads = vec![0.0; leaves[li].numel()];
        for ei in 0..leaves[li].numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += eps;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= eps;
            grads[ei] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out.push(grads);
    }
    out
}

/// Relative error between an analytic and a reference gradient value,
/// with a floor so near-zero pairs compare on absolute terms.
pub fn rel_error(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(1e-6);
    (analytic - reference).abs() / denom
}

/// Maximum relative error across paired gradient vectors.
pub fn max_rel_error(analytic: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, r) in analytic.iter().zip(reference) {
        for (&av, &rv) in a.iter().zip(r) {
            worst = worst.max(rel_error(av, rv));
        }
    }
    worst
}
