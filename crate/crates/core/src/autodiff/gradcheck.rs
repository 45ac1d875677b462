//! Central finite-difference gradient verification.
//!
//! The harness re-evaluates a caller-supplied loss under elementwise
//! parameter perturbations and compares against analytic gradients. It is
//! intentionally independent of the tape: the loss closure may build
//! whatever computation it wants from the plain tensors it is handed.

use alloc::string::String;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::fmath;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compares `analytic` gradients of `loss(params)` against central finite
/// differences with the given `step`. `params` and `analytic` align
/// pairwise.
///
/// Central differences of a loss evaluated to roundoff carry cancellation
/// noise of order eps * |loss| / step; differences below that band are
/// treated as agreement so parameters with genuinely tiny gradients do not
/// inflate the relative error.
pub fn finite_difference_check<F>(
    params: &[(String, Tensor)],
    analytic: &[Tensor],
    step: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&[(String, Tensor)]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let base = fmath::abs(loss(&work));
    let noise = 1e-13 * base.max(1.0) / step;
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for p in 0..params.len() {
        assert_eq!(params[p].1.shape(), analytic[p].shape());
        for idx in 0..params[p].1.len() {
            let orig = params[p].1.data()[idx];
            work[p].1.data_mut()[idx] = orig + step;
            let plus = loss(&work);
            work[p].1.data_mut()[idx] = orig - step;
            let minus = loss(&work);
            work[p].1.data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[p].data()[idx];
            let excess = (fmath::abs(ad - fd) - noise).max(0.0);
            let rel = excess / fmath::abs(ad).max(fmath::abs(fd)).max(1e-12);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params[p].0.clone(), idx));
            }
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        checked,
    }
}
