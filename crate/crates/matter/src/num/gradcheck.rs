//! Central-difference verification of analytic gradients. Runs in f64: the
//! difference quotient divides function noise by 2*eps, so f32 evaluation
//! noise (~1e-6 relative) would swamp the tolerances this crate pins.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

/// Step used throughout the crate's gradient tests.
pub const DEFAULT_EPS: f64 = 1e-3;
/// Max relative error accepted for analytic-vs-numeric agreement.
pub const DEFAULT_TOL: f64 = 1e-3;

/// Perturbs every coordinate of `x` by +-eps, compares the central difference
/// against `analytic`, and returns the worst relative error, where relative
/// means |numeric - analytic| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F>(
    mut f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if x.shape() != analytic.shape() {
        return Err(Error::data(format!(
            "analytic gradient shape {:?} does not match input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::data(format!("eps must be finite and positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let xi = x.data()[i];
        probe.data_mut()[i] = xi + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xi - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numerical(format!(
                "function returned non-finite value near coordinate {i}: f+ = {fp}, f- = {fm}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let ana = analytic.data()[i];
        let denom = ana.abs().max(numeric.abs()).max(1e-8);
        let rel = (numeric - ana).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::new([1], vec![3.0]).unwrap();
        let analytic = Tensor::<f64>::new([1], vec![6.0]).unwrap();
        let err = finite_diff_check(|t| Ok(t.data()[0] * t.data()[0]), &x, &analytic, DEFAULT_EPS)
            .unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn sum_of_sines() {
        let x = Tensor::<f64>::new([4], vec![0.3, -1.1, 2.0, 0.05]).unwrap();
        let analytic = x.map(|v| v.cos());
        let err = finite_diff_check(
            |t| Ok(t.data().iter().map(|v| v.sin()).sum()),
            &x,
            &analytic,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn flags_wrong_analytic_gradient() {
        let x = Tensor::<f64>::new([1], vec![2.0]).unwrap();
        let wrong = Tensor::<f64>::new([1], vec![1.0]).unwrap();
        let err = finite_diff_check(|t| Ok(t.data()[0] * t.data()[0]), &x, &wrong, DEFAULT_EPS)
            .unwrap();
        assert!(err > 0.5, "error {err} should expose the wrong gradient");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::<f64>::new([1], vec![0.0]).unwrap();
        let analytic = Tensor::<f64>::zeros([1]);
        let res = finite_diff_check(|t| Ok(1.0 / t.data()[0]), &x, &analytic, 0.0);
        assert!(res.is_err()); // zero eps rejected before evaluation
        let res = finite_diff_check(|_| Ok(f64::NAN), &x, &analytic, DEFAULT_EPS);
        assert!(res.is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros([2]);
        let analytic = Tensor::<f64>::zeros([3]);
        assert!(finite_diff_check(|_| Ok(0.0), &x, &analytic, DEFAULT_EPS).is_err());
    }
}
