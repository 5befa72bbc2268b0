//! Finite-difference gradient verification.

use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences of the
/// loss over every parameter and returns the worst relative error.
///
/// `loss_at` must evaluate the loss at an arbitrary parameter vector of the
/// same length; it is called 2·n times with step `h`. Relative error per
/// coordinate is |num − ana| / max(1e-8, |num| + |ana|), which stays bounded
/// near zero gradients.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], h: f64, mut loss_at: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            op: "grad_check",
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let p0 = work[i];
        work[i] = p0 + h;
        let lp = loss_at(&work)?;
        work[i] = p0 - h;
        let lm = loss_at(&work)?;
        work[i] = p0;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                detail: format!("loss non-finite at parameter {i}"),
            });
        }
        let numeric = (lp - lm) / (2.0 * h);
        let denom = (numeric.abs() + analytic[i].abs()).max(1e-8);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
