//! Central finite-difference gradient checking.

use super::{Result, TensorError};

/// Default perturbation for [`grad_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares an analytic gradient against central differences.
///
/// `f` maps a parameter vector to `(loss, analytic gradient)`. The analytic
/// gradient is taken once at `params`; each parameter is then perturbed by
/// `±eps`. Returns the largest `|a - cd| / max(|a|, |cd|, 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("grad_check analytic pass".into()));
    }
    if analytic.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            detail: format!("{} gradients for {} parameters", analytic.len(), params.len()),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (up, _) = f(&probe)?;
        probe[i] = params[i] - eps;
        let (down, _) = f(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite(format!("grad_check probe of parameter {i}")));
        }
        let cd = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
