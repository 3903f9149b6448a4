use crate::error::{GroveError, Result};

/// Compares `analytic` against central finite differences of `f` at `p`.
///
/// Returns `max_i |g_fd,i − g_i| / max(1, |g_fd,i|)`.
pub fn grad_check<F>(mut f: F, p: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if p.len() != analytic.len() {
        return Err(GroveError::ShapeMismatch(format!(
            "grad_check: {} parameters, {} gradient entries",
            p.len(),
            analytic.len()
        )));
    }
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GroveError::InvalidConfig(format!(
            "grad_check eps {eps} outside (0, 1e-2]"
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(GroveError::NonFiniteValue(format!(
            "analytic gradient entry {i}"
        )));
    }
    let mut work = p.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        work[i] = p[i] + eps;
        let up = f(&work);
        work[i] = p[i] - eps;
        let down = f(&work);
        work[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(GroveError::NonFiniteValue(format!(
                "objective at coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
