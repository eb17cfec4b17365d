use crate::error::{Error, Result};

/// Error measure used by every gradient check: `|a - n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares an analytic gradient against central differences of `f` at `x`.
///
/// Returns the largest [`relative_error`] over all coordinates.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(Error::shape("finite_diff_check gradient", &[x.len()], &[analytic.len()]));
    }
    if !(step > 0.0) {
        return Err(Error::Numeric(format!("finite difference step {step} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {}, numeric {numeric}",
                analytic[i]
            )));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
