use crate::error::{Error, Result};

/// Compare an analytic gradient against central differences.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_gradcheck<F>(mut f: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Structural(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut point = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        point[i] = params[i] + epsilon;
        let (up, _) = f(&point)?;
        point[i] = params[i] - epsilon;
        let (down, _) = f(&point)?;
        point[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while perturbing parameter {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
