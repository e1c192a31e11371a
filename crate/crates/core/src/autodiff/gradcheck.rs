use super::TensorError;

/// Denominator floor used by [`finite_diff_check`].
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences.
///
/// `f` maps a point to `(value, analytic gradient)`. Returns the maximum over
/// coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], h: f64) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TensorError>,
{
    finite_diff_check_with_floor(f, point, h, DEFAULT_REL_FLOOR)
}

pub fn finite_diff_check_with_floor<F>(mut f: F, point: &[f64], h: f64, floor: f64) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("finite difference step must be positive, got {h}")));
    }
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(TensorError::NonFinite { probe: 0, value: v0 });
    }
    if analytic.len() != point.len() {
        return Err(TensorError::Invalid(format!(
            "gradient has {} entries for a point of {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let (fp, _) = f(&x)?;
        x[i] = point[i] - h;
        let (fm, _) = f(&x)?;
        x[i] = point[i];
        for (probe, v) in [(2 * i + 1, fp), (2 * i + 2, fm)] {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { probe, value: v });
            }
        }
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
