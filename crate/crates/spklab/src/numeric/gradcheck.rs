//! Finite-difference gradient oracle.
//!
//! Central differences around a point give an O(h^2)-accurate numerical
//! gradient of any scalar function. The objective implementations in this
//! crate are verified against it: analytic backpropagation must agree with
//! the oracle to tight relative error before anything is trained.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("function returned a non-finite value while perturbing coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
}

/// Central-difference gradient of `f` at `x`:
/// `g[i] = (f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_difference_gradient<F>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(GradCheckError::BadStep(step));
    }
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point);
        point[i] = orig - step;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFiniteEvaluation { coordinate: i });
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative disagreement between an analytic and a numerical derivative.
///
/// The denominator is floored so that near-zero gradient entries, where both
/// values are dominated by roundoff, do not blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
