use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_id: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub perturbation_step: f64,
}

impl GradCheckReport {
    pub fn csv_header() -> &'static str {
        "op_id,max_rel_err,tolerance,passed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{}",
            self.op_id, self.max_relative_error, self.tolerance, self.passed
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences of `f` around `point`, one coordinate at a time.
pub fn central_differences<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue(format!("function value at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares `analytic` with central differences of `f` at `point`.
pub fn finite_difference_check<F>(
    op_id: &str,
    f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::shape("gradcheck analytic gradient", &[point.len()], &[analytic.len()]));
    }
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("analytic gradient entry {i}")));
    }
    let numeric = central_differences(f, point, step)?;
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_id: op_id.to_string(),
        max_relative_error,
        tolerance,
        passed: max_relative_error <= tolerance,
        perturbation_step: step,
    })
}
