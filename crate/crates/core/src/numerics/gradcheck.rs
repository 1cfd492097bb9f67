use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared in absolute rather than
/// relative terms (roughly the central-difference noise floor at `h = 1e-5`).
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::OracleFailure(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite evaluation around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Compares an analytic gradient against [`finite_diff_grad`].
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
/// `label` names coordinates in the report.
pub fn grad_check<F, L>(
    f: F,
    p: &[f64],
    analytic: &[f64],
    step: f64,
    label: L,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
    L: Fn(usize) -> String,
{
    if analytic.len() != p.len() {
        return Err(Error::dim(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            p.len()
        )));
    }
    let numeric = finite_diff_grad(f, p, step)?;
    let mut worst = (0.0f64, 0usize);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR);
        let err = (a - n).abs() / denom;
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_parameter: if p.is_empty() {
            String::new()
        } else {
            label(worst.1)
        },
        worst_index: worst.1,
        step,
    })
}
