//! Dense kernels, reference forward functions, and the finite-difference
//! gradient oracle used to validate every analytic gradient in the crate.

mod gradcheck;
mod matrix;

pub use gradcheck::{finite_diff_grad, grad_check, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use matrix::{dot, norm, Matrix};

use crate::error::{Error, Result};

/// Default layer-norm stability floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax. Entries whose `mask` element is `false` are treated as
/// logit `-inf`: they get exactly zero probability and do not enter the sum.
pub fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.len() {
            return Err(Error::dim(format!(
                "softmax mask has {} entries for a {}x{} matrix",
                mask.len(),
                m.rows(),
                m.cols()
            )));
        }
    }
    let cols = m.cols();
    let mut out = Matrix::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        let valid = |j: usize| mask.is_none_or(|mk| mk[r * cols + j]);
        let row = m.row(r);
        let max = (0..cols)
            .filter(|&j| valid(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let out_row = out.row_mut(r);
        let mut total = 0.0;
        for j in 0..cols {
            if valid(j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        out_row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Per-row layer normalisation followed by an affine gain and bias.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::dim(format!(
            "layer norm over {} columns with gain {} / bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer norm eps must be positive, got {eps}"
        )));
    }
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Largest cosine between `q` and the first `valid` rows of `rows`, with the
/// index of the first maximiser.
pub fn max_cosine(q: &[f64], rows: &Matrix, valid: usize) -> Result<(f64, usize)> {
    if valid == 0 {
        return Err(Error::Empty("no valid rows to score".into()));
    }
    if valid > rows.rows() {
        return Err(Error::dim(format!("{valid} valid rows of {}", rows.rows())));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..valid {
        let c = cosine(q, rows.row(i))?;
        if c > best.0 {
            best = (c, i);
        }
    }
    Ok(best)
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`, scaled by `upstream`
/// and accumulated into `grad_a` / `grad_b`.
pub(crate) fn cosine_backward(
    a: &[f64],
    b: &[f64],
    upstream: f64,
    grad_a: &mut [f64],
    grad_b: &mut [f64],
) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ca = c / (na * na);
    let cb = c / (nb * nb);
    for i in 0..a.len() {
        grad_a[i] += upstream * (b[i] * inv - ca * a[i]);
        grad_b[i] += upstream * (a[i] * inv - cb * b[i]);
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a slice scaled by `1 / temperature`.
pub fn softmax_with_temperature(values: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::InvalidTemperature(temperature));
    }
    if values.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
