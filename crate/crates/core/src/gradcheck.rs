//! Central finite-difference checks of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude the absolute error is compared instead of the relative one.
pub const SMALL_GRAD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Relative error of `analytic` against `numeric`, falling back to the
/// absolute error when both are tiny.
pub fn element_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < SMALL_GRAD {
        diff
    } else {
        diff / scale
    }
}

/// Checks every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, &all, step, tolerance)
}

/// Checks only the listed flat indices of `x`. `f` receives a trainable copy
/// of `x` (or a perturbed constant) and must return a scalar tensor.
pub fn grad_check_indices<F>(f: F, x: &Tensor, indices: &[usize], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::invalid(format!("index {bad} out of range for {} elements", x.numel())));
    }
    let leaf = x.to_param();
    let loss = f(&leaf)?;
    let again = f(&x.detach())?;
    if loss.item().to_bits() != again.item().to_bits() {
        return Err(Error::NonDeterministic {
            first: loss.item(),
            second: again.item(),
        });
    }
    loss.backward()?;
    let full = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut data = x.to_vec();
        data[i] += delta;
        Ok(f(&Tensor::new(x.shape(), data)?)?.item())
    };

    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_error = 0.0f64;
    let mut worst_index = indices.first().copied().unwrap_or(0);
    for &i in indices {
        let n = (eval_at(i, step)? - eval_at(i, -step)?) / (2.0 * step);
        let a = full[i];
        let e = element_error(a, n);
        if e > max_error || e.is_nan() {
            max_error = if e.is_nan() { f64::INFINITY } else { e };
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        checked: indices.len(),
        max_error,
        worst_index,
        analytic,
        numeric,
        tolerance,
    })
}
