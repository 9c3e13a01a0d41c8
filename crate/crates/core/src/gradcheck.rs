//! Central finite-difference checks of autograd gradients.

use candle_core::{Tensor, Var};

use crate::error::{validation, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
    pub probes: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tolerance: 1e-3,
            abs_floor: 1e-6,
            probes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ProbeResult {
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Evenly spread probe indices over `n` elements.
pub fn probe_indices(n: usize, probes: usize) -> Vec<usize> {
    if n <= probes {
        return (0..n).collect();
    }
    (0..probes).map(|i| (i * n + n / (2 * probes)) / probes).collect()
}

/// Compares the autograd gradient of `loss` with respect to `var` against
/// central differences at `probes` elements. The variable is restored after
/// every perturbation.
pub fn check_gradient(var: &Var, cfg: GradCheckConfig, mut loss: impl FnMut() -> Result<Tensor>) -> Result<GradCheckReport> {
    let original = var.as_tensor().copy()?;
    let shape = original.dims().to_vec();
    let dtype = original.dtype();
    let values = nn::to_f64_vec(&original)?;
    if values.is_empty() {
        return validation("gradient check on an empty variable");
    }
    let grads = loss()?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => nn::to_f64_vec(g)?,
        None => vec![0.0; values.len()],
    };
    let mut eval = |data: &[f64]| -> Result<f64> {
        var.set(&Tensor::from_slice(data, shape.as_slice(), &nn::device())?.to_dtype(dtype)?)?;
        nn::scalar(&loss()?)
    };
    let mut probes = Vec::with_capacity(cfg.probes);
    for index in probe_indices(values.len(), cfg.probes) {
        let mut plus = values.clone();
        plus[index] += cfg.step;
        let mut minus = values.clone();
        minus[index] -= cfg.step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
        probes.push(ProbeResult {
            index,
            analytic: analytic[index],
            numeric,
        });
    }
    var.set(&original)?;
    let max_relative_error = probes.iter().map(|p| p.relative_error(cfg.abs_floor)).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_relative_error <= cfg.rel_tolerance,
        probes,
        max_relative_error,
    })
}
