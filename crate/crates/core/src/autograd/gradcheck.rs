//! Central finite-difference gradient verification.
//!
//! The check only evaluates the forward function, so it stays independent of
//! the backward rules it verifies.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the elementwise relative error. Entries whose
    /// analytic and numeric values are both below it are compared absolutely
    /// against it.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&[Tensor]) -> Result<f64, TensorError>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for (e, slot) in g.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64, TensorError> {
                let mut shifted = input.data().to_vec();
                shifted[e] += delta;
                let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                probe[which] = Tensor::new(shifted, input.shape())?;
                f(&probe)
            };
            *slot = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares backward-pass gradients of `f` at `inputs` with central
/// differences. `inputs` are cloned into fresh parameters, so their own
/// gradient slots are left untouched.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    config: GradCheck,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, TensorError>,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::parameter(t.data().to_vec(), t.shape()))
        .collect::<Result<_, _>>()?;
    f(&params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let numeric = numeric_gradient(inputs, config.step, |p| Ok(f(p)?.item()))?;

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (x, y)) in a.iter().zip(n).enumerate() {
            let err = relative_error(*x, *y, config.floor);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, e);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
