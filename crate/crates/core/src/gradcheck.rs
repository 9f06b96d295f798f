//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it checks.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for central differences in `f64`.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Per-input relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
    /// over the checked coordinates (Euclidean norms).
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the gradient of the scalar built by `build` with respect to every
/// input, probing at most `max_coords` evenly spaced coordinates per input.
pub fn check<F>(inputs: &[Tensor], max_coords: usize, step: f64, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let n = input.len();
        let stride = if n > max_coords { n.div_ceil(max_coords) } else { 1 };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for idx in (0..n).step_by(stride) {
            let orig = input.data()[idx];
            probe[k].data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[idx];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = libm::sqrt(a2).max(libm::sqrt(n2));
        relative_errors.push(if scale < 1e-12 { libm::sqrt(diff2) } else { libm::sqrt(diff2) / scale });
    }
    Ok(GradCheck { relative_errors })
}
