//! Batch normalization with running statistics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormStats, Var};
use crate::error::Result;

/// Whether a forward pass trains or infers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer. The learnable scale and shift
/// live in the parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running averages (unbiased variance); inference uses the running
    /// averages only.
    pub fn apply(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, moments) = g.batch_norm(x, gamma, beta, &NormStats::Batch { eps: self.eps })?;
                let m = moments.expect("training batch norm reports moments");
                let unbias = m.count as f64 / (m.count - 1) as f64;
                for c in 0..self.running_mean.len().min(m.mean.len()) {
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * m.mean[c];
                    self.running_var[c] =
                        (1.0 - self.momentum) * self.running_var[c] + self.momentum * m.var[c] * unbias;
                }
                Ok(y)
            }
            Mode::Infer => {
                let stats = NormStats::Fixed {
                    mean: self.running_mean.clone(),
                    var: self.running_var.clone(),
                    eps: self.eps,
                };
                Ok(g.batch_norm(x, gamma, beta, &stats)?.0)
            }
        }
    }
}
