//! ADAM over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Fit hyperparameters of an exact GP on at most this many seeded rows.
    pub subsample: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-2,
            iterations: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            subsample: None,
        }
    }
}

/// Runs `cfg.iterations` ADAM steps. `objective` returns the reported loss and
/// the gradient used for the update (which may include regularization the
/// reported loss leaves out). The returned trace holds the loss evaluated
/// before each step.
pub fn adam_minimize<F>(x0: Vec<f64>, cfg: &OptimizerConfig, mut objective: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (loss, grad) = objective(&x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { iteration: t });
        }
        trace.push(loss);
        let b1t = 1.0 - cfg.beta1.powi(t as i32 + 1);
        let b2t = 1.0 - cfg.beta2.powi(t as i32 + 1);
        for i in 0..x.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = m[i] / b1t;
            let vhat = v[i] / b2t;
            x[i] -= cfg.step_size * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok((x, trace))
}
