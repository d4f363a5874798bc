//! Bias-corrected Adam.

use crate::error::{FusionError, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(FusionError::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FusionError::invalid(format!("{name} must be in [0,1), got {b}")));
            }
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(FusionError::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer moments plus early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// First moments, one buffer per parameter in store order.
    pub m: Vec<Vec<f64>>,
    /// Second moments, elementwise >= 0.
    pub v: Vec<Vec<f64>>,
    pub best_val: f64,
    /// Epochs since the last improvement.
    pub patience: u32,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: &ParamStore, seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            best_val: f64::INFINITY,
            patience: 0,
            seed,
        }
    }

    /// Moment buffers line up with `params`.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// One Adam update from the gradients stored in `params`.
///
/// Every gradient is checked before anything is modified, so a NaN leaves
/// parameters and moments untouched.
pub fn adam_step(state: &mut TrainState, params: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !state.matches(params) {
        return Err(FusionError::invalid("optimizer state does not match the parameters"));
    }
    for p in params.iter() {
        if let Some(g) = &p.tensor.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(FusionError::NanGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = p.tensor.grad.take() else { continue };
        for (((theta, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.tensor.grad = Some(grad);
    }
    Ok(())
}
