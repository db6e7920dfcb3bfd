use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update of a single parameter; `t` is the 1-based step count.
///
/// Weight decay is decoupled: the parameter shrinks by `lr · weight_decay`
/// directly and the moments see only the gradient.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Contract(format!(
            "optimizer state for {} values got gradient {} and moments {}/{}",
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("AdamW step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// AdamW over a whole [`ParamStore`]. Decay applies to parameters flagged `decay`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        AdamW { config, state: params.iter().map(|p| Moments::zeros(p.tensor.len())).collect(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the gradients currently stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if params.len() != self.state.len() {
            return Err(Error::Contract(format!("optimizer tracks {} parameters, store has {}", self.state.len(), params.len())));
        }
        self.t += 1;
        for (p, s) in params.iter_mut().zip(&mut self.state) {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))?
                .to_vec();
            adamw_step(p.tensor.data_mut(), &grad, s, self.t, lr, &self.config, p.decay)?;
        }
        Ok(())
    }
}
