use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) {
            return Err(Error::config("adamw.beta1", "must lie in (0, 1)"));
        }
        if !open_unit(self.beta2) {
            return Err(Error::config("adamw.beta2", "must lie in (0, 1)"));
        }
        // A zero learning rate is allowed so the optimizer can be frozen.
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("adamw.learning_rate", "must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("adamw.weight_decay", "must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("adamw.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// One AdamW update over every parameter, then zeroes the gradients.
///
/// Weight decay is decoupled: `θ ← θ − lr·wd·θ` happens before, and
/// independently of, the bias-corrected Adam step.
pub fn adamw_step(params: &mut ParamStore, cfg: &AdamWConfig) {
    for (_, e) in params.params_mut() {
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let value = e.value.data_mut();
        let (m, v, g) = (e.m.data_mut(), e.v.data_mut(), e.grad.data_mut());
        for i in 0..value.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] = value[i] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            g[i] = 0.0;
        }
    }
}
