use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be frozen.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("adam lr must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update using the gradients currently held in `params`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, config: &AdamConfig) -> Result<()> {
    for id in params.ids() {
        if !params.grad(id).is_finite() {
            return Err(Error::NonfiniteGradient(params.name(id).to_string()));
        }
    }
    let (step, slots) = params.adam_buffers();
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for slot in slots {
        let values = slot.value.as_mut_slice();
        let m = slot.first_moment.as_mut_slice();
        let v = slot.second_moment.as_mut_slice();
        for (((x, &g), m), v) in values.iter_mut().zip(slot.grad.as_slice()).zip(m).zip(v) {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
