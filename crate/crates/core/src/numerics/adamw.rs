use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Rebuilds optimizer state from persisted moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: ParamSet, v: ParamSet) -> Result<Self> {
        m.check_same_layout(&v)?;
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moments(&self) -> &ParamSet {
        &self.v
    }

    /// One update. Gradients are validated up front so a non-finite entry
    /// leaves both parameters and state untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        params.check_same_layout(&self.m)?;
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adamw: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    found: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, (m, v)), g) in tensors.zip(moments).zip(grads) {
            update_one(p, m, v, g, decay, lr, beta1, beta2, eps, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_one(
    p: &mut Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    g: &[f64],
    decay: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
    for (((pv, mv), vv), &gv) in it.zip(g) {
        *pv *= decay;
        *mv = beta1 * *mv + (1.0 - beta1) * gv;
        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        let mhat = *mv / bc1;
        let vhat = *vv / bc2;
        *pv -= lr * mhat / (vhat.sqrt() + eps);
    }
}
