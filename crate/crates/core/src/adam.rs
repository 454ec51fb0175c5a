use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MilModel, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient. Applied through the loss gradient, not by [`adam_step`].
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(model: &MilModel, config: AdamConfig) -> Self {
        AdamState { step: 0, m: Params::zeros(&model.dims), v: Params::zeros(&model.dims), config }
    }
}

/// One bias-corrected Adam update of every tensor.
pub fn adam_step(model: &mut MilModel, grads: &Params, state: &mut AdamState) -> Result<()> {
    if !model.params.same_shape(grads) || !model.params.same_shape(&state.m) || !model.params.same_shape(&state.v) {
        return Err(Error::Shape("gradient or optimizer state does not match model".into()));
    }
    let AdamConfig { lr, beta1, beta2, eps, .. } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let params = model.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        let (Some(p), Some(g), Some(m), Some(v)) = (p.as_slice_mut(), g.as_slice(), m.as_slice_mut(), v.as_slice_mut())
        else {
            return Err(Error::Shape("optimizer tensors must be contiguous".into()));
        };
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
