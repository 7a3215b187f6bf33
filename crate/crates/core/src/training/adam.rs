use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, GradientMap};
use crate::model::ModelParams;

use super::TrainError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per tensor, indexed like the model's tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array> = params.tensors().iter().map(|t| Array::zeros(t.value.shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Euclidean norm over the gradients of trainable parameters.
pub fn global_norm(params: &ModelParams, grads: &GradientMap) -> f64 {
    grads
        .iter()
        .filter(|(id, _)| !params.is_frozen(**id))
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(params: &ModelParams, grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = global_norm(params, grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// Checks every trainable gradient for NaN or infinity.
pub fn check_finite(params: &ModelParams, grads: &GradientMap, step: u64) -> Result<(), TrainError> {
    for (id, g) in grads {
        if !params.is_frozen(*id) && !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: params.tensor(*id).name.clone(),
                step,
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Frozen parameters and parameters without
/// a gradient are left untouched, moments included.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientMap,
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    check_finite(params, grads, state.t + 1)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (id, g) in grads {
        if params.is_frozen(*id) {
            continue;
        }
        let i = id.0 as usize;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.value_mut(*id).data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
