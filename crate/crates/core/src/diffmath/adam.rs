use super::graph::Grads;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Moment accumulators for every slot of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.slots().iter().map(|s| vec![0.0; s.len()]).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, slot: usize) -> &[f64] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[f64] {
        &self.v[slot]
    }
}

/// One Adam update with decoupled weight decay. Frozen slots are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} slots", params.len()),
            format!("{} moments / {} grads", state.m.len(), grads.len()),
        ));
    }
    for id in params.ids() {
        let slot = params.slot(id);
        if !slot.trainable {
            continue;
        }
        let Some(g) = grads.get(id) else {
            return Err(Error::Invalid(format!("missing gradient for trainable slot {}", slot.name)));
        };
        if g.len() != slot.len() || state.m[id.index()].len() != slot.len() {
            return Err(Error::shape(
                "adam_step",
                slot.shape_string(),
                format!("gradient of length {}", g.len()),
            ));
        }
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        if !params.slot(id).trainable {
            continue;
        }
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let data = &mut params.slot_mut(id).data;
        for k in 0..data.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            data[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[k]);
        }
    }
    Ok(())
}
