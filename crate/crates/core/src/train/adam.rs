use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-8,
        }
    }
}

/// First and second moment buffers for every trainable tensor of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        AdamState {
            ids,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor from its accumulated gradient (missing
    /// gradients count as zero), then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            let t = store.get_mut(id);
            if t.len() != self.m[k].len() {
                return Err(Error::contract("parameter shapes changed under the optimiser"));
            }
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            adam_update(t.data_mut(), &g, &mut self.m[k], &mut self.v[k], self.step, lr, cfg)?;
            t.zero_grad();
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `w` in place; `step` counts from 1.
pub fn adam_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if g.len() != w.len() || m.len() != w.len() || v.len() != w.len() {
        return Err(Error::contract(format!(
            "adam buffers disagree: weights {}, grads {}, moments {}/{}",
            w.len(),
            g.len(),
            m.len(),
            v.len()
        )));
    }
    if step == 0 {
        return Err(Error::contract("adam step counter starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..w.len() {
        let gi = g[i] + cfg.weight_decay * w[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}
