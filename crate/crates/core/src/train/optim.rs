use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Global gradient-norm clip over the optimized set; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

/// Adam over a fixed subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(ids: Vec<ParamId>, store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            config,
            ids,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let c = self.config;
        let norm = self
            .ids
            .iter()
            .flat_map(|&id| grads.get(id).iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (slot, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let w = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..w.len() {
                let gi = g[i] * clip + c.weight_decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        norm
    }
}
