use serde::{Deserialize, Serialize};

use crate::model::{Grads, ParamGroup, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in updates; 0 disables it.
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 50,
            clip_norm: 1.0,
        }
    }
}

/// Adam restricted to a set of parameter groups.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    groups: Vec<ParamGroup>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, groups: &[ParamGroup]) -> Self {
        Self {
            cfg,
            groups: groups.to_vec(),
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update from `grads`; parameters outside the optimiser's groups
    /// are never written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c = self.cfg;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let warm = if c.warmup > 0 {
            (self.t as f64 / c.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let lr = c.lr * warm;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            if !self.groups.contains(&store.param(id).group) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let p = store.value_mut(id);
            for i in 0..g.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
