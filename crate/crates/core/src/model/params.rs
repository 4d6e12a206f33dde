//! Named parameter storage and gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;

/// Which part of the network a parameter belongs to; training stages
/// select trainable groups by this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Queries,
    Connector,
    Dit,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Backbone, Self::Queries, Self::Connector, Self::Dit];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, in insertion order.
    pub fn hash(&self, group: Option<ParamGroup>) -> String {
        let mut h = Sha256::new();
        for p in self
            .params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
        {
            h.update(p.name.as_bytes());
            h.update((p.value.rows as u64).to_le_bytes());
            h.update((p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn normal_tensor<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::from_vec(rows, cols, vec![v; rows * cols])
}

/// Per-parameter gradient accumulators, absent until first touched.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }
}
