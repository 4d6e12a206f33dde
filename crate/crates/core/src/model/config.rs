use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network and diffusion hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub context_len: usize,
    pub query_count: usize,
    pub diff_dim: usize,
    pub chunk_horizon: usize,
    pub connector_layers: usize,
    pub connector_heads: usize,
    pub dit_layers: usize,
    pub dit_heads: usize,
    /// Observation grid side; must match the simulator's raster.
    pub grid: usize,
    pub channels: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Divisors mapping the six pose deltas to roughly unit scale for the
    /// diffusion head. The gripper maps `g ↦ 2g − 1`.
    pub action_scale: [f64; 6],
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 128,
            context_len: 512,
            query_count: 8,
            diff_dim: 64,
            chunk_horizon: 8,
            connector_layers: 4,
            connector_heads: 4,
            dit_layers: 4,
            dit_heads: 4,
            grid: 16,
            channels: crate::simenv::SimConfig::CHANNELS,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
            action_scale: [0.05, 0.05, 0.05, 0.2, 0.2, 0.2],
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.connector_heads == 0 || self.model_dim % self.connector_heads != 0 {
            return bad("model_dim must be a multiple of connector_heads");
        }
        if self.diff_dim == 0 || self.dit_heads == 0 || self.diff_dim % self.dit_heads != 0 {
            return bad("diff_dim must be a positive multiple of dit_heads");
        }
        if self.model_dim % 4 != 0 || self.diff_dim % 2 != 0 {
            return bad("model_dim must be a multiple of 4 and diff_dim even");
        }
        if self.query_count == 0 {
            return bad("query_count must be at least 1");
        }
        if self.chunk_horizon == 0 {
            return bad("chunk_horizon must be at least 1");
        }
        if self.layers == 0 || self.connector_layers == 0 || self.dit_layers == 0 {
            return bad("layer counts must be positive");
        }
        if self.grid == 0 || self.channels == 0 {
            return bad("grid and channels must be positive");
        }
        if self.context_len < self.grid * self.grid + self.query_count + 4 {
            return bad("context_len too small for the visual tokens and queries");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive");
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1");
        }
        if self.action_scale.iter().any(|s| !(*s > 0.0)) {
            return bad("action_scale entries must be positive");
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid * self.grid
    }
}
