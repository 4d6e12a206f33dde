//! The network: vocabulary, decoder-only backbone with learnable action
//! queries, connector, diffusion transformer denoiser and noise schedule.
//!
//! All parameters live in one [`ParamStore`]; forward passes are recorded
//! on a [`Graph`] so the same code serves training and inference.

mod checkpoint;
mod config;
mod graph;
mod params;
mod schedule;
mod tensor;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use graph::{Graph, Mask, Var};
pub use params::{filled, normal_tensor, Grads, Param, ParamGroup, ParamId, ParamStore};
pub use schedule::{add_noise, make_schedule, reconstruct_with, reconstruct_x0, DiffusionSchedule};
pub use tensor::{gemm, Mat, MatMut, Tensor};
pub use vocab::{Vocab, BOS, EOS, MAX_VOCAB, NO_REASONING, PAD, SEP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::simenv::Observation;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("sequence of {len} positions exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("need {needed} positions, sequence has {have}")]
    TooFewPositions { needed: usize, have: usize },
    #[error("timestep {0} outside 1..={1}")]
    TimestepOutOfRange(usize, usize),
    #[error("bad schedule range: {0}")]
    BadRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Emitted ids, including the end token when one was produced.
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub schedule: DiffusionSchedule,
}

/// `pe[2i] = sin(pos / 10000^(2i/dim))`, `pe[2i+1] = cos(...)`.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Row/column sinusoidal codes for a `grid × grid` raster, `grid² × dim`.
pub fn grid_encoding(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(grid * grid, dim);
    for r in 0..grid {
        for c in 0..grid {
            let row = out.row_mut(r * grid + c);
            row[..half].copy_from_slice(&sinusoid(r as f64, half));
            row[half..].copy_from_slice(&sinusoid(c as f64, dim - half));
        }
    }
    out
}

fn add_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    group: ParamGroup,
    std: f64,
    depth: usize,
    rng: &mut ChaCha8Rng,
) {
    let out_std = std / (2.0 * depth as f64).sqrt();
    let mut add = |name: &str, t: Tensor| {
        store.add(format!("{prefix}.{name}"), group, t);
    };
    add("ln1.g", filled(1, dim, 1.0));
    add("ln1.b", filled(1, dim, 0.0));
    for w in ["wq", "wk", "wv"] {
        add(w, normal_tensor(dim, dim, std, rng));
    }
    add("wo", normal_tensor(dim, dim, out_std, rng));
    for b in ["bq", "bk", "bv", "bo"] {
        add(b, filled(1, dim, 0.0));
    }
    add("ln2.g", filled(1, dim, 1.0));
    add("ln2.b", filled(1, dim, 0.0));
    add("w1", normal_tensor(dim, 4 * dim, std, rng));
    add("b1", filled(1, 4 * dim, 0.0));
    add("w2", normal_tensor(4 * dim, dim, out_std, rng));
    add("b2", filled(1, dim, 0.0));
}

fn add_norm(store: &mut ParamStore, prefix: &str, dim: usize, group: ParamGroup) {
    store.add(format!("{prefix}.g"), group, filled(1, dim, 1.0));
    store.add(format!("{prefix}.b"), group, filled(1, dim, 0.0));
}

/// Pre-norm transformer block.
pub fn block(g: &mut Graph, prefix: &str, x: Var, heads: usize, mask: Mask) -> Var {
    block_with_past(g, prefix, x, heads, mask, None).0
}

/// Keys and values of earlier positions, per backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub len: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

/// A block whose new rows also attend to cached keys and values; returns
/// the output and the full key/value rows (past followed by new).
fn block_with_past(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Mask,
    past: Option<&(Tensor, Tensor)>,
) -> (Var, Var, Var) {
    let p = |g: &mut Graph, n: &str| g.p(&format!("{prefix}.{n}"));
    let (g1, b1) = (p(g, "ln1.g"), p(g, "ln1.b"));
    let h = g.layer_norm(x, g1, b1);
    let (wq, bq, wk, bk, wv, bv) = (
        p(g, "wq"),
        p(g, "bq"),
        p(g, "wk"),
        p(g, "bk"),
        p(g, "wv"),
        p(g, "bv"),
    );
    let q = g.linear(h, wq, Some(bq));
    let mut k = g.linear(h, wk, Some(bk));
    let mut v = g.linear(h, wv, Some(bv));
    if let Some((pk, pv)) = past {
        let (pk, pv) = (g.constant(pk.clone()), g.constant(pv.clone()));
        k = g.concat_rows(&[pk, k]);
        v = g.concat_rows(&[pv, v]);
    }
    let a = g.attention(q, k, v, heads, mask);
    let (wo, bo) = (p(g, "wo"), p(g, "bo"));
    let o = g.linear(a, wo, Some(bo));
    let x = g.add(x, o);
    let (g2, b2) = (p(g, "ln2.g"), p(g, "ln2.b"));
    let h = g.layer_norm(x, g2, b2);
    let (w1, bb1, w2, bb2) = (p(g, "w1"), p(g, "b1"), p(g, "w2"), p(g, "b2"));
    let f = g.linear(h, w1, Some(bb1));
    let f = g.gelu(f);
    let f = g.linear(f, w2, Some(bb2));
    (g.add(x, f), k, v)
}

fn norm(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let gamma = g.p(&format!("{prefix}.g"));
    let beta = g.p(&format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta)
}

impl Model {
    /// Fresh model with seeded random initialisation. The denoiser's output
    /// layer starts at zero so the initial noise prediction is zero.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        config.validate()?;
        let schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dd, std) = (config.model_dim, config.diff_dim, config.init_std);
        let mut s = ParamStore::new();
        use ParamGroup::*;
        s.add("vis.w", Backbone, normal_tensor(config.channels, d, std, &mut rng));
        s.add("vis.b", Backbone, filled(1, d, 0.0));
        s.add("tok.emb", Backbone, normal_tensor(vocab.len(), d, std, &mut rng));
        for l in 0..config.layers {
            add_block(&mut s, &format!("bb.{l}"), d, Backbone, std, config.layers, &mut rng);
        }
        add_norm(&mut s, "bb.lnf", d, Backbone);
        s.add("head.w", Backbone, normal_tensor(d, vocab.len(), std, &mut rng));
        s.add("head.b", Backbone, filled(1, vocab.len(), 0.0));

        s.add("queries", Queries, normal_tensor(config.query_count, d, std, &mut rng));

        for l in 0..config.connector_layers {
            let depth = config.connector_layers;
            add_block(&mut s, &format!("con.{l}"), d, Connector, std, depth, &mut rng);
        }
        add_norm(&mut s, "con.lnf", d, Connector);
        s.add("con.proj.w", Connector, normal_tensor(d, dd, std, &mut rng));
        s.add("con.proj.b", Connector, filled(1, dd, 0.0));

        s.add("dit.in.w", Dit, normal_tensor(7, dd, std, &mut rng));
        s.add("dit.in.b", Dit, filled(1, dd, 0.0));
        s.add("dit.pos", Dit, normal_tensor(config.chunk_horizon, dd, std, &mut rng));
        s.add("dit.t1.w", Dit, normal_tensor(dd, dd, std, &mut rng));
        s.add("dit.t1.b", Dit, filled(1, dd, 0.0));
        s.add("dit.t2.w", Dit, normal_tensor(dd, dd, std, &mut rng));
        s.add("dit.t2.b", Dit, filled(1, dd, 0.0));
        for l in 0..config.dit_layers {
            add_block(&mut s, &format!("dit.{l}"), dd, Dit, std, config.dit_layers, &mut rng);
        }
        add_norm(&mut s, "dit.lnf", dd, Dit);
        s.add("dit.out.w", Dit, filled(dd, 7, 0.0));
        s.add("dit.out.b", Dit, filled(1, 7, 0.0));
        Ok(Self {
            config,
            vocab,
            params: s,
            schedule,
        })
    }

    /// `[BOS, tag, instruction…, SEP]`.
    pub fn prompt_tokens(&self, tag: &str, instruction: &str) -> Result<Vec<u32>, ModelError> {
        let mut ids = vec![self.vocab.bos(), self.vocab.id(tag)?];
        ids.extend(self.vocab.tokenize_words(instruction)?);
        ids.push(self.vocab.sep());
        Ok(ids)
    }

    /// Total positions for a sequence with `text_len` text tokens.
    pub fn sequence_len(&self, text_len: usize, with_queries: bool) -> usize {
        self.config.visual_tokens()
            + text_len
            + if with_queries {
                self.config.query_count
            } else {
                0
            }
    }

    /// Per-cell linear map of the raster plus a fixed 2-D positional code.
    pub fn encode_observation(&self, g: &mut Graph, obs: &Observation) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if obs.grid != cfg.grid || obs.channels != cfg.channels || !obs.is_valid() {
            return Err(ModelError::ShapeMismatch(format!(
                "observation {}x{}x{} vs model grid {} with {} channels",
                obs.grid, obs.grid, obs.channels, cfg.grid, cfg.channels
            )));
        }
        let cells = g.constant(Tensor::from_vec(
            cfg.visual_tokens(),
            cfg.channels,
            obs.data.clone(),
        ));
        let (w, b) = (g.p("vis.w"), g.p("vis.b"));
        let x = g.linear(cells, w, Some(b));
        let pe = g.constant(grid_encoding(cfg.grid, cfg.model_dim));
        Ok(g.add(x, pe))
    }

    /// Token embeddings plus the 1-D positional code, for text starting at
    /// text index `start`.
    fn embed_tokens(&self, g: &mut Graph, tokens: &[u32], start: usize) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(ModelError::UnknownWord(format!("<id {bad}>")));
        }
        let table = g.p("tok.emb");
        let emb = g.embedding(table, &ids);
        let offset = cfg.visual_tokens() + start;
        let mut pe = Tensor::zeros(ids.len(), cfg.model_dim);
        for i in 0..ids.len() {
            pe.row_mut(i)
                .copy_from_slice(&sinusoid((offset + i) as f64, cfg.model_dim));
        }
        let pe = g.constant(pe);
        Ok(g.add(emb, pe))
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len,
                max: self.config.context_len,
            });
        }
        Ok(())
    }

    /// Runs `x` (new rows) through the backbone after the cached rows.
    /// Returns the normalised hidden state of the new rows and the grown
    /// cache.
    fn backbone(&self, g: &mut Graph, x: Var, past: Option<&KvCache>) -> (Var, KvCache) {
        let cfg = &self.config;
        let offset = past.map_or(0, |c| c.len);
        let mut x = x;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (y, k, v) = block_with_past(
                g,
                &format!("bb.{l}"),
                x,
                cfg.heads,
                Mask::Causal { offset },
                past.map(|c| &c.layers[l]),
            );
            layers.push((g.value(k).clone(), g.value(v).clone()));
            x = y;
        }
        let len = offset + g.value(x).rows;
        (norm(g, "bb.lnf", x), KvCache { len, layers })
    }

    fn backbone_full(&self, g: &mut Graph, x: Var) -> Var {
        let cfg = &self.config;
        let mut x = x;
        for l in 0..cfg.layers {
            x = block(g, &format!("bb.{l}"), x, cfg.heads, Mask::Causal { offset: 0 });
        }
        norm(g, "bb.lnf", x)
    }

    /// Causal forward pass over `[visual; tokens; Q?]`, returning the final
    /// normalised hidden state of every position.
    pub fn vlm_forward(
        &self,
        g: &mut Graph,
        obs: &Observation,
        tokens: &[u32],
        with_queries: bool,
    ) -> Result<Var, ModelError> {
        self.check_len(self.sequence_len(tokens.len(), with_queries))?;
        let mut parts = vec![self.encode_observation(g, obs)?];
        if !tokens.is_empty() {
            parts.push(self.embed_tokens(g, tokens, 0)?);
        }
        if with_queries {
            parts.push(g.p("queries"));
        }
        let x = g.concat_rows(&parts);
        Ok(self.backbone_full(g, x))
    }

    /// Keys and values of `[visual; tokens]` for later rows to attend to,
    /// plus the hidden state of the last prefix position.
    pub fn prefix_cache(&self, obs: &Observation, tokens: &[u32]) -> Result<(KvCache, Tensor), ModelError> {
        self.check_len(self.sequence_len(tokens.len(), false))?;
        let mut g = Graph::with_trainable(&self.params, &[]);
        let mut parts = vec![self.encode_observation(&mut g, obs)?];
        if !tokens.is_empty() {
            parts.push(self.embed_tokens(&mut g, tokens, 0)?);
        }
        let x = g.concat_rows(&parts);
        let (h, cache) = self.backbone(&mut g, x, None);
        let rows = g.value(h).rows;
        let last = g.slice_rows(h, rows - 1, 1);
        Ok((cache, g.value(last).clone()))
    }

    /// Query outputs `z` given a cached `[visual; tokens]` prefix; equal to
    /// the query rows of [`Model::vlm_forward`] on the full sequence.
    pub fn cached_queries(&self, g: &mut Graph, cache: &KvCache) -> Result<Var, ModelError> {
        self.check_len(cache.len + self.config.query_count)?;
        let q = g.p("queries");
        Ok(self.backbone(g, q, Some(cache)).0)
    }

    /// Vocabulary logits for `len` hidden rows starting at `start`.
    pub fn logits(&self, g: &mut Graph, hidden: Var, start: usize, len: usize) -> Var {
        let rows = g.slice_rows(hidden, start, len);
        let (w, b) = (g.p("head.w"), g.p("head.b"));
        g.linear(rows, w, Some(b))
    }

    /// Greedy decoding of up to `max_len` tokens after `prompt`. Earlier
    /// positions are cached, so each new token costs one row.
    pub fn vlm_generate(
        &self,
        obs: &Observation,
        prompt: &[u32],
        max_len: usize,
    ) -> Result<Generation, ModelError> {
        if max_len == 0 {
            return Err(ModelError::InvalidConfig("max_len must be at least 1".into()));
        }
        let (mut cache, mut last) = self.prefix_cache(obs, prompt)?;
        let mut out = Vec::new();
        let eos = self.vocab.eos();
        loop {
            let mut g = Graph::with_trainable(&self.params, &[]);
            let h = g.constant(last);
            let logits = self.logits(&mut g, h, 0, 1);
            let row = &g.value(logits).data;
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            out.push(tok);
            if tok == eos || out.len() == max_len {
                return Ok(Generation {
                    hit_eos: tok == eos,
                    tokens: out,
                });
            }
            let pos = prompt.len() + out.len() - 1;
            self.check_len(self.sequence_len(pos + 1, false))?;
            let x = self.embed_tokens(&mut g, &[tok], pos)?;
            let (h, next) = self.backbone(&mut g, x, Some(&cache));
            cache = next;
            last = g.value(h).clone();
        }
    }

    /// The last `n` hidden rows (the query outputs `z`).
    pub fn extract_queries(&self, g: &mut Graph, hidden: Var, n: usize) -> Result<Var, ModelError> {
        let have = g.value(hidden).rows;
        if n == 0 || n > have {
            return Err(ModelError::TooFewPositions { needed: n, have });
        }
        Ok(g.slice_rows(hidden, have - n, n))
    }

    /// Bidirectional blocks over the query outputs, then `D → D_diff`.
    pub fn connector_forward(&self, g: &mut Graph, z: Var) -> Var {
        let cfg = &self.config;
        let mut x = z;
        for l in 0..cfg.connector_layers {
            x = block(g, &format!("con.{l}"), x, cfg.connector_heads, Mask::Full);
        }
        let x = norm(g, "con.lnf", x);
        let (w, b) = (g.p("con.proj.w"), g.p("con.proj.b"));
        g.linear(x, w, Some(b))
    }

    /// Diffusion condition `c` for a sequence of text tokens. With
    /// `detach`, no gradient flows from the connector into the backbone or
    /// the queries.
    pub fn condition(
        &self,
        g: &mut Graph,
        obs: &Observation,
        tokens: &[u32],
        detach: bool,
    ) -> Result<Var, ModelError> {
        let h = self.vlm_forward(g, obs, tokens, true)?;
        let z = self.extract_queries(g, h, self.config.query_count)?;
        let z = if detach { g.detach(z) } else { z };
        Ok(self.connector_forward(g, z))
    }

    /// Noise prediction for a normalised noisy chunk `a_k` (H×7).
    pub fn dit_denoise(
        &self,
        g: &mut Graph,
        a_k: &Tensor,
        k: usize,
        c: Var,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        self.schedule.check_timestep(k)?;
        if a_k.shape() != (cfg.chunk_horizon, 7) {
            return Err(ModelError::ShapeMismatch(format!(
                "action chunk {:?}, expected ({}, 7)",
                a_k.shape(),
                cfg.chunk_horizon
            )));
        }
        let c_rows = g.value(c).rows;
        let a = g.constant(a_k.clone());
        let (w, b) = (g.p("dit.in.w"), g.p("dit.in.b"));
        let x = g.linear(a, w, Some(b));
        let pos = g.p("dit.pos");
        let x = g.add(x, pos);
        let t = g.constant(Tensor::from_vec(1, cfg.diff_dim, sinusoid(k as f64, cfg.diff_dim)));
        let (w1, b1, w2, b2) = (g.p("dit.t1.w"), g.p("dit.t1.b"), g.p("dit.t2.w"), g.p("dit.t2.b"));
        let t = g.linear(t, w1, Some(b1));
        let t = g.gelu(t);
        let t = g.linear(t, w2, Some(b2));
        let x = g.add_row(x, t);
        let mut x = g.concat_rows(&[c, x]);
        for l in 0..cfg.dit_layers {
            x = block(g, &format!("dit.{l}"), x, cfg.dit_heads, Mask::Full);
        }
        let x = norm(g, "dit.lnf", x);
        let x = g.slice_rows(x, c_rows, cfg.chunk_horizon);
        let (w, b) = (g.p("dit.out.w"), g.p("dit.out.b"));
        Ok(g.linear(x, w, Some(b)))
    }

    /// Environment deltas to the diffusion head's scale.
    pub fn normalize_chunk(&self, chunk: &[[f64; 7]]) -> Tensor {
        let s = &self.config.action_scale;
        let mut out = Tensor::zeros(chunk.len(), 7);
        for (r, a) in chunk.iter().enumerate() {
            let row = out.row_mut(r);
            for i in 0..6 {
                row[i] = a[i] / s[i];
            }
            row[6] = 2.0 * a[6] - 1.0;
        }
        out
    }

    pub fn denormalize_chunk(&self, t: &Tensor) -> Vec<[f64; 7]> {
        let s = &self.config.action_scale;
        (0..t.rows)
            .map(|r| {
                let row = t.row(r);
                let mut a = [0.0; 7];
                for i in 0..6 {
                    a[i] = row[i] * s[i];
                }
                a[6] = ((row[6] + 1.0) / 2.0).clamp(0.0, 1.0);
                a
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
