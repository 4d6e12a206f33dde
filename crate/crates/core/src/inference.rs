//! Reasoning-guided action generation: decode a short reasoning string,
//! build the diffusion condition in one forward pass, then denoise an
//! action chunk.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::ReasoningFormat;
use crate::model::{
    reconstruct_with, DiffusionSchedule, Graph, Model, ModelError, Tensor, NO_REASONING,
};
use crate::simenv::Observation;
use crate::training::sample_noise;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const COMPACT_TOKEN_BUDGET: usize = 8;
pub const CHAIN_TOKEN_BUDGET: usize = 64;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

/// What the policy reasons about before acting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasoningMode {
    Compact,
    IntentionChain,
    /// No reasoning; the condition is built from the prompt alone.
    None,
}

impl ReasoningMode {
    pub fn budget(&self) -> usize {
        match self {
            ReasoningMode::Compact => COMPACT_TOKEN_BUDGET,
            ReasoningMode::IntentionChain => CHAIN_TOKEN_BUDGET,
            ReasoningMode::None => 0,
        }
    }

    pub fn format(&self) -> Option<ReasoningFormat> {
        match self {
            ReasoningMode::Compact => Some(ReasoningFormat::Compact),
            ReasoningMode::IntentionChain => Some(ReasoningFormat::Intention),
            ReasoningMode::None => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ReasoningMode::Compact => "compact",
            ReasoningMode::IntentionChain => "intention-chain",
            ReasoningMode::None => "none",
        }
    }

    /// The mode matching a checkpoint's conditioning.
    pub fn for_conditioning(c: Option<ReasoningFormat>) -> Self {
        match c {
            Some(ReasoningFormat::Intention) => ReasoningMode::IntentionChain,
            Some(_) => ReasoningMode::Compact,
            None => ReasoningMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reasoning {
    pub text: String,
    /// Generated ids, including EOS when it was produced.
    pub tokens: Vec<u32>,
    /// The budget ran out before EOS; the text is still usable.
    pub budget_exhausted: bool,
    pub seconds: f64,
}

/// Greedy decoding of the reasoning for `mode` under its token budget.
pub fn infer_reasoning(
    model: &Model,
    obs: &Observation,
    instruction: &str,
    mode: ReasoningMode,
) -> Result<Reasoning, ModelError> {
    let start = Instant::now();
    let Some(format) = mode.format() else {
        return Ok(Reasoning {
            text: String::new(),
            tokens: Vec::new(),
            budget_exhausted: false,
            seconds: start.elapsed().as_secs_f64(),
        });
    };
    let prompt = model.prompt_tokens(format.tag(), instruction)?;
    let gen = model.vlm_generate(obs, &prompt, mode.budget())?;
    if !gen.hit_eos {
        log::debug!("reasoning budget of {} exhausted", mode.budget());
    }
    Ok(Reasoning {
        text: model.vocab.detokenize(&gen.tokens),
        tokens: gen.tokens,
        budget_exhausted: !gen.hit_eos,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Condition sequence `[prompt; reasoning; EOS]`, or the no-reasoning
/// prompt when `mode` is [`ReasoningMode::None`].
pub fn condition_sequence(
    model: &Model,
    instruction: &str,
    mode: ReasoningMode,
    reasoning_tokens: &[u32],
) -> Result<Vec<u32>, ModelError> {
    let Some(format) = mode.format() else {
        return model.prompt_tokens(NO_REASONING, instruction);
    };
    let mut t = model.prompt_tokens(format.tag(), instruction)?;
    t.extend_from_slice(reasoning_tokens);
    if t.last() != Some(&model.vocab.eos()) {
        t.push(model.vocab.eos());
    }
    Ok(t)
}

/// `c = f_con(z)` from a single forward pass over the full sequence.
pub fn build_condition(
    model: &Model,
    obs: &Observation,
    instruction: &str,
    mode: ReasoningMode,
    reasoning: &str,
) -> Result<Tensor, ModelError> {
    let ids = if mode == ReasoningMode::None {
        Vec::new()
    } else {
        model.vocab.tokenize(reasoning)?
    };
    let tokens = condition_sequence(model, instruction, mode, &ids)?;
    condition_from_tokens(model, obs, &tokens)
}

fn condition_from_tokens(
    model: &Model,
    obs: &Observation,
    tokens: &[u32],
) -> Result<Tensor, ModelError> {
    let mut g = Graph::with_trainable(&model.params, &[]);
    let c = model.condition(&mut g, obs, tokens, true)?;
    Ok(g.value(c).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Explicit decreasing timesteps; overrides `num_steps` when set.
    pub timesteps: Option<Vec<usize>>,
    pub eta: f64,
    /// Bound on `|Â_0|` in normalised units; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 10,
            timesteps: None,
            eta: 0.0,
            clip: Some(1.0),
        }
    }
}

impl SamplerConfig {
    /// Strictly decreasing timesteps in `[1, T]`, starting at `T`.
    pub fn timesteps(&self, t: usize) -> Result<Vec<usize>, InferError> {
        let bad = |m: String| Err(InferError::InvalidSampler(m));
        let ks = match &self.timesteps {
            Some(ks) => ks.clone(),
            None => {
                let s = self.num_steps;
                if s == 0 || s > t {
                    return bad(format!("num_steps {s} outside 1..={t}"));
                }
                (0..s)
                    .map(|i| t - ((i * t) as f64 / s as f64).round() as usize)
                    .collect()
            }
        };
        if ks.is_empty() {
            return bad("empty timestep list".into());
        }
        if ks.iter().any(|&k| k == 0 || k > t) {
            return bad(format!("timesteps must lie in 1..={t}"));
        }
        if ks.windows(2).any(|w| w[1] >= w[0]) {
            return bad("timesteps must be strictly decreasing".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        Ok(ks)
    }
}

/// Anything that predicts the noise in a normalised chunk at step `k`.
pub trait NoisePredictor {
    fn predict(&self, a_k: &Tensor, k: usize) -> Result<Tensor, ModelError>;
}

/// The model's denoiser with a fixed condition.
pub struct ConditionedDenoiser<'a> {
    pub model: &'a Model,
    pub condition: &'a Tensor,
}

impl NoisePredictor for ConditionedDenoiser<'_> {
    fn predict(&self, a_k: &Tensor, k: usize) -> Result<Tensor, ModelError> {
        let mut g = Graph::with_trainable(&self.model.params, &[]);
        let c = g.constant(self.condition.clone());
        let e = self.model.dit_denoise(&mut g, a_k, k, c)?;
        Ok(g.value(e).clone())
    }
}

/// Iterative denoising from `x` (the sample at the first timestep) down to
/// `Â_0`, in normalised units. With `eta = 0` the update is deterministic:
/// `A ← sqrt(ᾱ_prev)·Â_0 + sqrt(1 − ᾱ_prev)·ε̂`.
pub fn denoise<P: NoisePredictor>(
    predictor: &P,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
    mut x: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, InferError> {
    let ks = sampler.timesteps(schedule.steps)?;
    let mut x0 = x.clone();
    for (i, &k) in ks.iter().enumerate() {
        let ab = schedule.alpha_bar[k];
        let mut eps = predictor.predict(&x, k)?;
        x0 = reconstruct_with(&x, ab, &eps);
        if let Some(b) = sampler.clip {
            for v in &mut x0.data {
                *v = v.clamp(-b, b);
            }
            // Keep ε̂ consistent with the clipped estimate.
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            if sn > 0.0 {
                for ((e, xv), x0v) in eps.data.iter_mut().zip(&x.data).zip(&x0.data) {
                    *e = (xv - sa * x0v) / sn;
                }
            }
        }
        let ab_prev = ks.get(i + 1).map_or(1.0, |&kp| schedule.alpha_bar[kp]);
        let sigma = sampler.eta
            * ((1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt()
            * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            Some(sample_noise(x.rows, x.cols, rng))
        } else {
            None
        };
        for j in 0..x.data.len() {
            let mut v = ab_prev.sqrt() * x0.data[j] + dir * eps.data[j];
            if let Some(n) = &noise {
                v += sigma * n.data[j];
            }
            x.data[j] = v;
        }
    }
    Ok(x0)
}

/// Samples an action chunk for condition `c`, starting from seeded
/// Gaussian noise, and maps it back to environment units.
pub fn sample_actions(
    model: &Model,
    c: &Tensor,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<[f64; 7]>, InferError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sample_noise(model.config.chunk_horizon, 7, &mut rng);
    let den = ConditionedDenoiser {
        model,
        condition: c,
    };
    let x0 = denoise(&den, &model.schedule, sampler, x, &mut rng)?;
    Ok(model.denormalize_chunk(&x0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub reasoning_seconds: f64,
    pub condition_seconds: f64,
    pub denoise_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub reasoning_text: String,
    pub reasoning_tokens: usize,
    pub budget_exhausted: bool,
    pub action_chunk: Vec<[f64; 7]>,
    pub timing: Timing,
}

/// Reasoning, condition and sampling in sequence for one decision.
pub fn policy_step(
    model: &Model,
    obs: &Observation,
    instruction: &str,
    mode: ReasoningMode,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PolicyOutput, InferError> {
    let start = Instant::now();
    let r = infer_reasoning(model, obs, instruction, mode)?;
    let t1 = Instant::now();
    let tokens = condition_sequence(model, instruction, mode, &r.tokens)?;
    let c = condition_from_tokens(model, obs, &tokens)?;
    let t2 = Instant::now();
    let chunk = sample_actions(model, &c, sampler, seed)?;
    let t3 = Instant::now();
    Ok(PolicyOutput {
        reasoning_text: r.text,
        reasoning_tokens: r.tokens.len(),
        budget_exhausted: r.budget_exhausted,
        action_chunk: chunk,
        timing: Timing {
            reasoning_seconds: (t1 - start).as_secs_f64(),
            condition_seconds: (t2 - t1).as_secs_f64(),
            denoise_seconds: (t3 - t2).as_secs_f64(),
            total_seconds: (t3 - start).as_secs_f64(),
        },
    })
}

/// One replanning tick of a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub episode: String,
    pub step: usize,
    pub reasoning_text: String,
    /// Actions executed from the predicted chunk.
    pub actions: Vec<[f64; 7]>,
    pub timing: Timing,
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<(), InferError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| InferError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| InferError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, InferError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| InferError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| InferError::Io(format!("line {}: {e}", n + 1)))?;
        if r.schema_version != TRACE_SCHEMA_VERSION {
            return Err(InferError::Io(format!(
                "line {}: unsupported schema_version {}",
                n + 1,
                r.schema_version
            )));
        }
        out.push(r);
    }
    Ok(out)
}
