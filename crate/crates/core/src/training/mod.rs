//! Two-stage curriculum: cross-entropy on reasoning text, then the
//! diffusion loss on action chunks with the backbone held fixed.

mod optim;

pub use optim::{Adam, AdamConfig};

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{ReasoningFormat, ReasoningSample, SampleSplit};
use crate::model::{
    add_noise, Checkpoint, Grads, Graph, KvCache, Model, ModelConfig, ModelError, ParamGroup, StageTag,
    Tensor, Var, Vocab, NO_REASONING,
};
use crate::simenv::{Observation, TaskBank, TrajectoryRecord};

pub const LOSS_LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage 2 needs a stage-1 checkpoint")]
    MissingStage1Checkpoint,
    #[error("non-finite loss at {stage:?} step {step}")]
    NonFiniteLoss { stage: Stage, step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training data: {0}")]
    NoTrainingData(String),
    #[error("sample references unknown step {traj_id}@{step}")]
    UnknownStep { traj_id: String, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Which parameters the diffusion loss may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Queries, connector and denoiser; the backbone stays intact.
    #[default]
    ActionExpertOnly,
    /// Everything, including the backbone.
    Joint,
}

impl FinetuneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinetuneMode::ActionExpertOnly => "action-expert-only",
            FinetuneMode::Joint => "joint",
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        match self {
            FinetuneMode::ActionExpertOnly => {
                vec![ParamGroup::Queries, ParamGroup::Connector, ParamGroup::Dit]
            }
            FinetuneMode::Joint => ParamGroup::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Seeds parameter initialisation, batch order and diffusion noise.
    pub seed: u64,
    /// Reasoning formats left out of stage-1 data.
    pub omit_formats: Vec<ReasoningFormat>,
    pub finetune_mode: FinetuneMode,
    /// In action-expert-only mode, let the diffusion loss reach the queries
    /// through the frozen backbone instead of cutting the graph at `z`.
    pub query_gradient: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                steps: 3000,
                batch_size: 8,
                optim: AdamConfig::default(),
            },
            stage2: StageConfig {
                steps: 6000,
                batch_size: 16,
                optim: AdamConfig::default(),
            },
            seed: 0,
            omit_formats: Vec::new(),
            finetune_mode: FinetuneMode::ActionExpertOnly,
            query_gradient: true,
            log_every: 10,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            optim: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reasoning the action expert is conditioned on: compact reasoning
    /// unless it was left out of the data.
    pub fn conditioning(&self) -> Option<ReasoningFormat> {
        if self.omit_formats.contains(&ReasoningFormat::Compact) {
            None
        } else {
            Some(ReasoningFormat::Compact)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(log: &[LossRecord], mut out: W) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io(e.to_string());
    writeln!(out, "schema_version,step,stage,loss").map_err(io)?;
    for r in log {
        writeln!(
            out,
            "{LOSS_LOG_SCHEMA_VERSION},{},{},{:e}",
            r.step,
            r.stage.as_str(),
            r.loss
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Demonstrations, their annotations and the task bank they came from.
pub struct TrainingData {
    pub bank: TaskBank,
    pub trajectories: Vec<TrajectoryRecord>,
    pub samples: Vec<ReasoningSample>,
    index: HashMap<String, usize>,
}

impl TrainingData {
    pub fn new(
        bank: TaskBank,
        trajectories: Vec<TrajectoryRecord>,
        samples: Vec<ReasoningSample>,
    ) -> Self {
        let index = trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        Self {
            bank,
            trajectories,
            samples,
            index,
        }
    }

    pub fn observation(&self, traj_id: &str, step: usize) -> Result<&Observation, TrainError> {
        self.index
            .get(traj_id)
            .and_then(|&i| self.trajectories[i].steps.iter().find(|s| s.t == step))
            .map(|s| &s.observation)
            .ok_or_else(|| TrainError::UnknownStep {
                traj_id: traj_id.to_string(),
                step,
            })
    }

    /// Vocabulary over the bank plus every word used in the samples.
    pub fn vocab(&self) -> Result<Vocab, ModelError> {
        let texts: Vec<&str> = self
            .samples
            .iter()
            .flat_map(|s| [s.prompt_text.as_str(), s.target_text.as_str()])
            .collect();
        Vocab::build(&self.bank, &texts)
    }
}

pub struct Stage1Item<'a> {
    pub obs: &'a Observation,
    /// `[BOS, tag, instruction…, SEP]`.
    pub prompt: Vec<u32>,
    /// Target words followed by EOS; every one of them is scored.
    pub target: Vec<u32>,
}

pub struct Stage2Item<'a> {
    pub obs: &'a Observation,
    /// Full condition sequence: prompt plus reasoning.
    pub tokens: Vec<u32>,
    /// Normalised ground-truth chunk (H×7).
    pub chunk: Tensor,
    /// Precomputed query outputs, usable when the graph is cut at `z`.
    pub z: Option<Tensor>,
    /// Precomputed backbone keys/values for `[vis; tokens]`, usable while
    /// the backbone is frozen.
    pub prefix: Option<KvCache>,
}

/// Mean cross-entropy over the target tokens of one item. Prompt positions
/// are never scored.
pub fn stage1_loss(model: &Model, g: &mut Graph, item: &Stage1Item) -> Result<Var, ModelError> {
    let mut seq = item.prompt.clone();
    seq.extend_from_slice(&item.target);
    let h = model.vlm_forward(g, item.obs, &seq, false)?;
    let first = model.sequence_len(item.prompt.len(), false) - 1;
    let logits = model.logits(g, h, first, item.target.len());
    let targets: Vec<usize> = item.target.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(logits, &targets))
}

/// One optimiser update on the token-weighted mean cross-entropy.
pub fn stage1_step(
    model: &mut Model,
    batch: &[Stage1Item],
    opt: &mut Adam,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let total: usize = batch.iter().map(|b| b.target.len()).sum();
    let mut grads = Grads::new(&model.params);
    let mut loss = 0.0;
    for item in batch {
        let mut g = Graph::with_trainable(&model.params, &[ParamGroup::Backbone]);
        let l = stage1_loss(model, &mut g, item)?;
        let w = item.target.len() as f64 / total as f64;
        let l = g.scale(l, w);
        loss += g.value(l).data[0];
        g.backward_into(l, &mut grads);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            stage: Stage::Stage1,
            step: opt.steps_taken(),
        });
    }
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

/// How far the diffusion loss reaches back from the condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientRoute {
    /// `z` is cut from the graph before the connector.
    Detached,
    /// The gradient reaches the queries through the frozen backbone. The
    /// `[visual; text]` prefix does not depend on the queries under causal
    /// attention, so its keys and values are computed once without a tape.
    QueriesOnly,
    /// The gradient reaches every backbone parameter.
    Full,
}

impl GradientRoute {
    pub fn for_mode(mode: FinetuneMode, query_gradient: bool) -> Self {
        match (mode, query_gradient) {
            (FinetuneMode::Joint, _) => GradientRoute::Full,
            (FinetuneMode::ActionExpertOnly, true) => GradientRoute::QueriesOnly,
            (FinetuneMode::ActionExpertOnly, false) => GradientRoute::Detached,
        }
    }
}

/// Per-item diffusion loss `‖ε − ε_θ(A_k, k, c)‖²` for a given `k` and `ε`.
pub fn stage2_loss(
    model: &Model,
    g: &mut Graph,
    item: &Stage2Item,
    k: usize,
    eps: &Tensor,
    route: GradientRoute,
) -> Result<Var, ModelError> {
    let c = match (&item.z, route) {
        (Some(z), GradientRoute::Detached) => {
            let z = g.constant(z.clone());
            model.connector_forward(g, z)
        }
        (_, GradientRoute::QueriesOnly) => {
            let z = match &item.prefix {
                Some(cache) => model.cached_queries(g, cache)?,
                None => {
                    let (cache, _) = model.prefix_cache(item.obs, &item.tokens)?;
                    model.cached_queries(g, &cache)?
                }
            };
            model.connector_forward(g, z)
        }
        (_, route) => model.condition(g, item.obs, &item.tokens, route == GradientRoute::Detached)?,
    };
    let ak = add_noise(&item.chunk, k, eps, &model.schedule)?;
    let e = model.dit_denoise(g, &ak, k, c)?;
    Ok(g.sum_sq_diff(e, eps.clone()))
}

pub fn sample_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// One optimiser update on the batch-mean diffusion loss. `k` is drawn
/// uniformly from `1..=T` and `ε` from a standard normal, per item.
pub fn stage2_step<R: Rng>(
    model: &mut Model,
    batch: &[&Stage2Item],
    opt: &mut Adam,
    route: GradientRoute,
    rng: &mut R,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let groups = opt.groups().to_vec();
    let mut grads = Grads::new(&model.params);
    let mut loss = 0.0;
    let (h, steps) = (model.config.chunk_horizon, model.schedule.steps);
    for item in batch {
        let k = rng.gen_range(1..=steps);
        let eps = sample_noise(h, 7, rng);
        let mut g = Graph::with_trainable(&model.params, &groups);
        let l = stage2_loss(model, &mut g, item, k, &eps, route)?;
        let l = g.scale(l, 1.0 / batch.len() as f64);
        loss += g.value(l).data[0];
        g.backward_into(l, &mut grads);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            stage: Stage::Stage2,
            step: opt.steps_taken(),
        });
    }
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

/// Condition tokens for the action expert: prompt plus compact reasoning,
/// or the no-reasoning prompt.
pub fn condition_tokens(
    model: &Model,
    conditioning: Option<ReasoningFormat>,
    instruction: &str,
    reasoning: Option<&str>,
) -> Result<Vec<u32>, ModelError> {
    match conditioning {
        Some(format) => {
            let mut t = model.prompt_tokens(format.tag(), instruction)?;
            t.extend(model.vocab.tokenize(reasoning.unwrap_or(""))?);
            Ok(t)
        }
        None => model.prompt_tokens(NO_REASONING, instruction),
    }
}

/// Query outputs `z` for a condition sequence, without gradient tracking.
pub fn query_states(model: &Model, obs: &Observation, tokens: &[u32]) -> Result<Tensor, ModelError> {
    let mut g = Graph::with_trainable(&model.params, &[]);
    let h = model.vlm_forward(&mut g, obs, tokens, true)?;
    let z = model.extract_queries(&mut g, h, model.config.query_count)?;
    Ok(g.value(z).clone())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

fn stage1_items<'a>(
    model: &Model,
    data: &'a TrainingData,
    cfg: &TrainConfig,
) -> Result<Vec<Stage1Item<'a>>, TrainError> {
    let mut items = Vec::new();
    for s in &data.samples {
        if s.split != SampleSplit::Train || cfg.omit_formats.contains(&s.format) {
            continue;
        }
        items.push(Stage1Item {
            obs: data.observation(&s.traj_id, s.step)?,
            prompt: model.prompt_tokens(s.format.tag(), &s.prompt_text)?,
            target: model.vocab.tokenize(&s.target_text)?,
        });
    }
    if items.is_empty() {
        return Err(TrainError::NoTrainingData("no stage-1 samples".into()));
    }
    Ok(items)
}

/// Stage-2 items: one per annotated step, taken from the compact samples
/// (whose text is ignored when conditioning carries no reasoning).
pub fn stage2_items<'a>(
    model: &Model,
    data: &'a TrainingData,
    conditioning: Option<ReasoningFormat>,
) -> Result<Vec<Stage2Item<'a>>, TrainError> {
    let mut items = Vec::new();
    for s in &data.samples {
        if s.split != SampleSplit::Train || s.format != ReasoningFormat::Compact {
            continue;
        }
        if s.action_chunk.len() != model.config.chunk_horizon {
            return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
                "sample chunk of {} steps, model horizon {}",
                s.action_chunk.len(),
                model.config.chunk_horizon
            ))));
        }
        items.push(Stage2Item {
            obs: data.observation(&s.traj_id, s.step)?,
            tokens: condition_tokens(model, conditioning, &s.prompt_text, Some(&s.target_text))?,
            chunk: model.normalize_chunk(&s.action_chunk),
            z: None,
            prefix: None,
        });
    }
    if items.is_empty() {
        return Err(TrainError::NoTrainingData(
            "no compact samples to pair with action chunks".into(),
        ));
    }
    Ok(items)
}

/// Runs one curriculum stage. Stage 1 starts from a fresh model seeded by
/// `cfg.seed`; stage 2 continues from a stage-1 checkpoint.
pub fn run_training(
    stage: Stage,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainingData,
    stage1: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    match stage {
        Stage::Stage1 => run_stage1(model_cfg, cfg, data),
        Stage::Stage2 => {
            let ck = stage1
                .filter(|c| c.stage == StageTag::Stage1)
                .ok_or(TrainError::MissingStage1Checkpoint)?;
            run_stage2(ck, cfg, data)
        }
    }
}

fn run_stage1(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainingData,
) -> Result<TrainOutcome, TrainError> {
    let mut mcfg = model_cfg.clone();
    mcfg.seed = cfg.seed;
    let mut model = Model::new(mcfg, data.vocab()?)?;
    let items = stage1_items(&model, data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4531);
    let mut opt = Adam::new(cfg.stage1.optim, &model.params, &[ParamGroup::Backbone]);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.stage1.batch_size.max(1);
    let mut log = Vec::new();
    for step in 1..=cfg.stage1.steps {
        let mut batch_idx = Vec::with_capacity(bs);
        while batch_idx.len() < bs.min(items.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<Stage1Item> = batch_idx
            .iter()
            .map(|&i| Stage1Item {
                obs: items[i].obs,
                prompt: items[i].prompt.clone(),
                target: items[i].target.clone(),
            })
            .collect();
        let loss = stage1_step(&mut model, &batch, &mut opt)?;
        if step % cfg.log_every.max(1) == 0 || step == cfg.stage1.steps {
            log.push(LossRecord {
                step,
                stage: Stage::Stage1,
                loss,
            });
        }
    }
    let mut ck = Checkpoint::new(model, StageTag::Stage1);
    ck.conditioning = cfg.conditioning();
    ck.omitted_formats = cfg.omit_formats.clone();
    ck.notes = vec![("seed".into(), cfg.seed.to_string())];
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
    })
}

fn run_stage2(
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    data: &TrainingData,
) -> Result<TrainOutcome, TrainError> {
    let mut model = stage1.model.clone();
    let conditioning = cfg.conditioning();
    let mut items = stage2_items(&model, data, conditioning)?;
    let mode = cfg.finetune_mode;
    let route = GradientRoute::for_mode(mode, cfg.query_gradient);
    let detach = route == GradientRoute::Detached;
    match route {
        GradientRoute::Detached => {
            // Backbone and queries are both fixed, so z never changes.
            let zs: Vec<Result<Tensor, ModelError>> = items
                .par_iter()
                .map(|it| query_states(&model, it.obs, &it.tokens))
                .collect();
            for (it, z) in items.iter_mut().zip(zs) {
                it.z = Some(z?);
            }
        }
        GradientRoute::QueriesOnly => {
            // The [vis; text] prefix only depends on the frozen backbone.
            let caches: Vec<Result<KvCache, ModelError>> = items
                .par_iter()
                .map(|it| model.prefix_cache(it.obs, &it.tokens).map(|(c, _)| c))
                .collect();
            for (it, c) in items.iter_mut().zip(caches) {
                it.prefix = Some(c?);
            }
        }
        GradientRoute::Full => {}
    }
    let mut groups = mode.groups();
    if detach {
        groups.retain(|g| *g != ParamGroup::Queries);
    }
    let mut opt = Adam::new(cfg.stage2.optim, &model.params, &groups);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4532);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.stage2.batch_size.max(1);
    let mut log = Vec::new();
    for step in 1..=cfg.stage2.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs.min(items.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }
        let loss = stage2_step(&mut model, &batch, &mut opt, route, &mut rng)?;
        if step % cfg.log_every.max(1) == 0 || step == cfg.stage2.steps {
            log.push(LossRecord {
                step,
                stage: Stage::Stage2,
                loss,
            });
        }
    }
    let mut ck = Checkpoint::new(model, StageTag::Stage2);
    ck.conditioning = conditioning;
    ck.omitted_formats = cfg.omit_formats.clone();
    ck.notes = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("finetune_mode".into(), mode.as_str().into()),
        ("query_gradient".into(), cfg.query_gradient.to_string()),
    ];
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
    })
}
