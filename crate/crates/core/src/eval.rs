//! Rollouts in the simulator, success tables, ablations and latency
//! probes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{matches_compact_grammar, ReasoningFormat};
use crate::geometry::Delta7;
use crate::inference::{policy_step, InferError, ReasoningMode, SamplerConfig, Timing, TraceRecord, TRACE_SCHEMA_VERSION};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::simenv::{
    clamp_action, expert_action, is_success, perturb_goal, render, reset_scene, step,
    InstructionKind, Observation, SceneState, SimConfig, SimError, TaskSpec,
};
use crate::training::{run_training, FinetuneMode, Stage, TrainConfig, TrainError, TrainingData};

pub const TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(String),
}

impl From<crate::model::ModelError> for EvalError {
    fn from(e: crate::model::ModelError) -> Self {
        EvalError::Infer(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sim: SimConfig,
    pub max_steps: usize,
    pub trials: usize,
    /// First episode seed; trial `i` uses `seed_base + i`.
    pub seed_base: u64,
    /// Actions executed from each predicted chunk before replanning.
    pub execute_steps: usize,
    /// Inclusive step range in which the moving goal is displaced.
    pub perturb_window: (usize, usize),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            max_steps: 200,
            trials: 10,
            seed_base: 1_000_000,
            execute_steps: 4,
            perturb_window: (5, 30),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.execute_steps == 0 {
            return bad("execute_steps must be at least 1");
        }
        if self.perturb_window.0 > self.perturb_window.1 {
            return bad("perturb_window is reversed");
        }
        self.sim.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|i| self.seed_base + i).collect()
    }
}

/// Instruction and goal setting of an evaluation column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCondition {
    Direct,
    Intention,
    UnseenIntention,
    /// Intention instruction with the hand goal moved once mid-episode.
    MovingGoal,
}

impl EvalCondition {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalCondition::Direct => "direct",
            EvalCondition::Intention => "intention",
            EvalCondition::UnseenIntention => "unseen-intention",
            EvalCondition::MovingGoal => "moving-goal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EvalCondition::Direct,
            EvalCondition::Intention,
            EvalCondition::UnseenIntention,
            EvalCondition::MovingGoal,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }

    pub fn instruction_kind(&self) -> InstructionKind {
        match self {
            EvalCondition::Direct => InstructionKind::Direct,
            EvalCondition::Intention | EvalCondition::MovingGoal => InstructionKind::Intention,
            EvalCondition::UnseenIntention => InstructionKind::UnseenIntention,
        }
    }

    /// Whether the condition can be run on `task` at all.
    pub fn applies_to(&self, task: &TaskSpec) -> bool {
        match self {
            EvalCondition::UnseenIntention => !task.heldout_instructions.is_empty(),
            EvalCondition::MovingGoal => task.goal_is_hand(),
            _ => true,
        }
    }

    /// Seeded choice among the task's instructions of the right kind.
    pub fn instruction(&self, task: &TaskSpec, seed: u64) -> String {
        let pick = |v: &[String]| v[(seed % v.len() as u64) as usize].clone();
        match self {
            EvalCondition::Direct => task.direct_instruction.clone(),
            EvalCondition::Intention | EvalCondition::MovingGoal => {
                pick(&task.intention_instructions)
            }
            EvalCondition::UnseenIntention => pick(&task.heldout_instructions),
        }
    }
}

/// Everything a policy may look at when choosing actions.
pub struct PolicyInput<'a> {
    pub obs: &'a Observation,
    /// Privileged simulator state; only the scripted expert reads it.
    pub state: &'a SceneState,
    pub task: &'a TaskSpec,
    pub instruction: &'a str,
    pub seed: u64,
}

pub struct Decision {
    pub actions: Vec<Delta7>,
    pub reasoning: Option<String>,
    pub timing: Timing,
}

pub trait Policy: Sync {
    fn name(&self) -> String;
    fn decide(&self, input: &PolicyInput) -> Result<Decision, EvalError>;
}

/// The scripted demonstrator, as an upper bound.
pub struct ExpertPolicy {
    pub sim: SimConfig,
}

impl Policy for ExpertPolicy {
    fn name(&self) -> String {
        "expert".into()
    }

    fn decide(&self, input: &PolicyInput) -> Result<Decision, EvalError> {
        let a = expert_action(input.state, input.task, &self.sim)?;
        Ok(Decision {
            actions: vec![a],
            reasoning: None,
            timing: Timing::default(),
        })
    }
}

/// Uniform actions within the step limits.
pub struct RandomPolicy {
    pub sim: SimConfig,
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn decide(&self, input: &PolicyInput) -> Result<Decision, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
        let (t, r) = (self.sim.max_translation_step, self.sim.max_rotation_step);
        let a = Delta7 {
            dx: rng.gen_range(-t..=t),
            dy: rng.gen_range(-t..=t),
            dz: rng.gen_range(-t..=t),
            droll: rng.gen_range(-r..=r),
            dpitch: rng.gen_range(-r..=r),
            dyaw: rng.gen_range(-r..=r),
            gripper: if rng.gen::<bool>() { 1.0 } else { 0.0 },
        };
        Ok(Decision {
            actions: vec![a],
            reasoning: None,
            timing: Timing::default(),
        })
    }
}

/// A trained model under receding-horizon control.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub mode: ReasoningMode,
    pub sampler: SamplerConfig,
    pub execute_steps: usize,
}

impl<'a> ModelPolicy<'a> {
    /// Policy using the reasoning the checkpoint was trained to condition on.
    pub fn from_checkpoint(ck: &'a Checkpoint, sampler: SamplerConfig, execute_steps: usize) -> Self {
        Self {
            model: &ck.model,
            mode: ReasoningMode::for_conditioning(ck.conditioning),
            sampler,
            execute_steps,
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn name(&self) -> String {
        format!("model-{}", self.mode.as_str())
    }

    fn decide(&self, input: &PolicyInput) -> Result<Decision, EvalError> {
        let out = policy_step(
            self.model,
            input.obs,
            input.instruction,
            self.mode,
            &self.sampler,
            input.seed,
        )?;
        let actions = out
            .action_chunk
            .iter()
            .take(self.execute_steps)
            .map(|a| Delta7::from_array(*a))
            .collect();
        Ok(Decision {
            actions,
            reasoning: (self.mode != ReasoningMode::None).then_some(out.reasoning_text),
            timing: out.timing,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    NeverGrasped,
    WrongObject,
    /// The target was picked up but not left at the goal.
    NotPlaced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: String,
    pub condition: EvalCondition,
    pub instruction_kind: InstructionKind,
    pub instruction: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub failure: Option<FailureReason>,
    pub mean_decision_seconds: f64,
    pub reasoning_checked: usize,
    pub reasoning_valid: usize,
}

impl EpisodeResult {
    /// The result with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_wall_clock(mut self) -> Self {
        self.mean_decision_seconds = 0.0;
        self
    }
}

fn mix(seed: u64, t: usize) -> u64 {
    (seed ^ 0x6a09_e667_f3bc_c909).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ t as u64
}

/// Runs one episode: reset, then decide and execute until success or the
/// step limit. Under [`EvalCondition::MovingGoal`] the goal moves once at a
/// seeded step.
pub fn rollout(
    policy: &dyn Policy,
    task: &TaskSpec,
    condition: EvalCondition,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<(EpisodeResult, Vec<TraceRecord>), EvalError> {
    let instruction = condition.instruction(task, seed);
    let mut s = reset_scene(task, seed, &cfg.sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, usize::MAX));
    let perturb_at = (condition == EvalCondition::MovingGoal)
        .then(|| rng.gen_range(cfg.perturb_window.0..=cfg.perturb_window.1));
    let mut trace = Vec::new();
    let (mut decisions, mut seconds) = (0usize, 0.0);
    let (mut checked, mut valid) = (0, 0);
    let mut ever_grasped_target = false;
    let mut ever_grasped_other = false;
    let mut success = is_success(&s, task);
    let episode = format!("{}-{}-{}", task.name, condition.as_str(), seed);
    'episode: while !success && s.t < cfg.max_steps {
        let obs = render(&s, &cfg.sim);
        let input = PolicyInput {
            obs: &obs,
            state: &s,
            task,
            instruction: &instruction,
            seed: mix(seed, s.t),
        };
        let start = Instant::now();
        let d = policy.decide(&input)?;
        seconds += start.elapsed().as_secs_f64();
        decisions += 1;
        if let Some(r) = &d.reasoning {
            checked += 1;
            valid += matches_compact_grammar(r) as usize;
        }
        let at = s.t;
        let mut executed = Vec::new();
        for a in &d.actions {
            if perturb_at == Some(s.t) && !s.goal_perturbed {
                s = perturb_goal(&s, task, &cfg.sim, &mut rng)?;
            }
            let a = clamp_action(a, &cfg.sim);
            s = step(&s, &a, &cfg.sim)?;
            executed.push(a.to_array());
            if let Some(g) = s.grasped() {
                if g.class == task.target_class {
                    ever_grasped_target = true;
                } else {
                    ever_grasped_other = true;
                }
            }
            success = is_success(&s, task);
            if success || s.t >= cfg.max_steps {
                trace.push(record(&episode, at, &d, executed));
                break 'episode;
            }
        }
        trace.push(record(&episode, at, &d, executed));
    }
    let failure = (!success).then(|| {
        if ever_grasped_target {
            FailureReason::NotPlaced
        } else if ever_grasped_other {
            FailureReason::WrongObject
        } else {
            FailureReason::NeverGrasped
        }
    });
    let result = EpisodeResult {
        task: task.name.clone(),
        condition,
        instruction_kind: condition.instruction_kind(),
        instruction,
        seed,
        success,
        steps: s.t,
        failure,
        mean_decision_seconds: if decisions > 0 {
            seconds / decisions as f64
        } else {
            0.0
        },
        reasoning_checked: checked,
        reasoning_valid: valid,
    };
    Ok((result, trace))
}

fn record(episode: &str, step: usize, d: &Decision, actions: Vec<[f64; 7]>) -> TraceRecord {
    TraceRecord {
        schema_version: TRACE_SCHEMA_VERSION,
        episode: episode.to_string(),
        step,
        reasoning_text: d.reasoning.clone().unwrap_or_default(),
        actions,
        timing: d.timing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub successes: usize,
    pub trials: usize,
    /// Success percentage in `[0, 100]`.
    pub rate: f64,
}

impl Cell {
    pub fn new(successes: usize, trials: usize) -> Self {
        Self {
            successes,
            trials,
            rate: if trials == 0 {
                0.0
            } else {
                100.0 * successes as f64 / trials as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTable {
    pub schema_version: u32,
    pub title: String,
    pub columns: Vec<String>,
    /// Task rows followed by the average row.
    pub rows: Vec<TableRow>,
    pub trials: usize,
    pub seeds: Vec<u64>,
}

pub const AVERAGE_ROW: &str = "average";

impl EvalTable {
    /// Builds a table from task rows and appends the column averages.
    pub fn from_rows(title: &str, columns: Vec<String>, mut rows: Vec<TableRow>, trials: usize, seeds: Vec<u64>) -> Self {
        let avg = (0..columns.len())
            .map(|c| {
                let cells: Vec<Cell> = rows.iter().filter_map(|r| r.cells[c]).collect();
                if cells.is_empty() {
                    return None;
                }
                let rate = cells.iter().map(|x| x.rate).sum::<f64>() / cells.len() as f64;
                Some(Cell {
                    successes: cells.iter().map(|x| x.successes).sum(),
                    trials: cells.iter().map(|x| x.trials).sum(),
                    rate,
                })
            })
            .collect();
        rows.push(TableRow {
            name: AVERAGE_ROW.into(),
            cells: avg,
        });
        Self {
            schema_version: TABLE_SCHEMA_VERSION,
            title: title.into(),
            columns,
            rows,
            trials,
            seeds,
        }
    }

    pub fn average(&self) -> &TableRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("schema_version,row,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r
                .cells
                .iter()
                .map(|c| c.map_or(String::new(), |c| format!("{:.1}", c.rate)))
                .collect();
            let _ = writeln!(s, "{TABLE_SCHEMA_VERSION},{},{}", r.name, cells.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(6)).collect();
        let mut s = format!("{}\n{:<name_w$}", self.title, "task");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<name_w$}", r.name);
            for (c, w) in r.cells.iter().zip(&col_w) {
                let v = c.map_or("-".to_string(), |c| format!("{:.1}", c.rate));
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "({} trials per cell)", self.trials);
        s
    }
}

/// All episodes of a table, in row-major order.
pub fn run_episodes(
    policy: &dyn Policy,
    tasks: &[TaskSpec],
    conditions: &[EvalCondition],
    cfg: &EvalConfig,
) -> Result<Vec<EpisodeResult>, EvalError> {
    Ok(run_episodes_traced(policy, tasks, conditions, cfg)?
        .into_iter()
        .map(|r| r.0)
        .collect())
}

/// [`run_episodes`] keeping each episode's decision trace.
pub fn run_episodes_traced(
    policy: &dyn Policy,
    tasks: &[TaskSpec],
    conditions: &[EvalCondition],
    cfg: &EvalConfig,
) -> Result<Vec<(EpisodeResult, Vec<TraceRecord>)>, EvalError> {
    cfg.validate()?;
    let jobs: Vec<(usize, EvalCondition, u64)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            conditions
                .iter()
                .filter(move |c| c.applies_to(t))
                .flat_map(move |&c| cfg.seeds().into_iter().map(move |s| (i, c, s)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(i, c, s)| rollout(policy, &tasks[i], c, s, cfg))
        .collect()
}

pub fn tabulate(
    title: &str,
    tasks: &[TaskSpec],
    conditions: &[EvalCondition],
    episodes: &[EpisodeResult],
    cfg: &EvalConfig,
) -> EvalTable {
    let rows = tasks
        .iter()
        .map(|t| TableRow {
            name: t.name.clone(),
            cells: conditions
                .iter()
                .map(|c| {
                    let eps: Vec<_> = episodes
                        .iter()
                        .filter(|e| e.task == t.name && e.condition == *c)
                        .collect();
                    (!eps.is_empty())
                        .then(|| Cell::new(eps.iter().filter(|e| e.success).count(), eps.len()))
                })
                .collect(),
        })
        .collect();
    EvalTable::from_rows(
        title,
        conditions.iter().map(|c| c.as_str().to_string()).collect(),
        rows,
        cfg.trials,
        cfg.seeds(),
    )
}

/// Success rate per task and condition over seeded trials.
pub fn success_table(
    policy: &dyn Policy,
    tasks: &[TaskSpec],
    conditions: &[EvalCondition],
    cfg: &EvalConfig,
) -> Result<EvalTable, EvalError> {
    let episodes = run_episodes(policy, tasks, conditions, cfg)?;
    Ok(tabulate(
        &format!("success rate (%), {}", policy.name()),
        tasks,
        conditions,
        &episodes,
        cfg,
    ))
}

/// Pretraining-data variants: the full mixture and one format left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataVariant {
    Full,
    WithoutIntention,
    WithoutSpatial,
    WithoutCompact,
}

impl DataVariant {
    pub const ALL: [DataVariant; 4] = [
        DataVariant::Full,
        DataVariant::WithoutIntention,
        DataVariant::WithoutSpatial,
        DataVariant::WithoutCompact,
    ];

    pub fn omitted(&self) -> Vec<ReasoningFormat> {
        match self {
            DataVariant::Full => vec![],
            DataVariant::WithoutIntention => vec![ReasoningFormat::Intention],
            DataVariant::WithoutSpatial => vec![ReasoningFormat::Spatial],
            DataVariant::WithoutCompact => vec![ReasoningFormat::Compact],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DataVariant::Full => "full",
            DataVariant::WithoutIntention => "w/o intention",
            DataVariant::WithoutSpatial => "w/o spatial",
            DataVariant::WithoutCompact => "w/o compact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub training_seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub sampler: SamplerConfig,
    pub variants: Vec<DataVariant>,
    pub finetune_modes: Vec<FinetuneMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            training_seeds: vec![0, 1, 2],
            eval: EvalConfig::default(),
            sampler: SamplerConfig::default(),
            variants: DataVariant::ALL.to_vec(),
            finetune_modes: vec![FinetuneMode::ActionExpertOnly, FinetuneMode::Joint],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Rows are tasks, columns data variants; intention instructions only.
    pub pretraining: EvalTable,
    /// Columns are finetune modes, trained on the full mixture.
    pub finetune: EvalTable,
}

/// Trains a stage-1 and stage-2 checkpoint for one configuration.
pub fn train_both(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &TrainingData,
) -> Result<(Checkpoint, Checkpoint), EvalError> {
    let s1 = run_training(Stage::Stage1, model, train, data, None)?;
    let s2 = run_training(Stage::Stage2, model, train, data, Some(&s1.checkpoint))?;
    Ok((s1.checkpoint, s2.checkpoint))
}

fn merge_tables(title: &str, columns: Vec<String>, per_column: Vec<Vec<EpisodeResult>>, tasks: &[TaskSpec], cfg: &EvalConfig) -> EvalTable {
    let rows = tasks
        .iter()
        .map(|t| TableRow {
            name: t.name.clone(),
            cells: per_column
                .iter()
                .map(|eps| {
                    let mine: Vec<_> = eps.iter().filter(|e| e.task == t.name).collect();
                    (!mine.is_empty())
                        .then(|| Cell::new(mine.iter().filter(|e| e.success).count(), mine.len()))
                })
                .collect(),
        })
        .collect();
    EvalTable::from_rows(title, columns, rows, cfg.trials, cfg.seeds())
}

/// Trains every variant for every training seed and evaluates each on the
/// in-distribution tasks under intention instructions with shared episode
/// seeds. Cells pool episodes over training seeds.
pub fn ablation_suite(base: &AblationConfig, data: &TrainingData) -> Result<AblationReport, EvalError> {
    base.eval.validate()?;
    let tasks: Vec<TaskSpec> = data.bank.in_distribution().cloned().collect();
    let conds = [EvalCondition::Intention];
    let mut by_variant: Vec<Vec<EpisodeResult>> = vec![Vec::new(); base.variants.len()];
    let mut by_mode: Vec<Vec<EpisodeResult>> = vec![Vec::new(); base.finetune_modes.len()];
    for &seed in &base.training_seeds {
        let mut full_stage1 = None;
        for (vi, v) in base.variants.iter().enumerate() {
            let mut tc = base.train.clone();
            tc.seed = seed;
            tc.omit_formats = v.omitted();
            tc.finetune_mode = FinetuneMode::ActionExpertOnly;
            let (s1, s2) = train_both(&base.model, &tc, data)?;
            let policy = ModelPolicy::from_checkpoint(&s2, base.sampler.clone(), base.eval.execute_steps);
            log::info!("evaluating {} (training seed {seed})", v.as_str());
            by_variant[vi].extend(run_episodes(&policy, &tasks, &conds, &base.eval)?);
            if *v == DataVariant::Full {
                full_stage1 = Some((s1, s2));
            }
        }
        for (mi, mode) in base.finetune_modes.iter().enumerate() {
            let mut tc = base.train.clone();
            tc.seed = seed;
            tc.finetune_mode = *mode;
            let s2 = match (&full_stage1, mode) {
                (Some((_, s2)), FinetuneMode::ActionExpertOnly) => s2.clone(),
                (Some((s1, _)), _) => {
                    run_training(Stage::Stage2, &base.model, &tc, data, Some(s1))?.checkpoint
                }
                (None, _) => train_both(&base.model, &tc, data)?.1,
            };
            let policy = ModelPolicy::from_checkpoint(&s2, base.sampler.clone(), base.eval.execute_steps);
            by_mode[mi].extend(run_episodes(&policy, &tasks, &conds, &base.eval)?);
        }
    }
    let mut eval = base.eval.clone();
    eval.trials *= base.training_seeds.len();
    Ok(AblationReport {
        pretraining: merge_tables(
            "pretraining data ablation, intention instructions (%)",
            base.variants.iter().map(|v| v.as_str().to_string()).collect(),
            by_variant,
            &tasks,
            &eval,
        ),
        finetune: merge_tables(
            "finetuning strategy ablation, intention instructions (%)",
            base.finetune_modes.iter().map(|m| m.as_str().to_string()).collect(),
            by_mode,
            &tasks,
            &eval,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLatency {
    pub mode: ReasoningMode,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub mean_tokens: f64,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub probes: usize,
    pub modes: Vec<ModeLatency>,
}

impl LatencyReport {
    pub fn mode(&self, m: ReasoningMode) -> Option<&ModeLatency> {
        self.modes.iter().find(|x| x.mode == m)
    }

    /// Mean chain tokens over mean compact tokens.
    pub fn token_ratio(&self) -> Option<f64> {
        let c = self.mode(ReasoningMode::Compact)?;
        let i = self.mode(ReasoningMode::IntentionChain)?;
        (c.mean_tokens > 0.0).then(|| i.mean_tokens / c.mean_tokens)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>10} {:>8}\n", "mode", "mean (s)", "median (s)", "tokens");
        for m in &self.modes {
            let _ = writeln!(
                s,
                "{:<16} {:>10.4} {:>10.4} {:>8.1}",
                m.mode.as_str(),
                m.mean_seconds,
                m.median_seconds,
                m.mean_tokens
            );
        }
        if let Some(r) = self.token_ratio() {
            let _ = writeln!(s, "chain:compact token ratio {r:.2} over {} probes", self.probes);
        }
        s
    }
}

/// Paired `policy_step` timings over the same probe states for each mode.
/// Probes run sequentially so timings are not skewed by contention.
pub fn latency_report(
    model: &Model,
    probes: &[(Observation, String)],
    modes: &[ReasoningMode],
    sampler: &SamplerConfig,
) -> Result<LatencyReport, EvalError> {
    let mut out = Vec::new();
    for &mode in modes {
        let mut secs = Vec::with_capacity(probes.len());
        let mut tokens = Vec::with_capacity(probes.len());
        for (i, (obs, inst)) in probes.iter().enumerate() {
            let r = policy_step(model, obs, inst, mode, sampler, i as u64)?;
            secs.push(r.timing.total_seconds);
            tokens.push(r.reasoning_tokens);
        }
        let n = probes.len().max(1) as f64;
        let mut sorted = secs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        out.push(ModeLatency {
            mode,
            mean_seconds: secs.iter().sum::<f64>() / n,
            median_seconds: median,
            mean_tokens: tokens.iter().sum::<usize>() as f64 / n,
            tokens,
        });
    }
    Ok(LatencyReport {
        probes: probes.len(),
        modes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::TaskBank;

    fn id_tasks() -> Vec<TaskSpec> {
        TaskBank::standard().in_distribution().cloned().collect()
    }

    #[test]
    fn expert_nearly_always_succeeds() {
        let cfg = EvalConfig {
            trials: 100,
            ..EvalConfig::default()
        };
        let p = ExpertPolicy { sim: cfg.sim.clone() };
        let tasks = id_tasks();
        let eps = run_episodes(&p, &tasks[..1], &[EvalCondition::Intention], &cfg).unwrap();
        let ok = eps.iter().filter(|e| e.success).count();
        assert!(ok >= 99, "{ok}/100");
        for e in &eps {
            assert_eq!(e.failure.is_some(), !e.success);
            assert!(e.steps <= cfg.max_steps);
        }
    }

    #[test]
    fn random_policy_almost_never_succeeds() {
        let cfg = EvalConfig {
            trials: 100,
            ..EvalConfig::default()
        };
        let p = RandomPolicy { sim: cfg.sim.clone() };
        let tasks = id_tasks();
        let eps = run_episodes(&p, &tasks[..1], &[EvalCondition::Direct], &cfg).unwrap();
        let ok = eps.iter().filter(|e| e.success).count();
        assert!(ok <= 2, "{ok}/100");
    }

    #[test]
    fn rollouts_are_deterministic() {
        let cfg = EvalConfig::default();
        let p = RandomPolicy { sim: cfg.sim.clone() };
        let task = &id_tasks()[2];
        let a = rollout(&p, task, EvalCondition::MovingGoal, 5, &cfg).unwrap();
        let b = rollout(&p, task, EvalCondition::MovingGoal, 5, &cfg).unwrap();
        assert_eq!(a.0.without_wall_clock(), b.0.without_wall_clock());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn expert_tracks_moving_goal() {
        let cfg = EvalConfig {
            trials: 20,
            ..EvalConfig::default()
        };
        let p = ExpertPolicy { sim: cfg.sim.clone() };
        let tasks = id_tasks();
        let eps = run_episodes(&p, &tasks, &[EvalCondition::MovingGoal], &cfg).unwrap();
        // The charger task has a fixed goal and is skipped.
        assert_eq!(eps.len(), 5 * 20);
        assert!(eps.iter().filter(|e| e.success).count() >= 98);
    }

    #[test]
    fn table_average_and_round_trip() {
        let cfg = EvalConfig {
            trials: 4,
            ..EvalConfig::default()
        };
        let p = ExpertPolicy { sim: cfg.sim.clone() };
        let tasks = id_tasks();
        let conds = [EvalCondition::Direct, EvalCondition::Intention];
        let t = success_table(&p, &tasks, &conds, &cfg).unwrap();
        assert_eq!(t.rows.len(), 7);
        for c in 0..2 {
            let mean = t.rows[..6].iter().map(|r| r.cells[c].unwrap().rate).sum::<f64>() / 6.0;
            assert!((t.average().cells[c].unwrap().rate - mean).abs() < 1e-12);
        }
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<EvalTable>(&json).unwrap(), t);
        assert_eq!(t.to_csv().lines().count(), 8);
        assert!(t.to_csv().starts_with("schema_version,row,direct,intention\n"));
        assert!(t.to_text().contains("average"));
    }

    #[test]
    fn unseen_instructions_come_from_the_heldout_bank() {
        let t = &id_tasks()[0];
        for seed in 0..10 {
            let s = EvalCondition::UnseenIntention.instruction(t, seed);
            assert!(t.heldout_instructions.contains(&s));
            assert!(!t.intention_instructions.contains(&s));
        }
    }
}
