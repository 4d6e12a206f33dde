//! Run configuration: one TOML file with a section per pipeline stage.
//! Every field has a default, unknown keys are rejected and the whole file
//! is validated (including cross-section consistency) before any work.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::{AnnotatorConfig, ReasoningFormat};
use crate::eval::{AblationConfig, DataVariant, EvalCondition, EvalConfig};
use crate::geometry::CameraCalibration;
use crate::inference::SamplerConfig;
use crate::model::ModelConfig;
use crate::simenv::{SimConfig, TaskBank, TaskSpec};
use crate::training::{FinetuneMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Demonstration generation and dataset contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub demos_per_task: u64,
    /// Demo `i` of every task uses seed `seed_base + i`.
    pub seed_base: u64,
    /// Task names to generate; empty means every in-distribution task.
    pub tasks: Vec<String>,
    /// Reasoning formats annotated into the dataset.
    pub formats: Vec<ReasoningFormat>,
    /// Task bank file; the built-in bank when absent.
    pub task_bank: Option<PathBuf>,
    /// Camera calibration file; the built-in tabletop camera when absent.
    pub calibration: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            demos_per_task: 50,
            seed_base: 0,
            tasks: Vec::new(),
            formats: ReasoningFormat::ALL.to_vec(),
            task_bank: None,
            calibration: None,
        }
    }
}

/// Rollout settings plus the experiment grid for tables, ablations and
/// latency probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_steps: usize,
    pub trials: usize,
    pub seed_base: u64,
    pub execute_steps: usize,
    pub perturb_window: (usize, usize),
    pub conditions: Vec<EvalCondition>,
    pub training_seeds: Vec<u64>,
    pub variants: Vec<DataVariant>,
    pub finetune_modes: Vec<FinetuneMode>,
    /// Paired states for the latency comparison.
    pub latency_probes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            max_steps: e.max_steps,
            trials: e.trials,
            seed_base: e.seed_base,
            execute_steps: e.execute_steps,
            perturb_window: e.perturb_window,
            conditions: vec![EvalCondition::Direct, EvalCondition::Intention],
            training_seeds: vec![0, 1, 2],
            variants: DataVariant::ALL.to_vec(),
            finetune_modes: vec![FinetuneMode::ActionExpertOnly, FinetuneMode::Joint],
            latency_probes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub simenv: SimConfig,
    pub annotator: AnnotatorConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.simenv
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("simenv: {e}")))?;
        self.annotator
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("annotator: {e}")))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.eval_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("eval: {e}")))?;
        self.sampler
            .timesteps(self.model.diffusion_steps)
            .map_err(|e| ConfigError::Invalid(format!("sampler: {e}")))?;

        if self.model.grid != self.simenv.grid {
            return bad(format!(
                "model.grid {} differs from simenv.grid {}",
                self.model.grid, self.simenv.grid
            ));
        }
        if self.model.channels != SimConfig::CHANNELS {
            return bad(format!(
                "model.channels {} differs from the raster's {} channels",
                self.model.channels,
                SimConfig::CHANNELS
            ));
        }
        if self.model.chunk_horizon != self.annotator.chunk_horizon {
            return bad(format!(
                "model.chunk_horizon {} differs from annotator.chunk_horizon {}",
                self.model.chunk_horizon, self.annotator.chunk_horizon
            ));
        }
        if self.eval.execute_steps > self.model.chunk_horizon {
            return bad(format!(
                "eval.execute_steps {} exceeds the chunk horizon {}",
                self.eval.execute_steps, self.model.chunk_horizon
            ));
        }

        let d = &self.data;
        if d.demos_per_task == 0 {
            return bad("data.demos_per_task must be at least 1".into());
        }
        let formats: BTreeSet<_> = d.formats.iter().copied().collect();
        if formats.len() != d.formats.len() {
            return bad("data.formats lists a format twice".into());
        }
        // Action chunks travel on the compact samples.
        if !formats.contains(&ReasoningFormat::Compact) {
            return bad("data.formats must include compact".into());
        }
        let (train_lo, train_hi) = (d.seed_base, d.seed_base.saturating_add(d.demos_per_task));
        let (eval_lo, eval_hi) = (
            self.eval.seed_base,
            self.eval.seed_base.saturating_add(self.eval.trials as u64),
        );
        if train_lo < eval_hi && eval_lo < train_hi {
            return bad(format!(
                "demo seeds {train_lo}..{train_hi} overlap evaluation seeds {eval_lo}..{eval_hi}"
            ));
        }

        let t = &self.training;
        if t.stage1.steps == 0 || t.stage2.steps == 0 {
            return bad("training stages need at least one step".into());
        }
        if t.stage1.batch_size == 0 || t.stage2.batch_size == 0 {
            return bad("training batch sizes must be positive".into());
        }
        if t.omit_formats.len() == ReasoningFormat::ALL.len() {
            return bad("training.omit_formats leaves nothing for stage 1".into());
        }

        let e = &self.eval;
        if e.conditions.is_empty() {
            return bad("eval.conditions is empty".into());
        }
        if e.training_seeds.is_empty() {
            return bad("eval.training_seeds is empty".into());
        }
        if e.variants.is_empty() || e.finetune_modes.is_empty() {
            return bad("eval.variants and eval.finetune_modes must be non-empty".into());
        }
        if e.latency_probes == 0 {
            return bad("eval.latency_probes must be at least 1".into());
        }
        Ok(())
    }

    pub fn task_bank(&self) -> Result<TaskBank, ConfigError> {
        match &self.data.task_bank {
            Some(p) => TaskBank::load(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display()))),
            None => Ok(TaskBank::standard()),
        }
    }

    pub fn calibration(&self) -> Result<CameraCalibration, ConfigError> {
        match &self.data.calibration {
            Some(p) => CameraCalibration::load(p)
                .map_err(|e| ConfigError::Io(format!("{}: {e}", p.display()))),
            None => Ok(CameraCalibration::tabletop()),
        }
    }

    /// The tasks demos are generated for, checked against the bank.
    pub fn selected_tasks(&self, bank: &TaskBank) -> Result<Vec<TaskSpec>, ConfigError> {
        if self.data.tasks.is_empty() {
            return Ok(bank.in_distribution().cloned().collect());
        }
        self.data
            .tasks
            .iter()
            .map(|n| {
                bank.get(n)
                    .cloned()
                    .map_err(|_| ConfigError::Invalid(format!("unknown task {n:?} in data.tasks")))
            })
            .collect()
    }

    pub fn demo_seeds(&self) -> std::ops::Range<u64> {
        self.data.seed_base..self.data.seed_base + self.data.demos_per_task
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sim: self.simenv.clone(),
            max_steps: self.eval.max_steps,
            trials: self.eval.trials,
            seed_base: self.eval.seed_base,
            execute_steps: self.eval.execute_steps,
            perturb_window: self.eval.perturb_window,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            model: self.model.clone(),
            train: self.training.clone(),
            training_seeds: self.eval.training_seeds.clone(),
            eval: self.eval_config(),
            sampler: self.sampler.clone(),
            variants: self.eval.variants.clone(),
            finetune_modes: self.eval.finetune_modes.clone(),
        }
    }
}
