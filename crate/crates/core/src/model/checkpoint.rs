//! Checkpoint directories: `manifest.json` (config, vocabulary, tensor
//! table, content hash) next to `params.bin` (little-endian f64 payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use super::{make_schedule, Model, ModelConfig, ModelError, Vocab};
use crate::annotator::ReasoningFormat;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Init,
    Stage1,
    Stage2,
}

/// A model plus the training facts needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stage: StageTag,
    /// Reasoning format the action expert is conditioned on; `None` means
    /// the condition sequence carries no reasoning.
    pub conditioning: Option<ReasoningFormat>,
    /// Formats left out of stage-1 data.
    pub omitted_formats: Vec<ReasoningFormat>,
    /// Free-form training notes (finetune mode, seeds).
    pub notes: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model, stage: StageTag) -> Self {
        Self {
            model,
            stage,
            conditioning: Some(ReasoningFormat::Compact),
            omitted_formats: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn hash(&self) -> String {
        self.model.params.hash(None)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    stage: StageTag,
    conditioning: Option<ReasoningFormat>,
    omitted_formats: Vec<ReasoningFormat>,
    notes: Vec<(String, String)>,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

fn io(e: impl std::fmt::Display) -> ModelError {
    ModelError::Io(e.to_string())
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<String, ModelError> {
    fs::create_dir_all(dir).map_err(io)?;
    let params = &ckpt.model.params;
    let mut payload = Vec::with_capacity(params.count(None) * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            rows: p.value.rows,
            cols: p.value.cols,
        });
        for v in &p.value.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = ckpt.hash();
    let manifest = Manifest {
        schema_version: CHECKPOINT_VERSION,
        stage: ckpt.stage,
        conditioning: ckpt.conditioning,
        omitted_formats: ckpt.omitted_formats.clone(),
        notes: ckpt.notes.clone(),
        config: ckpt.model.config.clone(),
        vocab: ckpt.model.vocab.words().to_vec(),
        tensors,
        sha256: hash.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(io)?;
    fs::write(dir.join(MANIFEST), text + "\n").map_err(io)?;
    fs::write(dir.join(PAYLOAD), payload).map_err(io)?;
    Ok(hash)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(io)?;
    let m: Manifest = serde_json::from_str(&text).map_err(io)?;
    if m.schema_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported schema_version {}",
            m.schema_version
        )));
    }
    m.config.validate()?;
    let payload = fs::read(dir.join(PAYLOAD)).map_err(io)?;
    let expected: usize = m.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "payload has {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for t in &m.tensors {
        let n = t.rows * t.cols;
        let data = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        off += n * 8;
        store.add(t.name.clone(), t.group, Tensor::from_vec(t.rows, t.cols, data));
    }
    if store.hash(None) != m.sha256 {
        return Err(ModelError::Checkpoint("content hash mismatch".into()));
    }
    let schedule = make_schedule(
        m.config.diffusion_steps,
        m.config.beta_start,
        m.config.beta_end,
    )?;
    let model = Model {
        vocab: Vocab::from_words(m.vocab)?,
        config: m.config,
        params: store,
        schedule,
    };
    // Fails loudly when the manifest does not describe this architecture.
    let reference = Model::new(model.config.clone(), model.vocab.clone())?;
    for (_, p) in reference.params.iter() {
        let id = model.params.id(&p.name).ok_or_else(|| {
            ModelError::Checkpoint(format!("missing tensor {}", p.name))
        })?;
        if model.params.value(id).shape() != p.value.shape() {
            return Err(ModelError::Checkpoint(format!("bad shape for {}", p.name)));
        }
    }
    if reference.params.len() != model.params.len() {
        return Err(ModelError::Checkpoint("unexpected extra tensors".into()));
    }
    Ok(Checkpoint {
        model,
        stage: m.stage,
        conditioning: m.conditioning,
        omitted_formats: m.omitted_formats,
        notes: m.notes,
    })
}
