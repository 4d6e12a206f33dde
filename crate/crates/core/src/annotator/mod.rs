//! Reasoning annotation: intention chains, spatial chains, compact
//! reasoning and delta-action tokens, integrated into a JSONL dataset.

mod dataset;
mod llm;

pub use dataset::{
    action_chunk, build_dataset, read_dataset, write_dataset, DatasetBuild, ReasoningFormat,
    ReasoningSample, SampleSplit, DATASET_SCHEMA_VERSION,
};
pub use llm::{client_from_env, intention_prompt, Backend, HttpClient, LlmClient, TemplateClient};

pub use crate::geometry::BBox;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AxisWords, Delta7, Direction, GeometryError, Pixel, Pose7};
use crate::simenv::{ObjectClass, SimError, TaskSpec};

#[derive(Debug, Error)]
pub enum AnnotError {
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
    #[error("llm client: {0}")]
    Client(String),
    #[error("no valid detection in sequence")]
    NoValidFrames,
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("cannot parse spatial chain: {0}")]
    SpatialParse(String),
    #[error("cannot parse compact reasoning: {0}")]
    CompactParse(String),
    #[error("invalid annotator config: {0}")]
    InvalidConfig(String),
    #[error("no trajectories given")]
    NoTrajectories,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(String),
}

/// Per-dimension `[lo, hi]` ranges of the six pose deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinRanges {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl Default for BinRanges {
    fn default() -> Self {
        Self {
            lo: [-0.05, -0.05, -0.05, -0.2, -0.2, -0.2],
            hi: [0.05, 0.05, 0.05, 0.2, 0.2, 0.2],
        }
    }
}

pub const NUM_BINS: usize = 16;
pub const LOC_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub deadband: f64,
    pub bin_ranges: BinRanges,
    pub axis_words: AxisWords,
    /// Length H of the action chunk attached to each sample.
    pub chunk_horizon: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            deadband: crate::geometry::DEFAULT_DEADBAND,
            bin_ranges: BinRanges::default(),
            axis_words: AxisWords::default(),
            chunk_horizon: 8,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<(), AnnotError> {
        if !(self.deadband > 0.0) {
            return Err(AnnotError::InvalidConfig("deadband must be positive".into()));
        }
        if (0..6).any(|i| !(self.bin_ranges.lo[i] < self.bin_ranges.hi[i])) {
            return Err(AnnotError::InvalidConfig("bin range lo must be below hi".into()));
        }
        if self.chunk_horizon == 0 {
            return Err(AnnotError::InvalidConfig("chunk horizon must be positive".into()));
        }
        Ok(())
    }
}

/// What the chain writer needs to know about the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSummary {
    pub target: String,
    pub goal: String,
    pub relation: String,
    pub objects: Vec<String>,
}

impl SceneSummary {
    pub fn from_task(task: &TaskSpec) -> Self {
        Self {
            target: task.target_class.display().to_string(),
            goal: task.goal_class.display().to_string(),
            relation: task.relation.clone(),
            objects: vec![
                task.target_class.display().to_string(),
                task.goal_class.display().to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionChain {
    pub steps: Vec<String>,
    pub summary: String,
}

impl IntentionChain {
    pub fn validate(&self) -> Result<(), AnnotError> {
        if self.steps.len() != 4 {
            return Err(AnnotError::MalformedCompletion(format!(
                "expected 4 steps, got {}",
                self.steps.len()
            )));
        }
        if self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(AnnotError::MalformedCompletion("empty step".into()));
        }
        if self.summary.matches('.').count() != 1 || !self.summary.ends_with('.') {
            return Err(AnnotError::MalformedCompletion(
                "summary must be exactly one sentence".into(),
            ));
        }
        Ok(())
    }

    /// Parses the numbered completion format.
    pub fn parse_completion(text: &str) -> Result<Self, AnnotError> {
        let mut steps = Vec::new();
        let mut summary = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("summary:") {
                summary = Some(normalize_sentence(rest));
                continue;
            }
            let numbered = line
                .split_once(". ")
                .filter(|(n, _)| n.parse::<usize>().is_ok());
            match numbered {
                Some((_, body)) => steps.push(normalize_words(body)),
                None => {
                    return Err(AnnotError::MalformedCompletion(format!(
                        "unexpected line: {line}"
                    )))
                }
            }
        }
        let chain = Self {
            steps,
            summary: summary
                .ok_or_else(|| AnnotError::MalformedCompletion("missing summary".into()))?,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Training text: the four steps then the summary, space separated.
    pub fn render(&self) -> String {
        format!(
            "{} . {} . {} . {} . summary {}",
            self.steps[0], self.steps[1], self.steps[2], self.steps[3], self.summary
        )
    }

    /// The final plan step.
    pub fn plan(&self) -> &str {
        &self.steps[3]
    }
}

fn normalize_words(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercases and guarantees a single terminal " ." token.
fn normalize_sentence(s: &str) -> String {
    let words = normalize_words(&s.replace('.', " "));
    format!("{words} .")
}

/// Writes a four-step intention chain. The external backend gets one retry
/// on a malformed answer.
pub fn intention_chain(
    instruction: &str,
    scene: &SceneSummary,
    client: &dyn LlmClient,
) -> Result<IntentionChain, AnnotError> {
    if instruction.trim().is_empty() {
        return Err(AnnotError::EmptyInstruction);
    }
    let prompt = intention_prompt(instruction, scene);
    let attempts = match client.backend() {
        Backend::Template => 1,
        Backend::ExternalHttp => 2,
    };
    let mut last = None;
    for _ in 0..attempts {
        match client.complete(&prompt).and_then(|t| IntentionChain::parse_completion(&t)) {
            Ok(chain) => return Ok(chain),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

/// Fills frames with missing detections from the nearest valid frame,
/// preferring the earlier one on ties.
pub fn interpolate_bboxes(seq: &[Option<BBox>]) -> Result<Vec<BBox>, AnnotError> {
    let valid: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|_| i))
        .collect();
    if valid.is_empty() {
        return Err(AnnotError::NoValidFrames);
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut next = 0usize;
    for (i, b) in seq.iter().enumerate() {
        if let Some(b) = b {
            out.push(*b);
            continue;
        }
        while next < valid.len() && valid[next] < i {
            next += 1;
        }
        let before = next.checked_sub(1).map(|k| valid[k]);
        let after = valid.get(next).copied();
        let pick = match (before, after) {
            (Some(b), Some(a)) => {
                if i - b <= a - i {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => unreachable!(),
        };
        out.push(seq[pick].unwrap());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeltaActionTokens {
    pub pose_bins: [u8; 6],
    pub gripper_token: u8,
}

pub fn discretize_delta(delta: &Delta7, ranges: &BinRanges) -> DeltaActionTokens {
    let v = delta.to_array();
    let mut pose_bins = [0u8; 6];
    for i in 0..6 {
        let width = (ranges.hi[i] - ranges.lo[i]) / NUM_BINS as f64;
        let idx = ((v[i] - ranges.lo[i]) / width).floor();
        pose_bins[i] = idx.clamp(0.0, (NUM_BINS - 1) as f64) as u8;
    }
    DeltaActionTokens {
        pose_bins,
        gripper_token: u8::from(delta.gripper >= 0.5),
    }
}

/// Bin centres back to a continuous delta.
pub fn undiscretize(tokens: &DeltaActionTokens, ranges: &BinRanges) -> Delta7 {
    let mut v = [0.0; 7];
    for i in 0..6 {
        let width = (ranges.hi[i] - ranges.lo[i]) / NUM_BINS as f64;
        v[i] = ranges.lo[i] + (tokens.pose_bins[i] as f64 + 0.5) * width;
    }
    v[6] = if tokens.gripper_token == 1 { 1.0 } else { 0.0 };
    Delta7::from_array(v)
}

/// Image coordinate quantized to one of [`LOC_BINS`] cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocPoint {
    pub x: u8,
    pub y: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocBox {
    pub min: LocPoint,
    pub max: LocPoint,
}

pub fn quantize_coord(p: f64, extent: u32) -> u8 {
    ((p / extent as f64) * LOC_BINS as f64)
        .floor()
        .clamp(0.0, (LOC_BINS - 1) as f64) as u8
}

pub fn quantize_pixel(px: &Pixel, width: u32, height: u32) -> LocPoint {
    LocPoint {
        x: quantize_coord(px.u, width),
        y: quantize_coord(px.v, height),
    }
}

pub fn quantize_bbox(b: &BBox, width: u32, height: u32) -> LocBox {
    LocBox {
        min: LocPoint {
            x: quantize_coord(b.x_min, width),
            y: quantize_coord(b.y_min, height),
        },
        max: LocPoint {
            x: quantize_coord(b.x_max, width),
            y: quantize_coord(b.y_max, height),
        },
    }
}

pub fn loc_x_token(i: u8) -> String {
    format!("<lx{i}>")
}

pub fn loc_y_token(i: u8) -> String {
    format!("<ly{i}>")
}

pub fn action_bin_token(dim: usize, bin: u8) -> String {
    format!("<a{dim}_{bin}>")
}

pub fn gripper_token(g: u8) -> String {
    format!("<grip{g}>")
}

/// One-sentence intention summary grounded with end-effector and target
/// locations and the step's delta-action tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialChain {
    pub summary: String,
    pub ee: LocPoint,
    pub target_box: LocBox,
    pub delta_tokens: DeltaActionTokens,
}

/// Number of structural tokens that follow the summary.
const SPATIAL_TAIL: usize = 16;

impl SpatialChain {
    pub fn render(&self) -> String {
        let mut parts = vec![
            self.summary.clone(),
            "ee".into(),
            loc_x_token(self.ee.x),
            loc_y_token(self.ee.y),
            "box".into(),
            loc_x_token(self.target_box.min.x),
            loc_y_token(self.target_box.min.y),
            loc_x_token(self.target_box.max.x),
            loc_y_token(self.target_box.max.y),
            "act".into(),
        ];
        for (d, b) in self.delta_tokens.pose_bins.iter().enumerate() {
            parts.push(action_bin_token(d, *b));
        }
        parts.push(gripper_token(self.delta_tokens.gripper_token));
        parts.join(" ")
    }

    pub fn parse(text: &str) -> Result<Self, AnnotError> {
        let err = |m: &str| AnnotError::SpatialParse(m.to_string());
        let toks: Vec<&str> = text.split(' ').collect();
        if toks.len() <= SPATIAL_TAIL {
            return Err(err("too short"));
        }
        let (head, tail) = toks.split_at(toks.len() - SPATIAL_TAIL);
        let num = |t: &str, prefix: &str, suffix: &str| -> Result<u8, AnnotError> {
            t.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(suffix))
                .and_then(|n| n.parse::<u8>().ok())
                .ok_or_else(|| err(&format!("bad token {t}")))
        };
        let lx = |t| num(t, "<lx", ">").and_then(|v| check(v, LOC_BINS));
        let ly = |t| num(t, "<ly", ">").and_then(|v| check(v, LOC_BINS));
        if tail[0] != "ee" || tail[3] != "box" || tail[8] != "act" {
            return Err(err("missing structure words"));
        }
        let mut pose_bins = [0u8; 6];
        for (d, bin) in pose_bins.iter_mut().enumerate() {
            *bin = check(num(tail[9 + d], &format!("<a{d}_"), ">")?, NUM_BINS)?;
        }
        let gripper_token = check(num(tail[15], "<grip", ">")?, 2)?;
        Ok(Self {
            summary: head.join(" "),
            ee: LocPoint {
                x: lx(tail[1])?,
                y: ly(tail[2])?,
            },
            target_box: LocBox {
                min: LocPoint {
                    x: lx(tail[4])?,
                    y: ly(tail[5])?,
                },
                max: LocPoint {
                    x: lx(tail[6])?,
                    y: ly(tail[7])?,
                },
            },
            delta_tokens: DeltaActionTokens {
                pose_bins,
                gripper_token,
            },
        })
    }
}

fn check(v: u8, limit: usize) -> Result<u8, AnnotError> {
    if (v as usize) < limit {
        Ok(v)
    } else {
        Err(AnnotError::SpatialParse(format!("index {v} out of range")))
    }
}

pub fn spatial_chain(
    chain: &IntentionChain,
    ee_px: &Pixel,
    bbox: &BBox,
    tokens: &DeltaActionTokens,
    image_width: u32,
    image_height: u32,
) -> SpatialChain {
    SpatialChain {
        summary: chain.summary.clone(),
        ee: quantize_pixel(ee_px, image_width, image_height),
        target_box: quantize_bbox(bbox, image_width, image_height),
        delta_tokens: *tokens,
    }
}

/// "move <direction> to <object>"; no directions means "hold".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactReasoning {
    pub directions: Vec<Direction>,
    pub object: String,
}

impl CompactReasoning {
    pub fn render(&self) -> String {
        let dirs = if self.directions.is_empty() {
            "hold".to_string()
        } else {
            self.directions
                .iter()
                .map(Direction::as_str)
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("move {dirs} to {}", self.object)
    }

    pub fn parse(text: &str) -> Result<Self, AnnotError> {
        let caps = compact_grammar()
            .captures(text)
            .ok_or_else(|| AnnotError::CompactParse(text.to_string()))?;
        let dirs = &caps[1];
        let directions = if dirs == "hold" {
            vec![]
        } else {
            dirs.split(' ').filter_map(Direction::parse).collect()
        };
        Ok(Self {
            directions,
            object: caps[3].to_string(),
        })
    }
}

/// Grammar of compact reasoning over the known object names.
pub fn compact_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let objects = ObjectClass::ALL
            .iter()
            .map(|c| regex::escape(c.display()))
            .collect::<Vec<_>>()
            .join("|");
        let dir = "forward|backward|left|right|up|down";
        Regex::new(&format!(
            "^move ((?:{dir}|hold)( (?:{dir}))*) to ({objects})$"
        ))
        .unwrap()
    })
}

pub fn matches_compact_grammar(text: &str) -> bool {
    compact_grammar().is_match(text)
}

/// Compact reasoning for one step: motion words from the pose change and
/// the object chosen by gripper state (open: target, closed: goal).
pub fn compact_reasoning(
    pose: &Pose7,
    next_pose: &Pose7,
    task: &TaskSpec,
    cfg: &AnnotatorConfig,
) -> Result<CompactReasoning, AnnotError> {
    let delta = crate::geometry::pose_delta(pose, next_pose);
    let directions = cfg.axis_words.words(&delta, cfg.deadband)?;
    let object = if pose.gripper < 0.5 {
        task.target_class
    } else {
        task.goal_class
    };
    Ok(CompactReasoning {
        directions,
        object: object.display().to_string(),
    })
}
