//! Assembly of reasoning samples from demonstrations.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compact_reasoning, discretize_delta, intention_chain, interpolate_bboxes, normalize_words,
    spatial_chain, AnnotError, AnnotatorConfig, LlmClient, SceneSummary,
};
use crate::geometry::{project_point, Delta7};
use crate::simenv::{InstructionKind, TaskBank, TrajectoryRecord};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningFormat {
    Intention,
    Spatial,
    Compact,
}

impl ReasoningFormat {
    pub const ALL: [ReasoningFormat; 3] = [Self::Intention, Self::Spatial, Self::Compact];

    /// Special token placed before the reasoning in the prompt.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Intention => "<intention>",
            Self::Spatial => "<spatial>",
            Self::Compact => "<compact>",
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Intention => "intention",
            Self::Spatial => "spatial",
            Self::Compact => "compact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    Train,
    Heldout,
}

/// One supervised example. The observation is referenced by
/// `(traj_id, step)` rather than copied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningSample {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<u32>>,
    pub prompt_text: String,
    pub target_text: String,
    pub format: ReasoningFormat,
    pub split: SampleSplit,
    /// Next H actions from this step, zero-padded past the episode end.
    pub action_chunk: Vec<[f64; 7]>,
    pub traj_id: String,
    pub step: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetBuild {
    pub samples: Vec<ReasoningSample>,
    /// Trajectories that could not be annotated, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl DatasetBuild {
    pub fn count(&self, format: ReasoningFormat) -> usize {
        self.samples.iter().filter(|s| s.format == format).count()
    }
}

/// The `horizon` actions starting at step `t`, zero-padded.
pub fn action_chunk(rec: &TrajectoryRecord, t: usize, horizon: usize) -> Vec<[f64; 7]> {
    (t..t + horizon)
        .map(|k| {
            rec.steps
                .get(k)
                .map(|s| s.action.to_array())
                .unwrap_or_else(|| Delta7::default().to_array())
        })
        .collect()
}

fn annotate_one(
    rec: &TrajectoryRecord,
    bank: &TaskBank,
    formats: &BTreeSet<ReasoningFormat>,
    client: &dyn LlmClient,
    cfg: &AnnotatorConfig,
) -> Result<Vec<ReasoningSample>, AnnotError> {
    let task = bank.get(&rec.task)?;
    let prompt_text = normalize_words(&rec.instruction);
    let split = match rec.instruction_kind {
        InstructionKind::UnseenIntention => SampleSplit::Heldout,
        _ => SampleSplit::Train,
    };
    let needs_chain =
        formats.contains(&ReasoningFormat::Intention) || formats.contains(&ReasoningFormat::Spatial);
    let chain = if needs_chain {
        Some(intention_chain(&rec.instruction, &SceneSummary::from_task(task), client)?)
    } else {
        None
    };
    let boxes = if formats.contains(&ReasoningFormat::Spatial) {
        let dets: Vec<_> = rec.steps.iter().map(|s| s.detection).collect();
        Some(interpolate_bboxes(&dets)?)
    } else {
        None
    };
    let calib = &rec.calibration;
    let mut out = Vec::with_capacity(rec.steps.len() * formats.len());
    for (i, st) in rec.steps.iter().enumerate() {
        let chunk = action_chunk(rec, i, cfg.chunk_horizon);
        for &format in formats {
            let target_text = match format {
                ReasoningFormat::Intention => chain.as_ref().unwrap().render(),
                ReasoningFormat::Spatial => {
                    let px = project_point(calib, st.pose.position())?;
                    let tokens = discretize_delta(&st.action, &cfg.bin_ranges);
                    spatial_chain(
                        chain.as_ref().unwrap(),
                        &px,
                        &boxes.as_ref().unwrap()[i],
                        &tokens,
                        calib.image_width,
                        calib.image_height,
                    )
                    .render()
                }
                ReasoningFormat::Compact => {
                    let next = st.pose.apply(&st.action);
                    compact_reasoning(&st.pose, &next, task, cfg)?.render()
                }
            };
            out.push(ReasoningSample {
                schema_version: DATASET_SCHEMA_VERSION,
                prompt_tokens: None,
                prompt_text: prompt_text.clone(),
                target_text,
                format,
                split,
                action_chunk: chunk.clone(),
                traj_id: rec.id(),
                step: st.t,
            });
        }
    }
    Ok(out)
}

/// Annotates every step of every trajectory in each requested format.
/// Trajectories are processed in parallel; the output order follows the
/// input order, then step, then format.
pub fn build_dataset(
    trajs: &[TrajectoryRecord],
    bank: &TaskBank,
    formats: &BTreeSet<ReasoningFormat>,
    client: &dyn LlmClient,
    cfg: &AnnotatorConfig,
) -> Result<DatasetBuild, AnnotError> {
    if trajs.is_empty() {
        return Err(AnnotError::NoTrajectories);
    }
    cfg.validate()?;
    let results: Vec<_> = trajs
        .par_iter()
        .map(|rec| annotate_one(rec, bank, formats, client, cfg))
        .collect();
    let mut build = DatasetBuild::default();
    for (rec, res) in trajs.iter().zip(results) {
        match res {
            Ok(samples) => build.samples.extend(samples),
            // A missing task or broken client affects every trajectory.
            Err(e @ (AnnotError::Sim(_) | AnnotError::Client(_) | AnnotError::InvalidConfig(_))) => {
                return Err(e)
            }
            Err(e) => {
                log::warn!("skipping trajectory {}: {e}", rec.id());
                build.skipped.push((rec.id(), e.to_string()));
            }
        }
    }
    Ok(build)
}

pub fn write_dataset<W: Write>(samples: &[ReasoningSample], mut out: W) -> Result<(), AnnotError> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| AnnotError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| AnnotError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<ReasoningSample>, AnnotError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| AnnotError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ReasoningSample = serde_json::from_str(&line)
            .map_err(|e| AnnotError::Io(format!("line {}: {e}", n + 1)))?;
        if s.schema_version != DATASET_SCHEMA_VERSION {
            return Err(AnnotError::Io(format!(
                "line {}: unsupported schema_version {}",
                n + 1,
                s.schema_version
            )));
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::{matches_compact_grammar, SpatialChain, TemplateClient};
    use crate::geometry::CameraCalibration;
    use crate::simenv::{generate_demo, SimConfig};

    fn demos(n: u64) -> Vec<TrajectoryRecord> {
        let bank = TaskBank::standard();
        let cfg = SimConfig::default();
        let calib = CameraCalibration::tabletop();
        (0..n)
            .map(|s| generate_demo(&bank.tasks[(s % 6) as usize], s, &cfg, &calib).unwrap())
            .collect()
    }

    fn formats(f: &[ReasoningFormat]) -> BTreeSet<ReasoningFormat> {
        f.iter().copied().collect()
    }

    #[test]
    fn cardinality_per_format() {
        let trajs = demos(3);
        let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
        let bank = TaskBank::standard();
        let cfg = AnnotatorConfig::default();
        let compact = build_dataset(
            &trajs,
            &bank,
            &formats(&[ReasoningFormat::Compact]),
            &TemplateClient,
            &cfg,
        )
        .unwrap();
        assert_eq!(compact.samples.len(), steps);
        let all = build_dataset(
            &trajs,
            &bank,
            &formats(&ReasoningFormat::ALL),
            &TemplateClient,
            &cfg,
        )
        .unwrap();
        assert!(all.skipped.is_empty());
        assert_eq!(all.samples.len(), 3 * steps);
    }

    #[test]
    fn targets_follow_their_grammar() {
        let trajs = demos(6);
        let build = build_dataset(
            &trajs,
            &TaskBank::standard(),
            &formats(&ReasoningFormat::ALL),
            &TemplateClient,
            &AnnotatorConfig::default(),
        )
        .unwrap();
        for s in &build.samples {
            match s.format {
                ReasoningFormat::Compact => assert!(matches_compact_grammar(&s.target_text)),
                ReasoningFormat::Spatial => {
                    SpatialChain::parse(&s.target_text).unwrap();
                }
                ReasoningFormat::Intention => assert!(s.target_text.contains("summary")),
            }
            assert_eq!(s.action_chunk.len(), 8);
        }
    }

    #[test]
    fn chunk_is_zero_padded() {
        let trajs = demos(1);
        let rec = &trajs[0];
        let last = rec.steps.len() - 1;
        let chunk = action_chunk(rec, last, 4);
        assert_eq!(chunk[0], rec.steps[last].action.to_array());
        assert!(chunk[1..].iter().all(|a| a.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let trajs = demos(4);
        let bank = TaskBank::standard();
        let f = formats(&ReasoningFormat::ALL);
        let cfg = AnnotatorConfig::default();
        let a = build_dataset(&trajs, &bank, &f, &TemplateClient, &cfg).unwrap();
        let b = build_dataset(&trajs, &bank, &f, &TemplateClient, &cfg).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_dataset(&a.samples, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), a.samples);
    }

    #[test]
    fn undetectable_trajectory_is_skipped() {
        let mut trajs = demos(2);
        for st in &mut trajs[1].steps {
            st.detection = None;
        }
        let build = build_dataset(
            &trajs,
            &TaskBank::standard(),
            &formats(&[ReasoningFormat::Spatial]),
            &TemplateClient,
            &AnnotatorConfig::default(),
        )
        .unwrap();
        assert_eq!(build.skipped.len(), 1);
        assert_eq!(build.skipped[0].0, trajs[1].id());
        assert_eq!(build.samples.len(), trajs[0].steps.len());
    }
}
