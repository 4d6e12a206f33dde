//! Demonstration records and their JSONL form (one step per line).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Observation, SimError};
use crate::geometry::{BBox, CameraCalibration, Delta7, Pose7};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Direct,
    Intention,
    UnseenIntention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub observation: Observation,
    pub pose: Pose7,
    pub action: Delta7,
    pub detection: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task: String,
    pub seed: u64,
    pub instruction: String,
    pub instruction_kind: InstructionKind,
    pub calibration: CameraCalibration,
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectoryRecord {
    /// Identifier used to reference steps from the reasoning dataset.
    pub fn id(&self) -> String {
        format!("{}-{}", self.task, self.seed)
    }
}

/// Flat line layout of one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    schema_version: u32,
    traj_id: String,
    task: String,
    seed: u64,
    instruction: String,
    instruction_kind: InstructionKind,
    t: usize,
    grid: usize,
    channels: usize,
    observation: Vec<f64>,
    pose: [f64; 7],
    action: [f64; 7],
    bbox: Option<[f64; 4]>,
}

/// Writes records as JSONL. The calibration is not repeated per line; it
/// lives in the accompanying manifest.
pub fn write_jsonl<W: Write>(records: &[TrajectoryRecord], mut out: W) -> Result<(), SimError> {
    for rec in records {
        for st in &rec.steps {
            let line = StepLine {
                schema_version: TRAJECTORY_SCHEMA_VERSION,
                traj_id: rec.id(),
                task: rec.task.clone(),
                seed: rec.seed,
                instruction: rec.instruction.clone(),
                instruction_kind: rec.instruction_kind,
                t: st.t,
                grid: st.observation.grid,
                channels: st.observation.channels,
                observation: st.observation.data.clone(),
                pose: st.pose.to_array(),
                action: st.action.to_array(),
                bbox: st.detection.map(|b| b.to_array()),
            };
            let text = serde_json::to_string(&line).map_err(|e| SimError::Io(e.to_string()))?;
            writeln!(out, "{text}").map_err(|e| SimError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(
    input: R,
    calibration: &CameraCalibration,
) -> Result<Vec<TrajectoryRecord>, SimError> {
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SimError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: StepLine = serde_json::from_str(&line)
            .map_err(|e| SimError::Io(format!("line {}: {e}", n + 1)))?;
        if l.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(SimError::Io(format!(
                "line {}: unsupported schema_version {}",
                n + 1,
                l.schema_version
            )));
        }
        let step = TrajectoryStep {
            t: l.t,
            observation: Observation {
                grid: l.grid,
                channels: l.channels,
                data: l.observation,
            },
            pose: Pose7::from_array(l.pose)?,
            action: Delta7::from_array(l.action),
            detection: l.bbox.map(BBox::from_array),
        };
        match out.last_mut() {
            Some(rec) if rec.id() == l.traj_id => rec.steps.push(step),
            _ => out.push(TrajectoryRecord {
                task: l.task,
                seed: l.seed,
                instruction: l.instruction,
                instruction_kind: l.instruction_kind,
                calibration: calibration.clone(),
                steps: vec![step],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{generate_demo, SimConfig, TaskBank};

    #[test]
    fn jsonl_round_trip() {
        let bank = TaskBank::standard();
        let cfg = SimConfig::default();
        let calib = CameraCalibration::tabletop();
        let recs: Vec<_> = (0..3)
            .map(|s| generate_demo(&bank.tasks[s as usize], s, &cfg, &calib).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        let back = read_jsonl(&buf[..], &calib).unwrap();
        assert_eq!(back, recs);
    }
}
