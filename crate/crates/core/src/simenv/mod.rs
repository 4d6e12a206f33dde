//! Deterministic kinematic tabletop world: scene sampling, stepping, a
//! scripted demonstrator, a semantic raster renderer and a detector.

mod tasks;
mod trajectory;

pub use tasks::{ObjectClass, TaskBank, TaskSpec, TaskSplit};
pub use trajectory::{
    read_jsonl, write_jsonl, InstructionKind, TrajectoryRecord, TrajectoryStep,
    TRAJECTORY_SCHEMA_VERSION,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, BBox, CameraCalibration, Delta7, GeometryError, Pose7};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {0} without overlap after 1000 attempts")]
    PlacementFailure(ObjectClass),
    #[error("action out of range: {0}")]
    ActionOutOfRange(String),
    #[error("no feasible expert action: {0}")]
    NoFeasibleAction(String),
    #[error("no {0} in scene")]
    UnknownClass(String),
    #[error("goal {0} cannot be moved")]
    GoalNotMovable(ObjectClass),
    #[error("goal was already perturbed this episode")]
    AlreadyPerturbed,
    #[error("expert failed on task {task} seed {seed}")]
    ExpertFailed { task: String, seed: u64 },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(String),
}

/// World, renderer and demonstrator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    /// Raster resolution G (cells per side).
    pub grid: usize,
    pub grasp_radius: f64,
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
    /// Proportional gain of the scripted demonstrator.
    pub expert_gain: f64,
    /// Per-axis speed cap of the demonstrator (m/step).
    pub expert_max_step: f64,
    /// Distance at which the demonstrator closes or opens the gripper.
    pub expert_tolerance: f64,
    pub ee_start: [f64; 3],
    pub ee_start_jitter: f64,
    pub object_clearance: f64,
    pub max_steps: usize,
    pub detection_dropout: f64,
    /// Probability that a demonstration uses the direct instruction.
    pub direct_instruction_prob: f64,
    pub perturb_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workspace_min: [0.2, -0.2, 0.0],
            workspace_max: [0.6, 0.2, 0.3],
            grid: 16,
            grasp_radius: 0.04,
            max_translation_step: 0.05,
            max_rotation_step: 0.2,
            expert_gain: 0.5,
            expert_max_step: 0.03,
            expert_tolerance: 0.01,
            ee_start: [0.4, 0.0, 0.2],
            ee_start_jitter: 0.05,
            object_clearance: 0.02,
            max_steps: 200,
            detection_dropout: 0.1,
            direct_instruction_prob: 0.3,
            perturb_max: 0.1,
        }
    }
}

impl SimConfig {
    /// Raster channels: one per object class, then ee marker, ee height and gripper.
    pub const CHANNELS: usize = ObjectClass::ALL.len() + 3;
    pub const EE_CHANNEL: usize = ObjectClass::ALL.len();
    pub const HEIGHT_CHANNEL: usize = ObjectClass::ALL.len() + 1;
    pub const GRIPPER_CHANNEL: usize = ObjectClass::ALL.len() + 2;

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if (0..3).any(|i| !(self.workspace_min[i] < self.workspace_max[i])) {
            return bad("workspace min must be below max");
        }
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if !(0.0..1.0).contains(&self.detection_dropout) {
            return bad("detection dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.direct_instruction_prob) {
            return bad("direct instruction probability must be in [0, 1]");
        }
        if !(self.expert_max_step > 0.0 && self.expert_max_step <= self.max_translation_step) {
            return bad("expert speed must be positive and within the action limit");
        }
        if !(self.expert_gain > 0.0 && self.expert_gain <= 1.0) {
            return bad("expert gain must be in (0, 1]");
        }
        if self.max_steps < 2 {
            return bad("max_steps must be at least 2");
        }
        Ok(())
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [
            (self.workspace_max[0] - self.workspace_min[0]) / self.grid as f64,
            (self.workspace_max[1] - self.workspace_min[1]) / self.grid as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub class: ObjectClass,
    /// Centre of the object's box; the gripper field is unused.
    pub pose: Pose7,
    pub extent: [f64; 3],
    pub grasped: bool,
}

impl SceneObject {
    fn overlaps_xy(&self, other: &SceneObject, clearance: f64) -> bool {
        let dx = (self.pose.x - other.pose.x).abs();
        let dy = (self.pose.y - other.pose.y).abs();
        dx < (self.extent[0] + other.extent[0]) / 2.0 + clearance
            && dy < (self.extent[1] + other.extent[1]) / 2.0 + clearance
    }

    fn rest_height(&self) -> f64 {
        self.extent[2] / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub ee: Pose7,
    pub t: usize,
    /// Offset of the grasped object's centre from the end-effector.
    pub grasp_offset: Option<[f64; 3]>,
    pub goal_perturbed: bool,
}

impl SceneState {
    pub fn find(&self, class: ObjectClass) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class == class)
    }

    pub fn grasped(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.grasped)
    }

    pub fn gripper_closed(&self) -> bool {
        self.ee.gripper >= 0.5
    }
}

/// G x G x C semantic raster, row-major over (row = x cell, col = y cell, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn zeros(grid: usize, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid * grid * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.grid + col) * self.channels + ch]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn splat_max(&mut self, weights: &[(usize, usize, f64)], ch: usize, value: f64) {
        for &(r, c, w) in weights {
            let idx = (r * self.grid + c) * self.channels + ch;
            self.data[idx] = self.data[idx].max(w * value);
        }
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.grid * self.grid * self.channels
            && self
                .data
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

fn task_salt(name: &str) -> u64 {
    // FNV-1a, so scene seeds differ per task but stay stable across runs.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn try_layout(
    classes: &[ObjectClass],
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(classes.len());
    for (id, &class) in classes.iter().enumerate() {
        let extent = class.extent();
        let mut placed = None;
        for _ in 0..1000 {
            let margin = [extent[0] / 2.0 + 0.01, extent[1] / 2.0 + 0.01];
            let x =
                rng.gen_range(cfg.workspace_min[0] + margin[0]..cfg.workspace_max[0] - margin[0]);
            let y =
                rng.gen_range(cfg.workspace_min[1] + margin[1]..cfg.workspace_max[1] - margin[1]);
            let cand = SceneObject {
                id,
                class,
                pose: Pose7::at(x, y, extent[2] / 2.0),
                extent,
                grasped: false,
            };
            if objects
                .iter()
                .all(|o| !o.overlaps_xy(&cand, cfg.object_clearance))
            {
                placed = Some(cand);
                break;
            }
        }
        objects.push(placed?);
    }
    Some(objects)
}

/// Samples a five-object scene: target, goal and three distractors.
pub fn reset_scene(task: &TaskSpec, seed: u64, cfg: &SimConfig) -> Result<SceneState, SimError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ task_salt(&task.name));
    let pool: &[ObjectClass] = match task.split {
        TaskSplit::InDistribution => &ObjectClass::IN_DISTRIBUTION,
        TaskSplit::NovelObject => &ObjectClass::ALL,
    };
    let mut candidates: Vec<ObjectClass> = pool
        .iter()
        .copied()
        .filter(|c| *c != task.target_class && *c != task.goal_class)
        .collect();
    candidates.shuffle(&mut rng);
    let mut classes = vec![task.target_class, task.goal_class];
    classes.extend(candidates.into_iter().take(3));

    // Sequential rejection sampling can paint itself into a corner; start
    // the layout over when an object finds no free spot.
    let mut layout = None;
    for _ in 0..100 {
        if let Some(objs) = try_layout(&classes, cfg, &mut rng) {
            layout = Some(objs);
            break;
        }
    }
    let objects = layout.ok_or(SimError::PlacementFailure(classes[classes.len() - 1]))?;
    let j = cfg.ee_start_jitter;
    let ee = Pose7::at(
        cfg.ee_start[0] + rng.gen_range(-j..=j),
        cfg.ee_start[1] + rng.gen_range(-j..=j),
        cfg.ee_start[2],
    );
    Ok(SceneState {
        objects,
        ee,
        t: 0,
        grasp_offset: None,
        goal_perturbed: false,
    })
}

pub fn check_action(a: &Delta7, cfg: &SimConfig) -> Result<(), SimError> {
    let eps = 1e-12;
    if !a.is_finite() {
        return Err(SimError::ActionOutOfRange("non-finite component".into()));
    }
    if a.translation()
        .iter()
        .any(|v| v.abs() > cfg.max_translation_step + eps)
    {
        return Err(SimError::ActionOutOfRange(format!(
            "translation {:?}",
            a.translation()
        )));
    }
    if [a.droll, a.dpitch, a.dyaw]
        .iter()
        .any(|v| v.abs() > cfg.max_rotation_step + eps)
    {
        return Err(SimError::ActionOutOfRange("rotation".into()));
    }
    if !(0.0..=1.0).contains(&a.gripper) {
        return Err(SimError::ActionOutOfRange(format!("gripper {}", a.gripper)));
    }
    Ok(())
}

/// Clamps an arbitrary delta into the per-step limits.
pub fn clamp_action(a: &Delta7, cfg: &SimConfig) -> Delta7 {
    let t = cfg.max_translation_step;
    let r = cfg.max_rotation_step;
    Delta7 {
        dx: a.dx.clamp(-t, t),
        dy: a.dy.clamp(-t, t),
        dz: a.dz.clamp(-t, t),
        droll: a.droll.clamp(-r, r),
        dpitch: a.dpitch.clamp(-r, r),
        dyaw: a.dyaw.clamp(-r, r),
        gripper: a.gripper.clamp(0.0, 1.0),
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist_xy(a: &Pose7, b: &Pose7) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Integrates one action. Grasping happens when the gripper command
/// crosses 0.5 upwards near a graspable object; release on the way down.
pub fn step(s: &SceneState, a: &Delta7, cfg: &SimConfig) -> Result<SceneState, SimError> {
    check_action(a, cfg)?;
    let mut next = s.clone();
    next.t += 1;
    let mut ee = s.ee.apply(a);
    ee.x = ee.x.clamp(cfg.workspace_min[0], cfg.workspace_max[0]);
    ee.y = ee.y.clamp(cfg.workspace_min[1], cfg.workspace_max[1]);
    ee.z = ee.z.clamp(cfg.workspace_min[2], cfg.workspace_max[2]);
    next.ee = ee;

    let was_closed = s.ee.gripper >= 0.5;
    let now_closed = ee.gripper >= 0.5;
    if !was_closed && now_closed && next.grasp_offset.is_none() {
        let pos = ee.position();
        let nearest = next
            .objects
            .iter_mut()
            .filter(|o| o.class.graspable())
            .map(|o| (dist3(o.pose.position(), pos), o))
            .filter(|(d, _)| *d <= cfg.grasp_radius)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, obj)) = nearest {
            obj.grasped = true;
            next.grasp_offset = Some([
                obj.pose.x - pos[0],
                obj.pose.y - pos[1],
                obj.pose.z - pos[2],
            ]);
        }
    } else if was_closed && !now_closed {
        for o in next.objects.iter_mut().filter(|o| o.grasped) {
            o.grasped = false;
            o.pose.z = o.rest_height();
        }
        next.grasp_offset = None;
    }
    if let Some(off) = next.grasp_offset {
        for o in next.objects.iter_mut().filter(|o| o.grasped) {
            o.pose.x = ee.x + off[0];
            o.pose.y = ee.y + off[1];
            o.pose.z = ee.z + off[2];
        }
    }
    Ok(next)
}

/// Scripted pick-and-place demonstrator.
pub fn expert_action(s: &SceneState, task: &TaskSpec, cfg: &SimConfig) -> Result<Delta7, SimError> {
    let target = s
        .find(task.target_class)
        .ok_or_else(|| SimError::NoFeasibleAction(format!("no {} in scene", task.target_class)))?;
    let goal = s
        .find(task.goal_class)
        .ok_or_else(|| SimError::NoFeasibleAction(format!("no {} in scene", task.goal_class)))?;
    let prop = |err: [f64; 3], gripper: f64| {
        let m = cfg.expert_max_step;
        Delta7 {
            dx: (cfg.expert_gain * err[0]).clamp(-m, m),
            dy: (cfg.expert_gain * err[1]).clamp(-m, m),
            dz: (cfg.expert_gain * err[2]).clamp(-m, m),
            gripper,
            ..Default::default()
        }
    };
    let hold = |gripper: f64| Delta7 {
        gripper,
        ..Default::default()
    };
    let ee = s.ee.position();
    if target.grasped {
        let place = [
            goal.pose.x,
            goal.pose.y,
            goal.pose.z + goal.extent[2] / 2.0 + target.extent[2] / 2.0,
        ];
        let err = [
            place[0] - target.pose.x,
            place[1] - target.pose.y,
            place[2] - target.pose.z,
        ];
        if dist3(err, [0.0; 3]) <= cfg.expert_tolerance {
            return Ok(hold(0.0));
        }
        return Ok(prop(err, 1.0));
    }
    if s.gripper_closed() {
        // Closed on nothing, or on the wrong object: let go.
        return Ok(hold(0.0));
    }
    if is_success(s, task) {
        return Ok(hold(0.0));
    }
    let tp = target.pose.position();
    let err = [tp[0] - ee[0], tp[1] - ee[1], tp[2] - ee[2]];
    if dist3(err, [0.0; 3]) <= cfg.expert_tolerance {
        return Ok(hold(1.0));
    }
    Ok(prop(err, 0.0))
}

/// Bilinear weights of a world xy point over raster cell centres.
fn splat_weights(x: f64, y: f64, cfg: &SimConfig) -> Vec<(usize, usize, f64)> {
    let g = cfg.grid;
    let [cw, ch] = cfg.cell_size();
    let gx = ((x - cfg.workspace_min[0]) / cw - 0.5).clamp(0.0, (g - 1) as f64);
    let gy = ((y - cfg.workspace_min[1]) / ch - 0.5).clamp(0.0, (g - 1) as f64);
    let r0 = (gx.floor() as usize).min(g - 1);
    let c0 = (gy.floor() as usize).min(g - 1);
    let fr = gx - r0 as f64;
    let fc = gy - c0 as f64;
    let mut out = Vec::with_capacity(4);
    for (dr, wr) in [(0usize, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0usize, 1.0 - fc), (1, fc)] {
            let (r, c) = (r0 + dr, c0 + dc);
            let w = wr * wc;
            if r < g && c < g && w > 0.0 {
                out.push((r, c, w));
            }
        }
    }
    out
}

/// Renders the semantic raster: object classes, ee marker, ee height and
/// gripper state, each splatted bilinearly onto cell centres.
pub fn render(s: &SceneState, cfg: &SimConfig) -> Observation {
    let mut obs = Observation::zeros(cfg.grid, SimConfig::CHANNELS);
    for o in &s.objects {
        let w = splat_weights(o.pose.x, o.pose.y, cfg);
        obs.splat_max(&w, o.class.channel(), 1.0);
    }
    let w = splat_weights(s.ee.x, s.ee.y, cfg);
    let height = ((s.ee.z - cfg.workspace_min[2]) / (cfg.workspace_max[2] - cfg.workspace_min[2]))
        .clamp(0.0, 1.0);
    obs.splat_max(&w, SimConfig::EE_CHANNEL, 1.0);
    obs.splat_max(&w, SimConfig::HEIGHT_CHANNEL, height);
    obs.splat_max(&w, SimConfig::GRIPPER_CHANNEL, s.ee.gripper);
    obs
}

/// World-space corners of an object's box.
pub fn box_corners(o: &SceneObject) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
        let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
        *corner = [
            o.pose.x + sx * o.extent[0],
            o.pose.y + sy * o.extent[1],
            o.pose.z + sz * o.extent[2],
        ];
    }
    out
}

/// Ground-truth image box of the object, clipped to the image.
pub fn true_bbox(o: &SceneObject, calib: &CameraCalibration) -> Result<Option<BBox>, SimError> {
    let mut b = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for c in box_corners(o) {
        let px = project_point(calib, c)?;
        b.x_min = b.x_min.min(px.u);
        b.y_min = b.y_min.min(px.v);
        b.x_max = b.x_max.max(px.u);
        b.y_max = b.y_max.max(px.v);
    }
    let (w, h) = (calib.image_width as f64, calib.image_height as f64);
    b.x_min = b.x_min.clamp(0.0, w);
    b.x_max = b.x_max.clamp(0.0, w);
    b.y_min = b.y_min.clamp(0.0, h);
    b.y_max = b.y_max.clamp(0.0, h);
    Ok(b.is_valid(calib.image_width, calib.image_height)
        .then_some(b))
}

/// Detector stand-in: the true box, or nothing with probability `dropout_prob`.
pub fn detect<R: Rng>(
    s: &SceneState,
    class: ObjectClass,
    dropout_prob: f64,
    calib: &CameraCalibration,
    rng: &mut R,
) -> Result<Option<BBox>, SimError> {
    if !(0.0..1.0).contains(&dropout_prob) {
        return Err(SimError::InvalidConfig(format!("dropout {dropout_prob}")));
    }
    let obj = s
        .find(class)
        .ok_or_else(|| SimError::UnknownClass(class.to_string()))?;
    let drop = rng.gen::<f64>() < dropout_prob;
    if drop {
        return Ok(None);
    }
    true_bbox(obj, calib)
}

pub fn is_success(s: &SceneState, task: &TaskSpec) -> bool {
    let (Some(target), Some(goal)) = (s.find(task.target_class), s.find(task.goal_class)) else {
        return false;
    };
    !target.grasped
        && !s.gripper_closed()
        && dist_xy(&target.pose, &goal.pose) <= task.success_radius
}

/// Moves the (human hand) goal once by a random planar offset of at most
/// `cfg.perturb_max` metres.
pub fn perturb_goal<R: Rng>(
    s: &SceneState,
    task: &TaskSpec,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<SceneState, SimError> {
    if task.goal_class != ObjectClass::Hand {
        return Err(SimError::GoalNotMovable(task.goal_class));
    }
    if s.goal_perturbed {
        return Err(SimError::AlreadyPerturbed);
    }
    let mut next = s.clone();
    let goal = next
        .objects
        .iter_mut()
        .find(|o| o.class == task.goal_class)
        .ok_or_else(|| SimError::UnknownClass(task.goal_class.to_string()))?;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = rng.gen_range(0.3 * cfg.perturb_max..=cfg.perturb_max);
    let (hx, hy) = (goal.extent[0] / 2.0, goal.extent[1] / 2.0);
    let nx = (goal.pose.x + radius * angle.cos())
        .clamp(cfg.workspace_min[0] + hx, cfg.workspace_max[0] - hx);
    let ny = (goal.pose.y + radius * angle.sin())
        .clamp(cfg.workspace_min[1] + hy, cfg.workspace_max[1] - hy);
    goal.pose.x = nx;
    goal.pose.y = ny;
    next.goal_perturbed = true;
    Ok(next)
}

/// Rolls out the demonstrator and records every step, ending on a
/// success frame whose action is a no-op.
pub fn generate_demo(
    task: &TaskSpec,
    seed: u64,
    cfg: &SimConfig,
    calib: &CameraCalibration,
) -> Result<TrajectoryRecord, SimError> {
    let mut s = reset_scene(task, seed, cfg)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ task_salt(&task.name));
    let (instruction, kind) = if rng.gen::<f64>() < cfg.direct_instruction_prob {
        (task.direct_instruction.clone(), InstructionKind::Direct)
    } else {
        let i = rng.gen_range(0..task.intention_instructions.len());
        (
            task.intention_instructions[i].clone(),
            InstructionKind::Intention,
        )
    };
    let mut steps = Vec::new();
    for _ in 0..cfg.max_steps {
        let detection = detect(
            &s,
            task.target_class,
            cfg.detection_dropout,
            calib,
            &mut rng,
        )?;
        if is_success(&s, task) {
            steps.push(TrajectoryStep {
                t: s.t,
                observation: render(&s, cfg),
                pose: s.ee,
                action: Delta7 {
                    gripper: s.ee.gripper,
                    ..Default::default()
                },
                detection,
            });
            return Ok(TrajectoryRecord {
                task: task.name.clone(),
                seed,
                instruction,
                instruction_kind: kind,
                calibration: calib.clone(),
                steps,
            });
        }
        let a = expert_action(&s, task, cfg)?;
        steps.push(TrajectoryStep {
            t: s.t,
            observation: render(&s, cfg),
            pose: s.ee,
            action: a,
            detection,
        });
        s = step(&s, &a, cfg)?;
    }
    Err(SimError::ExpertFailed {
        task: task.name.clone(),
        seed,
    })
}
