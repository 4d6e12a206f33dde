//! Camera projection, end-effector pose arithmetic and direction words.
//!
//! Everything here is a pure function over immutable inputs.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (camera-frame z = {0})")]
    PointBehindCamera(f64),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("non-finite pose component")]
    NonFinitePose,
    #[error("deadband must be positive, got {0}")]
    BadDeadband(f64),
    #[error("failed to read calibration: {0}")]
    Io(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// End-effector (or object) pose in the robot base frame.
///
/// Angles are kept in `(-pi, pi]` and the gripper in `[0, 1]`
/// (0 fully open, 1 fully closed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub gripper: f64,
}

impl Pose7 {
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        roll: f64,
        pitch: f64,
        yaw: f64,
        gripper: f64,
    ) -> Result<Self, GeometryError> {
        let raw = [x, y, z, roll, pitch, yaw, gripper];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        Ok(Self {
            x,
            y,
            z,
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
            gripper: gripper.clamp(0.0, 1.0),
        })
    }

    /// Position-only pose with zero rotation and open gripper.
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            gripper: 0.0,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.x,
            self.y,
            self.z,
            self.roll,
            self.pitch,
            self.yaw,
            self.gripper,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    /// Applies a delta: translation and rotation are added, the gripper
    /// field of the delta is an absolute command.
    pub fn apply(&self, d: &Delta7) -> Self {
        Self {
            x: self.x + d.dx,
            y: self.y + d.dy,
            z: self.z + d.dz,
            roll: wrap_angle(self.roll + d.droll),
            pitch: wrap_angle(self.pitch + d.dpitch),
            yaw: wrap_angle(self.yaw + d.dyaw),
            gripper: d.gripper.clamp(0.0, 1.0),
        }
    }
}

/// Six continuous pose deltas plus an absolute gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta7 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
    pub gripper: f64,
}

impl Delta7 {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.droll,
            self.dpitch,
            self.dyaw,
            self.gripper,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            droll: a[3],
            dpitch: a[4],
            dyaw: a[5],
            gripper: a[6],
        }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Continuous delta from pose `a` to pose `b`.
pub fn pose_delta(a: &Pose7, b: &Pose7) -> Delta7 {
    Delta7 {
        dx: b.x - a.x,
        dy: b.y - a.y,
        dz: b.z - a.z,
        droll: wrap_angle(b.roll - a.roll),
        dpitch: wrap_angle(b.pitch - a.pitch),
        dyaw: wrap_angle(b.yaw - a.yaw),
        gripper: b.gripper,
    }
}

/// Pinhole camera with world-to-camera extrinsics. No lens distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub image_width: u32,
    pub image_height: u32,
}

impl CameraCalibration {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCalibration(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        let r = &self.rotation;
        if r.iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return bad("non-finite extrinsics");
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i * 3 + k] * r[j * 3 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return bad("rotation is not orthonormal");
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-9 {
            return bad("rotation determinant is not 1");
        }
        Ok(())
    }

    /// Overhead camera looking straight down at the tabletop workspace,
    /// centred on `(0.4, 0.0)` from one metre up.
    pub fn tabletop() -> Self {
        // camera x = -world y, camera y = -world x, camera z = -world z
        let rotation = [0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0];
        let centre = [0.4, 0.0, 1.0];
        let mut translation = [0.0; 3];
        for i in 0..3 {
            translation[i] = -(0..3).map(|k| rotation[i * 3 + k] * centre[k]).sum::<f64>();
        }
        Self {
            fx: 150.0,
            fy: 150.0,
            cx: 64.0,
            cy: 64.0,
            rotation,
            translation,
            image_width: 128,
            image_height: 128,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(e.to_string()))?;
        let calib: Self = toml::from_str(&text).map_err(|e| GeometryError::Io(e.to_string()))?;
        calib.validate()?;
        Ok(calib)
    }

    /// World point into the camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] =
                r[i * 3] * p[0] + r[i * 3 + 1] * p[1] + r[i * 3 + 2] * p[2] + self.translation[i];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub in_frame: bool,
}

pub fn project_point(calib: &CameraCalibration, p: [f64; 3]) -> Result<Pixel, GeometryError> {
    let [xc, yc, zc] = calib.to_camera(p);
    if zc <= 1e-6 {
        return Err(GeometryError::PointBehindCamera(zc));
    }
    let u = calib.fx * (xc / zc) + calib.cx;
    let v = calib.fy * (yc / zc) + calib.cy;
    let in_frame =
        u >= 0.0 && u < calib.image_width as f64 && v >= 0.0 && v < calib.image_height as f64;
    Ok(Pixel { u, v, in_frame })
}

/// Axis-aligned image-plane box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn is_valid(&self, image_width: u32, image_height: u32) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= image_width as f64
            && self.y_max <= image_height as f64
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

/// Translational motion words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Forward,
        Direction::Backward,
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn opposite(&self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which word each signed translational axis maps to. Entries are
/// `(positive, negative)` for x, y and z, emitted in that axis order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisWords {
    pub x: (Direction, Direction),
    pub y: (Direction, Direction),
    pub z: (Direction, Direction),
}

impl Default for AxisWords {
    fn default() -> Self {
        Self {
            x: (Direction::Forward, Direction::Backward),
            y: (Direction::Left, Direction::Right),
            z: (Direction::Up, Direction::Down),
        }
    }
}

impl AxisWords {
    pub fn words(&self, delta: &Delta7, deadband: f64) -> Result<Vec<Direction>, GeometryError> {
        if !(deadband > 0.0) {
            return Err(GeometryError::BadDeadband(deadband));
        }
        let axes = [(delta.dx, self.x), (delta.dy, self.y), (delta.dz, self.z)];
        Ok(axes
            .into_iter()
            .filter(|(d, _)| d.abs() > deadband)
            .map(|(d, (pos, neg))| if d > 0.0 { pos } else { neg })
            .collect())
    }
}

pub const DEFAULT_DEADBAND: f64 = 0.005;

/// Direction words with the default axis table.
pub fn direction_words(delta: &Delta7, deadband: f64) -> Result<Vec<Direction>, GeometryError> {
    AxisWords::default().words(delta, deadband)
}
