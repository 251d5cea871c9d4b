//! Domain types shared by every pipeline stage: configuration, raw scene
//! input, scene elements and the compacted model input.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub type Point3 = [f64; 3];

/// Box row layout: center xyz, size lwh, heading.
pub type BoxRow = [f64; 7];

pub const BOX_WIDTH: usize = 7;

/// Maps an angle onto `[-π, π)`.
pub fn normalize_heading(heading: f64) -> f64 {
    let h = (heading + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if h >= PI {
        h - 2.0 * PI
    } else {
        h
    }
}

pub fn box_row(center: Point3, size: [f64; 3], heading: f64) -> BoxRow {
    [
        center[0], center[1], center[2], size[0], size[1], size[2], heading,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElementBudget {
    pub agent: usize,
    pub open_set: usize,
    pub ground: usize,
}

impl Default for ElementBudget {
    fn default() -> Self {
        Self {
            agent: 128,
            open_set: 384,
            ground: 256,
        }
    }
}

impl ElementBudget {
    pub fn total(&self) -> usize {
        self.agent + self.open_set + self.ground
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointBudget {
    pub total: usize,
    pub agent: usize,
    pub open_set: usize,
    pub ground: usize,
}

impl Default for PointBudget {
    fn default() -> Self {
        Self {
            total: 65536,
            agent: 16384,
            open_set: 24576,
            ground: 24576,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iters: usize,
    pub inlier_threshold_m: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iters: 256,
            inlier_threshold_m: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub radius_m: f64,
    pub min_points: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            radius_m: 0.5,
            min_points: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Association gate on center distance (m).
    pub gate_m: f64,
    /// Time between consecutive frames (s).
    pub frame_dt_s: f64,
    /// Diagonal process noise on the velocity components.
    pub process_noise: f64,
    /// Diagonal measurement noise on the position components.
    pub measurement_noise: f64,
    /// Initial velocity variance of a freshly spawned track.
    pub initial_velocity_var: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            gate_m: 2.0,
            frame_dt_s: 0.1,
            process_noise: 1e-2,
            measurement_noise: 1e-2,
            initial_velocity_var: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// Lowest camera id with the point in view wins.
    #[default]
    FirstCamera,
    /// Mean over every camera with the point in view.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub sampling: Sampling,
    pub overlap: Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Hidden width of both geometry MLPs.
    pub hidden: usize,
    pub heads: usize,
    pub layer_norm_eps: f64,
    /// When false both axial attention blocks are skipped.
    pub attention: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 2,
            layer_norm_eps: 1e-5,
            attention: true,
        }
    }
}

/// Every tunable of the tokenizer. Deserializes from TOML with all fields
/// optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of frames T (history plus current frame).
    pub frames: usize,
    /// Image feature dimension D.
    pub feature_dim: usize,
    pub tile_size_m: f64,
    pub seed: u64,
    pub elements: ElementBudget,
    pub points: PointBudget,
    pub ransac: RansacConfig,
    pub cluster: ClusterConfig,
    pub track: TrackConfig,
    pub projection: ProjectionConfig,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames: 11,
            feature_dim: 256,
            tile_size_m: 10.0,
            seed: 0,
            elements: ElementBudget::default(),
            points: PointBudget::default(),
            ransac: RansacConfig::default(),
            cluster: ClusterConfig::default(),
            track: TrackConfig::default(),
            projection: ProjectionConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut problems = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                problems.push(format!("{name} must be > 0"));
            }
        };
        positive("frames", self.frames);
        positive("feature_dim", self.feature_dim);
        positive("elements.agent", self.elements.agent);
        positive("elements.open_set", self.elements.open_set);
        positive("elements.ground", self.elements.ground);
        positive("points.agent", self.points.agent);
        positive("points.open_set", self.points.open_set);
        positive("points.ground", self.points.ground);
        positive("ransac.iters", self.ransac.iters);
        positive("cluster.min_points", self.cluster.min_points);
        positive("fusion.hidden", self.fusion.hidden);
        positive("fusion.heads", self.fusion.heads);
        let p = &self.points;
        if p.agent + p.open_set + p.ground != p.total {
            problems.push(format!(
                "point budgets {}+{}+{} do not sum to points.total {}",
                p.agent, p.open_set, p.ground, p.total
            ));
        }
        let mut positive_f = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be finite and > 0"));
            }
        };
        positive_f("tile_size_m", self.tile_size_m);
        positive_f("ransac.inlier_threshold_m", self.ransac.inlier_threshold_m);
        positive_f("cluster.radius_m", self.cluster.radius_m);
        positive_f("track.gate_m", self.track.gate_m);
        positive_f("track.frame_dt_s", self.track.frame_dt_s);
        positive_f("track.initial_velocity_var", self.track.initial_velocity_var);
        positive_f("fusion.layer_norm_eps", self.fusion.layer_norm_eps);
        for (name, v) in [
            ("track.process_noise", self.track.process_noise),
            ("track.measurement_noise", self.track.measurement_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and >= 0"));
            }
        }
        if self.fusion.heads > 0 && self.feature_dim % self.fusion.heads != 0 {
            problems.push(format!(
                "feature_dim {} not divisible by fusion.heads {}",
                self.feature_dim, self.fusion.heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One LiDAR sweep, already expressed in the common world frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub frame_index: usize,
    pub points: Vec<Point3>,
}

/// Pinhole intrinsics at feature-map resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// World-to-camera rigid transform: `p_cam = rotation · p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Image feature map of one camera at one frame, row-major `height × width × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera_id: u32,
    pub frame_index: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub valid: bool,
}

impl CameraFrame {
    pub fn feature(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.features[start..start + self.dim]
    }
}

/// A perception box for one agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub track_id: u32,
    pub frame_index: usize,
    pub center: Point3,
    /// Length, width, height (m).
    pub size: [f64; 3],
    pub heading: f64,
    pub class: u32,
}

impl AgentBox {
    pub fn row(&self) -> BoxRow {
        box_row(self.center, self.size, self.heading)
    }
}

/// Raw multi-frame input to the tokenizer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneBundle {
    pub frames: Vec<PointCloudFrame>,
    pub cameras: Vec<CameraFrame>,
    pub agents: Vec<AgentBox>,
}

impl SceneBundle {
    pub fn point_count(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).sum()
    }

    pub fn agent_track_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FrameCountMismatch { expected: usize, found: usize },
    FrameOrder { position: usize, frame_index: usize },
    NonFiniteCoordinate { frame: usize, row: usize },
    BadRotation { camera: u32, frame: usize, error: f64 },
    DuplicateTrackFrame { track: u32, frame: usize },
    DuplicateCamera { camera: u32, frame: usize },
    FrameIndexOutOfRange { what: &'static str, frame: usize },
    BadBox { track: u32, frame: usize, reason: &'static str },
    BadCamera { camera: u32, frame: usize, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FrameCountMismatch { expected, found } => {
                write!(f, "FrameCountMismatch: expected {expected} frames, found {found}")
            }
            Self::FrameOrder { position, frame_index } => write!(
                f,
                "FrameOrder: frame at position {position} has frame_index {frame_index}"
            ),
            Self::NonFiniteCoordinate { frame, row } => {
                write!(f, "NonFiniteCoordinate: frame {frame} row {row}")
            }
            Self::BadRotation { camera, frame, error } => write!(
                f,
                "BadRotation: camera {camera} frame {frame} deviates from orthonormal by {error:e}"
            ),
            Self::DuplicateTrackFrame { track, frame } => {
                write!(f, "DuplicateTrackFrame: track {track} appears twice in frame {frame}")
            }
            Self::DuplicateCamera { camera, frame } => {
                write!(f, "DuplicateCamera: camera {camera} appears twice in frame {frame}")
            }
            Self::FrameIndexOutOfRange { what, frame } => {
                write!(f, "FrameIndexOutOfRange: {what} references frame {frame}")
            }
            Self::BadBox { track, frame, reason } => {
                write!(f, "BadBox: track {track} frame {frame}: {reason}")
            }
            Self::BadCamera { camera, frame, reason } => {
                write!(f, "BadCamera: camera {camera} frame {frame}: {reason}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("scene bundle failed validation ({} violations): {}", .violations.len(), summarize(.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn summarize(violations: &[Violation]) -> String {
    const SHOWN: usize = 8;
    let mut parts: Vec<String> = violations.iter().take(SHOWN).map(|v| v.to_string()).collect();
    if violations.len() > SHOWN {
        parts.push(format!("... and {} more", violations.len() - SHOWN));
    }
    parts.join("; ")
}

const ROTATION_TOLERANCE: f64 = 1e-6;

/// A bundle that has passed [`validate_bundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidBundle(SceneBundle);

impl ValidBundle {
    pub fn into_inner(self) -> SceneBundle {
        self.0
    }
}

impl Deref for ValidBundle {
    type Target = SceneBundle;

    fn deref(&self) -> &SceneBundle {
        &self.0
    }
}

/// Checks every structural invariant of a bundle against the configuration,
/// collecting all violations rather than stopping at the first.
pub fn validate_bundle(
    bundle: SceneBundle,
    config: &PipelineConfig,
) -> Result<ValidBundle, ValidationError> {
    let mut violations = Vec::new();
    let t = config.frames;

    if bundle.frames.len() != t {
        violations.push(Violation::FrameCountMismatch {
            expected: t,
            found: bundle.frames.len(),
        });
    }
    for (position, frame) in bundle.frames.iter().enumerate() {
        if frame.frame_index != position {
            violations.push(Violation::FrameOrder {
                position,
                frame_index: frame.frame_index,
            });
        }
        for (row, p) in frame.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                violations.push(Violation::NonFiniteCoordinate {
                    frame: frame.frame_index,
                    row,
                });
            }
        }
    }

    let mut seen_cameras = HashSet::new();
    for cam in &bundle.cameras {
        let (id, frame) = (cam.camera_id, cam.frame_index);
        if frame >= t {
            violations.push(Violation::FrameIndexOutOfRange { what: "camera", frame });
        }
        if !seen_cameras.insert((id, frame)) {
            violations.push(Violation::DuplicateCamera { camera: id, frame });
        }
        let err = cam.extrinsics.orthonormality_error();
        let finite_pose = cam.extrinsics.rotation.iter().flatten().all(|v| v.is_finite())
            && cam.extrinsics.translation.iter().all(|v| v.is_finite());
        if !finite_pose || !(err <= ROTATION_TOLERANCE) {
            violations.push(Violation::BadRotation {
                camera: id,
                frame,
                error: err,
            });
        }
        let bad = |reason: String| Violation::BadCamera {
            camera: id,
            frame,
            reason,
        };
        if cam.height == 0 || cam.width == 0 || cam.dim == 0 {
            violations.push(bad(format!(
                "empty feature map {}x{}x{}",
                cam.height, cam.width, cam.dim
            )));
        } else if cam.features.len() != cam.height * cam.width * cam.dim {
            violations.push(bad(format!(
                "feature buffer holds {} values, shape needs {}",
                cam.features.len(),
                cam.height * cam.width * cam.dim
            )));
        }
        if !cam.features.iter().all(|v| v.is_finite()) {
            violations.push(bad("non-finite feature value".into()));
        }
        let k = &cam.intrinsics;
        if ![k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite()) || k.fx <= 0.0 || k.fy <= 0.0 {
            violations.push(bad("intrinsics must be finite with positive focal lengths".into()));
        }
    }

    let mut seen_tracks = HashSet::new();
    for a in &bundle.agents {
        let (track, frame) = (a.track_id, a.frame_index);
        if frame >= t {
            violations.push(Violation::FrameIndexOutOfRange { what: "agent box", frame });
        }
        if !seen_tracks.insert((track, frame)) {
            violations.push(Violation::DuplicateTrackFrame { track, frame });
        }
        if !a.center.iter().chain(a.size.iter()).all(|v| v.is_finite()) || !a.heading.is_finite()
        {
            violations.push(Violation::BadBox {
                track,
                frame,
                reason: "non-finite attribute",
            });
        } else {
            if !a.size.iter().all(|&s| s > 0.0) {
                violations.push(Violation::BadBox {
                    track,
                    frame,
                    reason: "size must be strictly positive",
                });
            }
            if !(-PI..PI).contains(&a.heading) {
                violations.push(Violation::BadBox {
                    track,
                    frame,
                    reason: "heading outside [-pi, pi)",
                });
            }
        }
    }

    if violations.is_empty() {
        Ok(ValidBundle(bundle))
    } else {
        Err(ValidationError { violations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementKind {
    Agent,
    OpenSet,
    Ground,
}

impl ElementKind {
    pub const ALL: [ElementKind; 3] = [ElementKind::Agent, ElementKind::OpenSet, ElementKind::Ground];

    /// File codebook: 0 agent, 1 open-set, 2 ground.
    pub fn code(self) -> u8 {
        match self {
            Self::Agent => 0,
            Self::OpenSet => 1,
            Self::Ground => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Agent),
            1 => Some(Self::OpenSet),
            2 => Some(Self::Ground),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Agent => "agent",
            Self::OpenSet => "open-set",
            Self::Ground => "ground",
        }
    }
}

/// One token-bearing unit of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneElement {
    pub token_id: u32,
    pub kind: ElementKind,
    /// Agent track id, open-set track index, or ground tile ordinal.
    pub source_id: u32,
    /// One row per frame; zeros where `frame_valid` is false.
    pub boxes: Vec<BoxRow>,
    pub frame_valid: Vec<bool>,
}

impl SceneElement {
    pub fn valid_frames(&self) -> usize {
        self.frame_valid.iter().filter(|v| **v).count()
    }
}

/// The compacted, fixed-budget model input.
///
/// Point rows `0..points_xyz.len()` hold the agent, open-set and ground pools
/// in that order followed by padding rows (`point_valid == false`, all zeros,
/// index `(0, 0)`) up to the configured point budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedScene {
    pub frames: usize,
    pub feature_dim: usize,
    pub points_xyz: Vec<Point3>,
    /// `(frame id, token id)` per point.
    pub point_index: Vec<[u32; 2]>,
    pub point_valid: Vec<bool>,
    /// Row-major `N_pts × D`.
    pub point_features: Vec<f32>,
    pub feature_valid: Vec<bool>,
    pub elements: Vec<SceneElement>,
}

impl TokenizedScene {
    pub fn num_points(&self) -> usize {
        self.points_xyz.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// `N_elem × T × 7` box tensor.
    pub fn box_tensor(&self) -> Vec<f64> {
        self.elements
            .iter()
            .flat_map(|e| e.boxes.iter().flatten().copied())
            .collect()
    }

    /// `N_elem × T` frame validity.
    pub fn element_mask(&self) -> Vec<bool> {
        self.elements
            .iter()
            .flat_map(|e| e.frame_valid.iter().copied())
            .collect()
    }

    pub fn count_kind(&self, kind: ElementKind) -> usize {
        self.elements.iter().filter(|e| e.kind == kind).count()
    }
}
