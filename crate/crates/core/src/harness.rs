//! Deterministic synthetic scenes, perception-failure ablation and stage
//! benchmarks.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::{PointLabel, PointPartition};
use crate::error::{Error, Result};
use crate::fuse::FusionParams;
use crate::model::{
    AgentBox, CameraFrame, ElementKind, Extrinsics, Intrinsics, PipelineConfig, Point3, PointCloudFrame,
    SceneBundle,
};
use crate::pipeline::{fuse, tokenize, STAGES};
use crate::project::project_point;

/// Lattice spacing of agent shells (m); below the default cluster radius so a
/// dropped agent still forms one cluster.
pub const AGENT_SPACING_M: f64 = 0.45;
pub const AGENT_CLEARANCE_M: f64 = 0.3;
/// Perception boxes are inflated by this much on every side.
pub const BOX_MARGIN_M: f64 = 0.05;
pub const CLUTTER_SPACING_M: f64 = 0.3;
pub const CLUTTER_LATTICE: usize = 3;
pub const CLUTTER_ELEVATION_M: f64 = 0.5;
const CAMERA_HEIGHT_M: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub agents: usize,
    pub clutter: usize,
    /// Side of the square scene (m), centered on the origin.
    pub area_m: f64,
    pub frames: usize,
    pub cameras: usize,
    pub feature_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Ground rise per meter along x.
    pub slope: f64,
    pub ground_spacing_m: f64,
    pub agent_speed_mps: f64,
    pub clutter_speed_mps: f64,
    /// Objects occupy distinct square slots of this side.
    pub slot_m: f64,
    pub frame_dt_s: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            agents: 8,
            clutter: 8,
            area_m: 80.0,
            frames: 11,
            cameras: 2,
            feature_dim: 16,
            image_height: 32,
            image_width: 32,
            slope: 0.0,
            ground_spacing_m: 1.0,
            agent_speed_mps: 1.0,
            clutter_speed_mps: 0.0,
            slot_m: 8.0,
            frame_dt_s: 0.1,
        }
    }
}

impl SceneSpec {
    /// Fills every element budget of the default configuration.
    pub fn full_size() -> Self {
        Self {
            agents: 128,
            clutter: 384,
            area_m: 200.0,
            feature_dim: 256,
            ground_spacing_m: 2.0,
            ..Self::default()
        }
    }

    pub fn slots_per_side(&self) -> usize {
        (self.area_m / self.slot_m).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scene spec: {what}")));
        let positive = [
            self.area_m,
            self.ground_spacing_m,
            self.slot_m,
            self.frame_dt_s,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("lengths and time step must be positive");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if self.feature_dim < 3 {
            return bad("feature_dim must hold the three kind channels");
        }
        if self.cameras > 0 && (self.image_height == 0 || self.image_width == 0) {
            return bad("feature maps must be non-empty");
        }
        let slots = self.slots_per_side().pow(2);
        if self.agents + self.clutter > slots {
            return bad(&format!(
                "{} objects do not fit {slots} slots",
                self.agents + self.clutter
            ));
        }
        if !self.slope.is_finite() || !self.agent_speed_mps.is_finite() || !self.clutter_speed_mps.is_finite() {
            return bad("non-finite slope or speed");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn ground_z(&self, x: f64) -> f64 {
        self.slope * x
    }
}

/// Generator truth for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruthLabel {
    Ground,
    Agent(u32),
    Clutter(u32),
}

impl TruthLabel {
    pub fn kind(self) -> ElementKind {
        match self {
            TruthLabel::Ground => ElementKind::Ground,
            TruthLabel::Agent(_) => ElementKind::Agent,
            TruthLabel::Clutter(_) => ElementKind::OpenSet,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub bundle: SceneBundle,
    /// Per frame, aligned with the frame's points.
    pub truth: Vec<Vec<TruthLabel>>,
    /// Center of every clutter object per frame.
    pub clutter_centers: Vec<Vec<Point3>>,
}

struct MovingObject {
    start: [f64; 2],
    velocity: [f64; 2],
    heading: f64,
    size: [f64; 3],
    elevation: f64,
}

impl MovingObject {
    fn center(&self, spec: &SceneSpec, frame: usize) -> Point3 {
        let t = frame as f64 * spec.frame_dt_s;
        let x = self.start[0] + self.velocity[0] * t;
        let y = self.start[1] + self.velocity[1] * t;
        [x, y, spec.ground_z(x) + self.elevation + self.size[2] / 2.0]
    }
}

/// Lattice points on the surface of an axis-aligned box centered at the
/// origin, at most `spacing` apart along each axis.
fn box_shell(size: [f64; 3], spacing: f64) -> Vec<Point3> {
    let n = size.map(|s| ((s / spacing).ceil() as usize).max(1));
    let mut out = Vec::new();
    for i in 0..=n[0] {
        for j in 0..=n[1] {
            for k in 0..=n[2] {
                let on_face = i == 0 || i == n[0] || j == 0 || j == n[1] || k == 0 || k == n[2];
                if on_face {
                    out.push([
                        -size[0] / 2.0 + size[0] * i as f64 / n[0] as f64,
                        -size[1] / 2.0 + size[1] * j as f64 / n[1] as f64,
                        -size[2] / 2.0 + size[2] * k as f64 / n[2] as f64,
                    ]);
                }
            }
        }
    }
    out
}

fn place(local: &Point3, center: &Point3, heading: f64) -> Point3 {
    let (s, c) = heading.sin_cos();
    [
        center[0] + c * local[0] - s * local[1],
        center[1] + s * local[0] + c * local[1],
        center[2] + local[2],
    ]
}

/// Builds a scene on a flat (optionally sloped) ground: agents are moving
/// box shells with perception boxes, clutter are small lattice blobs without
/// boxes, and each camera renders `(camera_id + 1) · one_hot(kind)` through a
/// z-buffer.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.slots_per_side();
    let n_objects = spec.agents + spec.clutter;
    let slots = sample(&mut rng, g * g, n_objects).into_vec();
    let mid = (spec.frames - 1) as f64 * spec.frame_dt_s / 2.0;
    let slot_center = |s: usize| {
        let (i, j) = (s % g, s / g);
        let origin = -(g as f64) * spec.slot_m / 2.0;
        [
            origin + (i as f64 + 0.5) * spec.slot_m,
            origin + (j as f64 + 0.5) * spec.slot_m,
        ]
    };
    let mut objects = Vec::with_capacity(n_objects);
    for (o, &slot) in slots.iter().enumerate() {
        let is_agent = o < spec.agents;
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (size, speed, elevation) = if is_agent {
            let size = [
                rng.random_range(3.5..4.5),
                rng.random_range(1.6..2.0),
                rng.random_range(1.4..1.8),
            ];
            (size, spec.agent_speed_mps, AGENT_CLEARANCE_M)
        } else {
            let side = CLUTTER_SPACING_M * (CLUTTER_LATTICE - 1) as f64;
            ([side; 3], spec.clutter_speed_mps, CLUTTER_ELEVATION_M)
        };
        let velocity = [speed * heading.cos(), speed * heading.sin()];
        let c = slot_center(slot);
        objects.push(MovingObject {
            start: [c[0] - velocity[0] * mid, c[1] - velocity[1] * mid],
            velocity,
            heading,
            size,
            elevation,
        });
    }

    let n_ground = (spec.area_m / spec.ground_spacing_m).floor() as usize;
    let ground: Vec<Point3> = (0..n_ground * n_ground)
        .map(|k| {
            let x = -spec.area_m / 2.0 + ((k % n_ground) as f64 + 0.5) * spec.ground_spacing_m;
            let y = -spec.area_m / 2.0 + ((k / n_ground) as f64 + 0.5) * spec.ground_spacing_m;
            [x, y, spec.ground_z(x)]
        })
        .collect();
    let clutter_shape: Vec<Point3> = {
        let n = CLUTTER_LATTICE;
        let half = CLUTTER_SPACING_M * (n - 1) as f64 / 2.0;
        (0..n * n * n)
            .map(|k| {
                [k % n, (k / n) % n, k / (n * n)].map(|i| i as f64 * CLUTTER_SPACING_M - half)
            })
            .collect()
    };

    let mut bundle = SceneBundle::default();
    let mut truth = Vec::with_capacity(spec.frames);
    let mut clutter_centers = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let mut points = ground.clone();
        let mut labels = vec![TruthLabel::Ground; points.len()];
        let mut centers = Vec::with_capacity(spec.clutter);
        for (o, obj) in objects.iter().enumerate() {
            let center = obj.center(spec, f);
            if o < spec.agents {
                let id = o as u32;
                for local in box_shell(obj.size, AGENT_SPACING_M) {
                    points.push(place(&local, &center, obj.heading));
                    labels.push(TruthLabel::Agent(id));
                }
                bundle.agents.push(AgentBox {
                    track_id: id,
                    frame_index: f,
                    center,
                    size: obj.size.map(|s| s + 2.0 * BOX_MARGIN_M),
                    heading: obj.heading,
                    class: 0,
                });
            } else {
                let id = (o - spec.agents) as u32;
                for local in &clutter_shape {
                    points.push(place(local, &center, obj.heading));
                    labels.push(TruthLabel::Clutter(id));
                }
                centers.push(center);
            }
        }
        for c in 0..spec.cameras {
            bundle.cameras.push(render_camera(spec, c, f, &points, &labels));
        }
        bundle.frames.push(PointCloudFrame { frame_index: f, points });
        truth.push(labels);
        clutter_centers.push(centers);
    }
    Ok(SyntheticScene {
        bundle,
        truth,
        clutter_centers,
    })
}

/// A nadir camera `CAMERA_HEIGHT_M` above one vertical stripe of the scene.
fn camera_pose(spec: &SceneSpec, camera: usize) -> (Intrinsics, Extrinsics) {
    let stripe = spec.area_m / spec.cameras as f64;
    let x = -spec.area_m / 2.0 + (camera as f64 + 0.5) * stripe;
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let intrinsics = Intrinsics {
        fx: w * CAMERA_HEIGHT_M / stripe,
        fy: h * CAMERA_HEIGHT_M / spec.area_m,
        cx: w / 2.0,
        cy: h / 2.0,
    };
    let extrinsics = Extrinsics {
        rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
        translation: [-x, 0.0, CAMERA_HEIGHT_M],
    };
    (intrinsics, extrinsics)
}

fn render_camera(spec: &SceneSpec, camera: usize, frame: usize, points: &[Point3], labels: &[TruthLabel]) -> CameraFrame {
    let (intrinsics, extrinsics) = camera_pose(spec, camera);
    let (h, w, d) = (spec.image_height, spec.image_width, spec.feature_dim);
    let mut cam = CameraFrame {
        camera_id: camera as u32,
        frame_index: frame,
        height: h,
        width: w,
        dim: d,
        features: vec![0.0; h * w * d],
        intrinsics,
        extrinsics,
        valid: true,
    };
    let mut depth = vec![f64::INFINITY; h * w];
    let mut owner: Vec<Option<ElementKind>> = vec![None; h * w];
    for (p, label) in points.iter().zip(labels) {
        let Some((u, v)) = project_point(p, &cam) else { continue };
        let pixel = (v.floor() as usize).min(h - 1) * w + (u.floor() as usize).min(w - 1);
        let z = cam.extrinsics.apply(p)[2];
        if z < depth[pixel] {
            depth[pixel] = z;
            owner[pixel] = Some(label.kind());
        }
    }
    let scale = (camera + 1) as f32;
    for (pixel, kind) in owner.iter().enumerate() {
        if let Some(kind) = kind {
            cam.features[pixel * d + kind.code() as usize] = scale;
        }
    }
    cam
}

/// Fraction of points whose pipeline label has the generator's kind (and,
/// for agents, the same track id).
pub fn label_agreement(truth: &[Vec<TruthLabel>], partition: &PointPartition) -> f64 {
    let mut total = 0usize;
    let mut agree = 0usize;
    for (t_frame, p_frame) in truth.iter().zip(&partition.labels) {
        for (t, p) in t_frame.iter().zip(p_frame) {
            total += 1;
            let ok = match (t, p) {
                (TruthLabel::Ground, PointLabel::Ground) => true,
                (TruthLabel::Agent(a), PointLabel::Agent(b)) => a == b,
                (TruthLabel::Clutter(_), PointLabel::OpenSet(_)) => true,
                _ => false,
            };
            agree += ok as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub bundle: SceneBundle,
    /// Removed track ids, ascending.
    pub dropped: Vec<u32>,
}

/// Removes `⌊ratio · n⌋` agent tracks (every frame of each) chosen uniformly
/// with `seed`. Points are untouched.
pub fn drop_agents(bundle: &SceneBundle, ratio: f64, seed: u64) -> Result<Ablation> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("drop ratio {ratio} outside [0, 1]")));
    }
    let ids = bundle.agent_track_ids();
    let k = (ratio * ids.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped: Vec<u32> = sample(&mut rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
    dropped.sort_unstable();
    let mut out = bundle.clone();
    out.agents.retain(|a| dropped.binary_search(&a.track_id).is_err());
    log::info!("dropped {} of {} agent tracks", dropped.len(), ids.len());
    Ok(Ablation { bundle: out, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub stage: String,
    pub repetitions: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, stage: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Machine-readable rows: `stage,repetitions,p50_ms,p95_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,repetitions,p50_ms,p95_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3},{:.3}\n", r.stage, r.repetitions, r.p50_ms, r.p95_ms));
        }
        out
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>10} {:>10}", "stage", "reps", "p50 ms", "p95 ms")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:>5} {:>10.3} {:>10.3}", r.stage, r.repetitions, r.p50_ms, r.p95_ms)?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an ascending sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times every tokenization stage (and the fusion forward when `params` are
/// given) over `repetitions` runs on the calling thread.
pub fn bench_tokenize(
    bundle: &SceneBundle,
    config: &PipelineConfig,
    repetitions: usize,
    params: Option<&FusionParams<f32>>,
) -> Result<BenchReport> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); STAGES.len() + 1];
    for _ in 0..repetitions {
        let tokens = tokenize(bundle, config)?;
        for (k, stage) in STAGES.iter().enumerate() {
            let d = tokens.timings.get(stage).unwrap_or_default();
            samples[k].push(d.as_secs_f64() * 1e3);
        }
        if let Some(params) = params {
            let start = Instant::now();
            fuse(&tokens, params)?;
            samples[STAGES.len()].push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let names = STAGES.iter().copied().chain(params.map(|_| "fuse"));
    let rows = names
        .zip(samples)
        .map(|(stage, mut s)| {
            s.sort_by(f64::total_cmp);
            BenchRow {
                stage: stage.to_string(),
                repetitions: s.len(),
                p50_ms: percentile(&s, 0.5),
                p95_ms: percentile(&s, 0.95),
            }
        })
        .collect();
    Ok(BenchReport { rows })
}
