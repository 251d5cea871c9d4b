//! End-to-end tokenization: validate, fit the ground, decompose, track,
//! compact, project, and optionally fuse.

use std::time::{Duration, Instant};

use crate::compact::{build_tokenized_scene, pool_image_features, ClassPools, ElementImageFeatures};
use crate::decompose::{agent_tracks, assign_token_ids, partition_scene, BudgetOverflow, PointPartition};
use crate::error::{Error, Result};
use crate::fuse::{FusionInput, FusionParams};
use crate::ground::{fit_ground_plane, tile_ground, GroundPlane};
use crate::model::{validate_bundle, PipelineConfig, Point3, SceneBundle, SceneElement, TokenizedScene};
use crate::project::build_point_features;
use crate::track::track_open_set;

/// Tokenization stages in execution-report order.
pub const STAGES: [&str; 6] = ["validate", "ground", "decompose", "track", "project", "compact"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub stages: Vec<(&'static str, Duration)>,
}

impl StageTimings {
    fn add(&mut self, stage: &'static str, elapsed: Duration) {
        match self.stages.iter_mut().find(|(s, _)| *s == stage) {
            Some((_, d)) => *d += elapsed,
            None => self.stages.push((stage, elapsed)),
        }
    }

    pub fn get(&self, stage: &str) -> Option<Duration> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, d)| *d)
    }

    pub fn total(&self) -> Duration {
        self.stages.iter().map(|(_, d)| *d).sum()
    }
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn lap(&mut self, timings: &mut StageTimings, stage: &'static str) {
        let now = Instant::now();
        timings.add(stage, now - self.0);
        self.0 = now;
    }
}

/// Everything produced by [`tokenize`].
#[derive(Debug, Clone)]
pub struct Tokenization {
    pub scene: TokenizedScene,
    pub image: ElementImageFeatures,
    pub plane: Option<GroundPlane>,
    pub partition: PointPartition,
    pub warnings: Vec<BudgetOverflow>,
    pub timings: StageTimings,
}

pub fn tokenize(bundle: &SceneBundle, config: &PipelineConfig) -> Result<Tokenization> {
    let mut timings = StageTimings::default();
    let mut clock = Clock::start();

    config.validate()?;
    let bundle = validate_bundle(bundle.clone(), config)?;
    clock.lap(&mut timings, "validate");

    let merged: Vec<Point3> = bundle.frames.iter().flat_map(|f| f.points.iter().copied()).collect();
    let plane = match fit_ground_plane(&merged, &config.ransac, config.seed) {
        Ok(plane) => Some(plane),
        Err(Error::DegenerateInput(why)) => {
            log::warn!("no ground plane: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    drop(merged);
    clock.lap(&mut timings, "ground");

    let partition = partition_scene(&bundle, plane.as_ref(), config.ransac.inlier_threshold_m, &config.cluster);
    let ground = tile_ground(
        &partition.merged_ground(&bundle),
        config.tile_size_m,
        config.elements.ground,
        config.frames,
    );
    let agents = agent_tracks(&bundle.agents, config.frames);
    clock.lap(&mut timings, "decompose");

    let open_set = track_open_set(&partition.cluster_boxes(&bundle), &partition.clusters, &config.track);
    clock.lap(&mut timings, "track");

    let assignment = assign_token_ids(&partition, &agents, &open_set, &ground, &config.elements);
    let points = ClassPools::collect(&bundle, &assignment).downsample(config).concat();
    clock.lap(&mut timings, "compact");

    let xyz: Vec<Point3> = points.iter().map(|p| p.xyz).collect();
    let frames: Vec<u32> = points.iter().map(|p| p.frame).collect();
    let features = build_point_features(&xyz, &frames, &bundle.cameras, config.feature_dim, &config.projection)?;
    clock.lap(&mut timings, "project");

    let scene = build_tokenized_scene(assignment.elements, &points, features, config)?;
    let image = pool_image_features(&scene);
    clock.lap(&mut timings, "compact");

    Ok(Tokenization {
        scene,
        image,
        plane,
        partition,
        warnings: assignment.warnings,
        timings,
    })
}

/// One embedding per scene element plus the element metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTokens {
    pub dim: usize,
    pub frames: usize,
    /// `N_elem × D`.
    pub embeddings: Vec<f32>,
    pub elements: Vec<SceneElement>,
}

impl SceneTokens {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

/// Runs the fusion network over a tokenized scene.
pub fn fuse(tokens: &Tokenization, params: &FusionParams<f32>) -> Result<SceneTokens> {
    let input = FusionInput::<f32>::from_scene(&tokens.scene, &tokens.image)?;
    let embeddings = params.forward(&input)?;
    Ok(SceneTokens {
        dim: params.dim,
        frames: params.frames,
        embeddings,
        elements: tokens.scene.elements.clone(),
    })
}

/// Parameters used when no checkpoint is supplied.
pub fn default_params(config: &PipelineConfig) -> FusionParams<f32> {
    FusionParams::init(&config.fusion, config.frames, config.feature_dim, config.seed)
}
