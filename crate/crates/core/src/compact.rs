//! Budgeted multi-frame point compaction and per-element image pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decompose::TokenAssignment;
use crate::error::{Error, Result};
use crate::model::{ElementKind, PipelineConfig, Point3, SceneBundle, SceneElement, TokenizedScene};
use crate::project::PointFeatures;

/// A retained point tagged with its frame and token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledPoint {
    pub frame: u32,
    pub token: u32,
    pub xyz: Point3,
}

/// Retained points split by element kind, each merged across frames in
/// (frame, point index) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassPools {
    pub agent: Vec<PooledPoint>,
    pub open_set: Vec<PooledPoint>,
    pub ground: Vec<PooledPoint>,
}

impl ClassPools {
    pub fn collect(bundle: &SceneBundle, tokens: &TokenAssignment) -> Self {
        let mut pools = Self::default();
        for (f, (frame, frame_tokens)) in bundle.frames.iter().zip(&tokens.point_tokens).enumerate() {
            for (p, token) in frame.points.iter().zip(frame_tokens) {
                let Some(token) = *token else { continue };
                let point = PooledPoint {
                    frame: f as u32,
                    token,
                    xyz: *p,
                };
                match tokens.elements[token as usize].kind {
                    ElementKind::Agent => pools.agent.push(point),
                    ElementKind::OpenSet => pools.open_set.push(point),
                    ElementKind::Ground => pools.ground.push(point),
                }
            }
        }
        pools
    }

    pub fn len(&self) -> usize {
        self.agent.len() + self.open_set.len() + self.ground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniformly subsamples each class to its point budget.
    pub fn downsample(&self, config: &PipelineConfig) -> Self {
        let pick = |pool: &[PooledPoint], budget: usize, stream: u64| {
            downsample(pool.len(), budget, config.seed, stream)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        Self {
            agent: pick(&self.agent, config.points.agent, 1),
            open_set: pick(&self.open_set, config.points.open_set, 2),
            ground: pick(&self.ground, config.points.ground, 3),
        }
    }

    /// Agent, open-set, ground concatenation.
    pub fn concat(self) -> Vec<PooledPoint> {
        let mut out = self.agent;
        out.extend(self.open_set);
        out.extend(self.ground);
        out
    }
}

/// Uniform sample without replacement of `min(pool, budget)` indices from
/// `0..pool`, returned ascending. Each `stream` gives an independent draw
/// for the same seed.
pub fn downsample(pool: usize, budget: usize, seed: u64, stream: u64) -> Vec<usize> {
    if pool <= budget {
        return (0..pool).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = rand::seq::index::sample(&mut rng, pool, budget).into_vec();
    picked.sort_unstable();
    picked
}

/// Assembles the fixed-size model input. `features` must be aligned with
/// `points`; rows beyond `points.len()` up to the configured budget are
/// padding.
pub fn build_tokenized_scene(
    elements: Vec<SceneElement>,
    points: &[PooledPoint],
    features: PointFeatures,
    config: &PipelineConfig,
) -> Result<TokenizedScene> {
    let budget = config.points.total;
    let dim = config.feature_dim;
    if points.len() > budget {
        return Err(Error::BudgetMismatch {
            expected: budget,
            found: points.len(),
        });
    }
    if features.valid.len() != points.len() || features.features.len() != points.len() * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} feature rows of width {dim}",
            points.len(),
            features.valid.len()
        )));
    }
    for e in &elements {
        if e.boxes.len() != config.frames || e.frame_valid.len() != config.frames {
            return Err(Error::ShapeMismatch(format!(
                "element {} spans {} frames, expected {}",
                e.token_id,
                e.boxes.len(),
                config.frames
            )));
        }
    }
    for p in points {
        if p.frame as usize >= config.frames || p.token as usize >= elements.len() {
            return Err(Error::ShapeMismatch(format!(
                "point index ({}, {}) outside {} frames x {} elements",
                p.frame,
                p.token,
                config.frames,
                elements.len()
            )));
        }
    }

    let n = points.len();
    let mut points_xyz: Vec<Point3> = points.iter().map(|p| p.xyz).collect();
    let mut point_index: Vec<[u32; 2]> = points.iter().map(|p| [p.frame, p.token]).collect();
    let mut point_valid = vec![true; n];
    let PointFeatures {
        features: mut point_features,
        valid: mut feature_valid,
    } = features;
    points_xyz.resize(budget, [0.0; 3]);
    point_index.resize(budget, [0, 0]);
    point_valid.resize(budget, false);
    point_features.resize(budget * dim, 0.0);
    feature_valid.resize(budget, false);
    // Invalid features are zero by construction upstream; enforce it here.
    for (row, valid) in point_features.chunks_mut(dim).zip(&feature_valid) {
        if !valid {
            row.fill(0.0);
        }
    }

    let scene = TokenizedScene {
        frames: config.frames,
        feature_dim: dim,
        points_xyz,
        point_index,
        point_valid,
        point_features,
        feature_valid,
        elements,
    };
    if scene.num_points() != budget {
        return Err(Error::BudgetMismatch {
            expected: budget,
            found: scene.num_points(),
        });
    }
    Ok(scene)
}

/// Per `(element, frame)` cell sums of valid point features (f64) and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPool {
    pub sums: Vec<f64>,
    pub counts: Vec<u32>,
}

pub fn pool_cells(scene: &TokenizedScene) -> CellPool {
    let (t, d) = (scene.frames, scene.feature_dim);
    let cells = scene.num_elements() * t;
    let mut pool = CellPool {
        sums: vec![0.0; cells * d],
        counts: vec![0; cells],
    };
    for (i, [frame, token]) in scene.point_index.iter().enumerate() {
        if !(scene.point_valid[i] && scene.feature_valid[i]) {
            continue;
        }
        let cell = *token as usize * t + *frame as usize;
        pool.counts[cell] += 1;
        let src = &scene.point_features[i * d..(i + 1) * d];
        for (acc, v) in pool.sums[cell * d..(cell + 1) * d].iter_mut().zip(src) {
            *acc += *v as f64;
        }
    }
    pool
}

/// Pooled image features, row-major `N_elem × T × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementImageFeatures {
    pub features: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Mean of the valid point features in each `(element, frame)` cell; empty
/// cells are zero and invalid. Open-set elements are further averaged over
/// their valid frames and the result broadcast to every frame.
pub fn pool_image_features(scene: &TokenizedScene) -> ElementImageFeatures {
    let (t, d) = (scene.frames, scene.feature_dim);
    let pool = pool_cells(scene);
    let cells = scene.num_elements() * t;
    let mut out = ElementImageFeatures {
        features: vec![0.0; cells * d],
        valid: vec![false; cells],
    };
    let mut means = vec![0.0f64; d];
    for (e, element) in scene.elements.iter().enumerate() {
        match element.kind {
            ElementKind::OpenSet => {
                means.fill(0.0);
                let mut frames_seen = 0u32;
                for f in 0..t {
                    let cell = e * t + f;
                    let count = pool.counts[cell];
                    if count == 0 {
                        continue;
                    }
                    frames_seen += 1;
                    for (m, s) in means.iter_mut().zip(&pool.sums[cell * d..(cell + 1) * d]) {
                        *m += s / count as f64;
                    }
                }
                if frames_seen == 0 {
                    continue;
                }
                for f in 0..t {
                    let cell = e * t + f;
                    out.valid[cell] = true;
                    for (o, m) in out.features[cell * d..(cell + 1) * d].iter_mut().zip(&means) {
                        *o = (m / frames_seen as f64) as f32;
                    }
                }
            }
            ElementKind::Agent | ElementKind::Ground => {
                for f in 0..t {
                    let cell = e * t + f;
                    let count = pool.counts[cell];
                    if count == 0 {
                        continue;
                    }
                    out.valid[cell] = true;
                    let sums = &pool.sums[cell * d..(cell + 1) * d];
                    for (o, s) in out.features[cell * d..(cell + 1) * d].iter_mut().zip(sums) {
                        *o = (s / count as f64) as f32;
                    }
                }
            }
        }
    }
    out
}
