//! Scene decomposition: ground / agent / open-set point labels, open-set
//! boxes, and token id assignment.

pub mod cluster;
pub mod obb;

use std::collections::BTreeMap;

use crate::ground::{segment_ground, GroundPlane, GroundTiling};
use crate::model::{
    AgentBox, BoxRow, ClusterConfig, ElementBudget, ElementKind, Point3, SceneBundle, SceneElement,
};
use crate::track::OpenSetTrack;

pub use cluster::{cluster_open_set, Clustering, UnionFind};
pub use obb::{convex_hull, fit_tight_box, min_area_rect, SIZE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Ground,
    /// Perception track id.
    Agent(u32),
    /// Cluster index within the point's frame.
    OpenSet(u32),
    Discarded,
}

/// Closed containment test in the box frame (yaw-only rotation).
pub fn box_contains(b: &AgentBox, p: &Point3) -> bool {
    let (s, c) = b.heading.sin_cos();
    let (dx, dy, dz) = (p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]);
    let x = c * dx + s * dy;
    let y = -s * dx + c * dy;
    x.abs() <= 0.5 * b.size[0] && y.abs() <= 0.5 * b.size[1] && dz.abs() <= 0.5 * b.size[2]
}

/// Index of the box owning each point. A point inside several boxes goes to
/// the nearest center, ties to the lower track id.
pub fn extract_agent_elements(points: &[Point3], boxes: &[AgentBox]) -> Vec<Option<usize>> {
    // Bounding sphere rejection before the exact test.
    let radii: Vec<f64> = boxes
        .iter()
        .map(|b| 0.5 * (b.size[0].powi(2) + b.size[1].powi(2) + b.size[2].powi(2)).sqrt())
        .collect();
    points
        .iter()
        .map(|p| {
            let mut best: Option<(f64, u32, usize)> = None;
            for (k, b) in boxes.iter().enumerate() {
                let d2 = (p[0] - b.center[0]).powi(2)
                    + (p[1] - b.center[1]).powi(2)
                    + (p[2] - b.center[2]).powi(2);
                if d2 > radii[k] * radii[k] * (1.0 + 1e-12) || !box_contains(b, p) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bt, _)) => d2 < bd || (d2 == bd && b.track_id < bt),
                };
                if better {
                    best = Some((d2, b.track_id, k));
                }
            }
            best.map(|(_, _, k)| k)
        })
        .collect()
}

/// Per-frame labels plus the open-set clusters found in each frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointPartition {
    pub labels: Vec<Vec<PointLabel>>,
    /// Member indices of each open-set cluster, per frame.
    pub clusters: Vec<Vec<Vec<usize>>>,
}

impl PointPartition {
    pub fn count(&self, pred: impl Fn(&PointLabel) -> bool) -> usize {
        self.labels.iter().flatten().filter(|l| pred(l)).count()
    }

    /// Ground points of every frame in (frame, index) order.
    pub fn merged_ground(&self, bundle: &SceneBundle) -> Vec<Point3> {
        let mut out = Vec::new();
        for (frame, labels) in bundle.frames.iter().zip(&self.labels) {
            for (p, l) in frame.points.iter().zip(labels) {
                if *l == PointLabel::Ground {
                    out.push(*p);
                }
            }
        }
        out
    }

    /// Tight boxes of every cluster, per frame.
    pub fn cluster_boxes(&self, bundle: &SceneBundle) -> Vec<Vec<BoxRow>> {
        self.clusters
            .iter()
            .zip(&bundle.frames)
            .map(|(clusters, frame)| {
                clusters
                    .iter()
                    .map(|members| {
                        let pts: Vec<Point3> = members.iter().map(|&i| frame.points[i]).collect();
                        fit_tight_box(&pts)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Labels every point: ground first (plane distance), then agent boxes of the
/// same frame, then connected components of the remainder.
pub fn partition_scene(
    bundle: &SceneBundle,
    plane: Option<&GroundPlane>,
    ground_threshold: f64,
    cluster: &ClusterConfig,
) -> PointPartition {
    let mut boxes_by_frame: BTreeMap<usize, Vec<AgentBox>> = BTreeMap::new();
    for b in &bundle.agents {
        boxes_by_frame.entry(b.frame_index).or_default().push(*b);
    }
    let mut out = PointPartition::default();
    for frame in &bundle.frames {
        let n = frame.points.len();
        let mut labels = match plane {
            Some(plane) => segment_ground(&frame.points, plane, ground_threshold)
                .into_iter()
                .map(|g| if g { PointLabel::Ground } else { PointLabel::Discarded })
                .collect(),
            None => vec![PointLabel::Discarded; n],
        };

        let rest: Vec<usize> = (0..n).filter(|&i| labels[i] != PointLabel::Ground).collect();
        let boxes = boxes_by_frame.get(&frame.frame_index).map(Vec::as_slice).unwrap_or(&[]);
        let rest_pts: Vec<Point3> = rest.iter().map(|&i| frame.points[i]).collect();
        let owners = extract_agent_elements(&rest_pts, boxes);

        let mut residual = Vec::new();
        for (&i, owner) in rest.iter().zip(owners) {
            match owner {
                Some(k) => labels[i] = PointLabel::Agent(boxes[k].track_id),
                None => residual.push(i),
            }
        }
        let residual_pts: Vec<Point3> = residual.iter().map(|&i| frame.points[i]).collect();
        let clustering = cluster_open_set(&residual_pts, cluster.radius_m, cluster.min_points);
        for (&i, label) in residual.iter().zip(&clustering.labels) {
            if let Some(c) = label {
                labels[i] = PointLabel::OpenSet(*c as u32);
            }
        }
        let clusters = clustering
            .clusters
            .into_iter()
            .map(|members| members.into_iter().map(|m| residual[m]).collect())
            .collect();
        out.labels.push(labels);
        out.clusters.push(clusters);
    }
    out
}

/// All boxes of one perception track laid out over the frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub track_id: u32,
    pub boxes: Vec<BoxRow>,
    pub frame_valid: Vec<bool>,
}

impl AgentTrack {
    /// Center of the most recent valid box.
    pub fn latest_center(&self) -> Point3 {
        let t = self.frame_valid.iter().rposition(|v| *v).unwrap_or(0);
        let b = &self.boxes[t];
        [b[0], b[1], b[2]]
    }
}

/// Groups perception boxes by track id (ascending).
pub fn agent_tracks(agents: &[AgentBox], frames: usize) -> Vec<AgentTrack> {
    let mut tracks: BTreeMap<u32, AgentTrack> = BTreeMap::new();
    for a in agents.iter().filter(|a| a.frame_index < frames) {
        let track = tracks.entry(a.track_id).or_insert_with(|| AgentTrack {
            track_id: a.track_id,
            boxes: vec![[0.0; 7]; frames],
            frame_valid: vec![false; frames],
        });
        track.boxes[a.frame_index] = a.row();
        track.frame_valid[a.frame_index] = true;
    }
    tracks.into_values().collect()
}

/// Elements that did not fit their budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetOverflow {
    pub kind: ElementKind,
    pub budget: usize,
    pub found: usize,
    /// Source ids (track id, open-set track index, tile ordinal) dropped.
    pub dropped: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenAssignment {
    /// Agents, then open-set, then ground; `token_id` equals position.
    pub elements: Vec<SceneElement>,
    /// Token id per point per frame; `None` for discarded points and points
    /// of elements dropped by a budget.
    pub point_tokens: Vec<Vec<Option<u32>>>,
    pub warnings: Vec<BudgetOverflow>,
}

impl TokenAssignment {
    pub fn retained_points(&self) -> usize {
        self.point_tokens.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Assigns contiguous token id blocks (agents, open-set, ground) and maps
/// every point to the token of its element.
///
/// Over-budget agents are ranked by distance of their latest center from the
/// origin; over-budget open-set tracks by total point count.
pub fn assign_token_ids(
    partition: &PointPartition,
    agents: &[AgentTrack],
    open_set: &[OpenSetTrack],
    ground: &GroundTiling,
    budget: &ElementBudget,
) -> TokenAssignment {
    let mut warnings = Vec::new();

    let mut agent_rank: Vec<usize> = (0..agents.len()).collect();
    let norm = |p: Point3| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    agent_rank.sort_by(|&a, &b| {
        norm(agents[a].latest_center())
            .total_cmp(&norm(agents[b].latest_center()))
            .then(agents[a].track_id.cmp(&agents[b].track_id))
    });
    let mut kept_agents: Vec<usize> = agent_rank.iter().copied().take(budget.agent).collect();
    if agents.len() > budget.agent {
        let mut dropped: Vec<u32> = agent_rank[budget.agent..].iter().map(|&i| agents[i].track_id).collect();
        dropped.sort_unstable();
        warnings.push(BudgetOverflow {
            kind: ElementKind::Agent,
            budget: budget.agent,
            found: agents.len(),
            dropped,
        });
    }
    kept_agents.sort_by_key(|&i| agents[i].track_id);

    let mut open_rank: Vec<usize> = (0..open_set.len()).collect();
    open_rank.sort_by(|&a, &b| open_set[b].point_count.cmp(&open_set[a].point_count).then(a.cmp(&b)));
    let mut kept_open: Vec<usize> = open_rank.iter().copied().take(budget.open_set).collect();
    if open_set.len() > budget.open_set {
        let mut dropped: Vec<u32> = open_rank[budget.open_set..].iter().map(|&i| i as u32).collect();
        dropped.sort_unstable();
        warnings.push(BudgetOverflow {
            kind: ElementKind::OpenSet,
            budget: budget.open_set,
            found: open_set.len(),
            dropped,
        });
    }
    kept_open.sort_unstable();

    let kept_ground = ground.elements.len().min(budget.ground);
    if ground.elements.len() > budget.ground {
        warnings.push(BudgetOverflow {
            kind: ElementKind::Ground,
            budget: budget.ground,
            found: ground.elements.len(),
            dropped: (budget.ground as u32..ground.elements.len() as u32).collect(),
        });
    }

    let mut elements = Vec::with_capacity(kept_agents.len() + kept_open.len() + kept_ground);
    let mut agent_token: BTreeMap<u32, u32> = BTreeMap::new();
    for &i in &kept_agents {
        let token = elements.len() as u32;
        agent_token.insert(agents[i].track_id, token);
        elements.push(SceneElement {
            token_id: token,
            kind: ElementKind::Agent,
            source_id: agents[i].track_id,
            boxes: agents[i].boxes.clone(),
            frame_valid: agents[i].frame_valid.clone(),
        });
    }
    // (frame, cluster) -> token
    let frames = partition.labels.len();
    let mut cluster_token: Vec<Vec<Option<u32>>> =
        partition.clusters.iter().map(|c| vec![None; c.len()]).collect();
    for &i in &kept_open {
        let token = elements.len() as u32;
        let track = &open_set[i];
        for (f, det) in track.detections.iter().enumerate().take(frames) {
            if let Some(c) = det {
                cluster_token[f][*c] = Some(token);
            }
        }
        elements.push(SceneElement {
            token_id: token,
            kind: ElementKind::OpenSet,
            source_id: i as u32,
            boxes: track.boxes.clone(),
            frame_valid: track.frame_valid.clone(),
        });
    }
    let ground_base = elements.len() as u32;
    for g in ground.elements.iter().take(kept_ground) {
        let mut e = g.clone();
        e.token_id = ground_base + g.token_id;
        elements.push(e);
    }

    let mut ground_cursor = 0usize;
    let point_tokens = partition
        .labels
        .iter()
        .enumerate()
        .map(|(f, labels)| {
            labels
                .iter()
                .map(|label| match *label {
                    PointLabel::Ground => {
                        let slot = ground.assignment.get(ground_cursor).copied().flatten();
                        ground_cursor += 1;
                        slot.filter(|&s| s < kept_ground).map(|s| ground_base + s as u32)
                    }
                    PointLabel::Agent(track) => agent_token.get(&track).copied(),
                    PointLabel::OpenSet(c) => cluster_token[f][c as usize],
                    PointLabel::Discarded => None,
                })
                .collect()
        })
        .collect();

    for w in &warnings {
        log::warn!(
            "{} budget {} exceeded by {} elements; dropped {:?}",
            w.kind.name(),
            w.budget,
            w.found - w.budget,
            w.dropped
        );
    }
    TokenAssignment {
        elements,
        point_tokens,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground::tile_ground;
    use crate::model::PointCloudFrame;
    use std::f64::consts::FRAC_PI_2;

    fn agent(track_id: u32, center: Point3, size: [f64; 3], heading: f64) -> AgentBox {
        AgentBox {
            track_id,
            frame_index: 0,
            center,
            size,
            heading,
            class: 0,
        }
    }

    #[test]
    fn unit_box_contains_interior_point() {
        let b = agent(0, [0.0; 3], [2.0; 3], 0.0);
        assert_eq!(extract_agent_elements(&[[0.5, 0.5, 0.5]], &[b]), vec![Some(0)]);
    }

    #[test]
    fn rotated_box_long_axis_along_y() {
        let b = agent(0, [0.0; 3], [4.0, 1.0, 1.0], FRAC_PI_2);
        // Brute-force transform into the box frame.
        let p = [0.4, 1.5, 0.0];
        let (s, c) = (-FRAC_PI_2).sin_cos();
        let local = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        assert!(local[0].abs() <= 2.0 && local[1].abs() <= 0.5);
        assert_eq!(extract_agent_elements(&[p], &[b]), vec![Some(0)]);
        assert_eq!(extract_agent_elements(&[[1.5, 0.4, 0.0]], &[b]), vec![None]);
    }

    #[test]
    fn boundary_is_inside() {
        let b = agent(0, [0.0; 3], [4.0, 2.0, 1.0], 0.0);
        assert_eq!(extract_agent_elements(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.5]], &[b]), vec![Some(0), Some(0)]);
        assert_eq!(extract_agent_elements(&[[2.0 + 1e-9, 0.0, 0.0]], &[b]), vec![None]);
    }

    #[test]
    fn overlap_resolves_to_nearest_center_then_lower_track() {
        let a = agent(7, [0.0, 0.0, 0.0], [4.0; 3], 0.0);
        let b = agent(3, [1.0, 0.0, 0.0], [4.0; 3], 0.0);
        let owners = extract_agent_elements(&[[0.9, 0.0, 0.0], [0.1, 0.0, 0.0], [0.5, 0.0, 0.0]], &[a, b]);
        assert_eq!(owners, vec![Some(1), Some(0), Some(1)]);
    }

    #[test]
    fn rigid_transform_equivariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let boxes: Vec<AgentBox> = (0..6)
            .map(|i| {
                agent(
                    i,
                    [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0],
                    [rng.random_range(1.0..4.0), rng.random_range(0.5..2.0), 1.5],
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let pts: Vec<Point3> = (0..3000)
            .map(|_| [rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-1.0..1.0)])
            .collect();
        let base = extract_agent_elements(&pts, &boxes);
        let (yaw, t) = (0.7f64, [12.0, -3.0, 0.5]);
        let (s, c) = yaw.sin_cos();
        let tf = |p: Point3| [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1], p[2] + t[2]];
        let moved_boxes: Vec<AgentBox> = boxes
            .iter()
            .map(|b| AgentBox {
                center: tf(b.center),
                heading: crate::model::normalize_heading(b.heading + yaw),
                ..*b
            })
            .collect();
        let moved: Vec<Point3> = pts.iter().map(|p| tf(*p)).collect();
        let after = extract_agent_elements(&moved, &moved_boxes);
        let mismatches = base.iter().zip(&after).filter(|(a, b)| a != b).count();
        // Only points within rounding distance of a face may flip.
        assert!(mismatches <= 1, "{mismatches} mismatches");
    }

    fn tiny_scene() -> (SceneBundle, PointPartition) {
        // frame 0: 2 ground, 2 agent points (tracks 1 and 2), 3 open-set
        let bundle = SceneBundle {
            frames: vec![PointCloudFrame {
                frame_index: 0,
                points: vec![
                    [1.0, 1.0, 0.0],
                    [11.0, 1.0, 0.0],
                    [5.0, 5.0, 1.0],
                    [-5.0, 5.0, 1.0],
                    [20.0, 0.0, 1.0],
                    [20.2, 0.0, 1.0],
                    [20.4, 0.0, 1.0],
                ],
            }],
            cameras: vec![],
            agents: vec![
                agent(1, [5.0, 5.0, 1.0], [2.0; 3], 0.0),
                agent(2, [-5.0, 5.0, 1.0], [2.0; 3], 0.0),
            ],
        };
        let plane = GroundPlane {
            normal: [0.0, 0.0, 1.0],
            offset: 0.0,
            inlier_count: 0,
        };
        let partition = partition_scene(&bundle, Some(&plane), 0.2, &ClusterConfig::default());
        (bundle, partition)
    }

    #[test]
    fn partition_labels_each_class() {
        let (_, p) = tiny_scene();
        assert_eq!(
            p.labels[0],
            vec![
                PointLabel::Ground,
                PointLabel::Ground,
                PointLabel::Agent(1),
                PointLabel::Agent(2),
                PointLabel::OpenSet(0),
                PointLabel::OpenSet(0),
                PointLabel::OpenSet(0),
            ]
        );
        assert_eq!(p.clusters[0], vec![vec![4, 5, 6]]);
    }

    #[test]
    fn token_block_ordering() {
        let (bundle, p) = tiny_scene();
        let agents = agent_tracks(&bundle.agents, 1);
        let boxes = p.cluster_boxes(&bundle);
        let open = crate::track::track_open_set(&boxes, &p.clusters, &Default::default());
        let ground = tile_ground(&[[1.0, 1.0, 0.0]], 10.0, 256, 1);
        let t = assign_token_ids(&p, &agents, &open, &ground, &ElementBudget::default());
        let kinds: Vec<(u32, ElementKind)> = t.elements.iter().map(|e| (e.token_id, e.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                (0, ElementKind::Agent),
                (1, ElementKind::Agent),
                (2, ElementKind::OpenSet),
                (3, ElementKind::Ground)
            ]
        );
        // second ground point's cell was not in the (hand-made) tiling
        assert_eq!(
            t.point_tokens[0],
            vec![Some(3), None, Some(0), Some(1), Some(2), Some(2), Some(2)]
        );
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn open_set_overflow_drops_smallest_tracks() {
        let tracks: Vec<OpenSetTrack> = (0..400)
            .map(|i| OpenSetTrack {
                boxes: vec![[0.0; 7]],
                frame_valid: vec![true],
                detections: vec![None],
                point_count: 1000 - i,
            })
            .collect();
        let p = PointPartition {
            labels: vec![vec![]],
            clusters: vec![vec![]],
        };
        let ground = tile_ground(&[], 10.0, 256, 1);
        let t = assign_token_ids(&p, &[], &tracks, &ground, &ElementBudget::default());
        assert_eq!(t.count_kind(ElementKind::OpenSet), 384);
        assert_eq!(t.warnings.len(), 1);
        assert_eq!(t.warnings[0].dropped, (384..400).collect::<Vec<u32>>());
    }

    #[test]
    fn agent_overflow_keeps_nearest() {
        let agents: Vec<AgentTrack> = (0..5)
            .map(|i| AgentTrack {
                track_id: 10 - i,
                boxes: vec![[i as f64 * 3.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]],
                frame_valid: vec![true],
            })
            .collect();
        let p = PointPartition {
            labels: vec![vec![]],
            clusters: vec![vec![]],
        };
        let ground = tile_ground(&[], 10.0, 256, 1);
        let budget = ElementBudget {
            agent: 2,
            ..Default::default()
        };
        let t = assign_token_ids(&p, &agents, &[], &ground, &budget);
        let kept: Vec<u32> = t.elements.iter().map(|e| e.source_id).collect();
        assert_eq!(kept, vec![9, 10]);
        assert_eq!(t.warnings[0].dropped, vec![6, 7, 8]);
    }

    impl TokenAssignment {
        fn count_kind(&self, k: ElementKind) -> usize {
            self.elements.iter().filter(|e| e.kind == k).count()
        }
    }
}
