//! Ground plane estimation, ground segmentation and ground tiling.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{box_row, ElementKind, Point3, RansacConfig, SceneElement};

/// Plane `{p : normal·p + offset = 0}` with `normal.z >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_count: usize,
}

impl GroundPlane {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] + self.offset
    }

    /// Angle between two plane normals, ignoring orientation.
    pub fn angle_to(&self, other: &GroundPlane) -> f64 {
        let dot: f64 = (0..3).map(|i| self.normal[i] * other.normal[i]).sum();
        dot.abs().min(1.0).acos()
    }
}

fn sub(a: &Point3, b: &Point3) -> Vector3<f64> {
    Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2])
}

fn canonical(normal: Vector3<f64>, through: Vector3<f64>) -> ([f64; 3], f64) {
    let n = if normal.z < 0.0 { -normal } else { normal };
    let n = n.normalize();
    (n.into(), -n.dot(&through))
}

/// Least-squares plane through `points`: the normal is the eigenvector of
/// the scatter matrix with the smallest eigenvalue.
pub fn least_squares_plane(points: &[Point3]) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "least-squares plane needs 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += Vector3::from(*p);
    }
    centroid /= n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // Collinear input leaves two vanishing eigenvalues and no unique normal.
    let scale = eig.eigenvalues[order[2]].abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues[order[1]].abs() <= 1e-12 * scale {
        return Err(Error::DegenerateInput("points are collinear".into()));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let (normal, offset) = canonical(normal, centroid);
    Ok(GroundPlane {
        normal,
        offset,
        inlier_count: points.len(),
    })
}

fn is_collinear(points: &[Point3]) -> bool {
    let p0 = &points[0];
    let far = points
        .iter()
        .map(|p| sub(p, p0))
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
        .unwrap();
    let len = far.norm();
    if len == 0.0 {
        return true;
    }
    let axis = far / len;
    points
        .iter()
        .all(|p| sub(p, p0).cross(&axis).norm() <= 1e-9 * len.max(1.0))
}

/// RANSAC plane fit followed by a least-squares refit on the inliers.
///
/// Hypotheses are drawn from a lexicographically sorted copy so the result
/// does not depend on input order.
pub fn fit_ground_plane(points: &[Point3], config: &RansacConfig, seed: u64) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "ground fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    if is_collinear(&sorted) {
        return Err(Error::DegenerateInput("all points are collinear".into()));
    }

    let threshold = config.inlier_threshold_m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, [f64; 3], f64)> = None;
    for _ in 0..config.iters {
        let idx = rand::seq::index::sample(&mut rng, sorted.len(), 3);
        let (a, b, c) = (&sorted[idx.index(0)], &sorted[idx.index(1)], &sorted[idx.index(2)]);
        let normal = sub(b, a).cross(&sub(c, a));
        let norm = normal.norm();
        if norm <= 1e-12 {
            continue;
        }
        let (n, d) = canonical(normal / norm, Vector3::from(*a));
        let count = sorted
            .iter()
            .filter(|p| (n[0] * p[0] + n[1] * p[1] + n[2] * p[2] + d).abs() <= threshold)
            .count();
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, n, d));
        }
    }

    let inliers: Vec<Point3> = match best {
        Some((_, n, d)) => sorted
            .iter()
            .filter(|p| (n[0] * p[0] + n[1] * p[1] + n[2] * p[2] + d).abs() <= threshold)
            .copied()
            .collect(),
        None => sorted.clone(),
    };
    let mut plane = match least_squares_plane(&inliers) {
        Ok(p) => p,
        // Inliers of a valid hypothesis can still be collinear when the
        // threshold is tiny; keep the hypothesis itself.
        Err(_) => {
            let (_, normal, offset) = best.expect("non-collinear input yields a hypothesis");
            GroundPlane {
                normal,
                offset,
                inlier_count: 0,
            }
        }
    };
    plane.inlier_count = sorted
        .iter()
        .filter(|p| plane.signed_distance(p).abs() <= threshold)
        .count();
    Ok(plane)
}

/// True for every point within `threshold` of the plane.
pub fn segment_ground(points: &[Point3], plane: &GroundPlane, threshold: f64) -> Vec<bool> {
    points
        .iter()
        .map(|p| plane.signed_distance(p).abs() <= threshold)
        .collect()
}

/// Grid cell `[i·s, (i+1)·s) × [j·s, (j+1)·s)` containing `p`.
pub fn tile_cell(p: &Point3, tile_size: f64) -> (i64, i64) {
    (
        (p[0] / tile_size).floor() as i64,
        (p[1] / tile_size).floor() as i64,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTiling {
    /// Kept cells in ascending cell order.
    pub cells: Vec<(i64, i64)>,
    pub point_counts: Vec<usize>,
    /// Ground elements with provisional token ids `0..cells.len()`.
    pub elements: Vec<SceneElement>,
    /// Index into `elements` for every input point; `None` if its cell was
    /// dropped by the budget.
    pub assignment: Vec<Option<usize>>,
}

/// Tiles ground points (already merged across frames) into square cells
/// anchored at the world origin, keeping at most `budget` cells ranked by
/// point count.
pub fn tile_ground(points: &[Point3], tile_size: f64, budget: usize, frames: usize) -> GroundTiling {
    struct Acc {
        count: usize,
        z_sum: f64,
    }
    let mut cells: HashMap<(i64, i64), Acc> = HashMap::new();
    let point_cells: Vec<(i64, i64)> = points.iter().map(|p| tile_cell(p, tile_size)).collect();
    for (p, cell) in points.iter().zip(&point_cells) {
        let acc = cells.entry(*cell).or_insert(Acc { count: 0, z_sum: 0.0 });
        acc.count += 1;
        acc.z_sum += p[2];
    }

    let mut ranked: Vec<((i64, i64), Acc)> = cells.into_iter().collect();
    ranked.sort_by(|(ca, a), (cb, b)| b.count.cmp(&a.count).then(ca.cmp(cb)));
    ranked.truncate(budget);
    ranked.sort_by(|(ca, _), (cb, _)| ca.cmp(cb));

    let mut index = HashMap::with_capacity(ranked.len());
    let mut tiling = GroundTiling {
        cells: Vec::with_capacity(ranked.len()),
        point_counts: Vec::with_capacity(ranked.len()),
        elements: Vec::with_capacity(ranked.len()),
        assignment: Vec::new(),
    };
    for (ordinal, (cell, acc)) in ranked.into_iter().enumerate() {
        index.insert(cell, ordinal);
        let center = [
            (cell.0 as f64 + 0.5) * tile_size,
            (cell.1 as f64 + 0.5) * tile_size,
            acc.z_sum / acc.count as f64,
        ];
        let row = box_row(center, [0.0; 3], 0.0);
        tiling.cells.push(cell);
        tiling.point_counts.push(acc.count);
        tiling.elements.push(SceneElement {
            token_id: ordinal as u32,
            kind: ElementKind::Ground,
            source_id: ordinal as u32,
            boxes: vec![row; frames],
            frame_valid: vec![true; frames],
        });
    }
    tiling.assignment = point_cells.iter().map(|c| index.get(c).copied()).collect();
    tiling
}
