//! Constant-velocity Kalman tracking of open-set clusters across frames.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::model::{BoxRow, TrackConfig};

type Matrix6x3 = SMatrix<f64, 6, 3>;

/// Filter state: position and velocity with full covariance, plus the size
/// and heading of the latest measured box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
    pub size: [f64; 3],
    pub heading: f64,
    pub age: usize,
    pub missed: usize,
}

impl TrackState {
    pub fn spawn(row: &BoxRow, position_var: f64, velocity_var: f64) -> Self {
        let mut covariance = Matrix6::zeros();
        for i in 0..3 {
            covariance[(i, i)] = position_var;
            covariance[(i + 3, i + 3)] = velocity_var;
        }
        Self {
            mean: Vector6::new(row[0], row[1], row[2], 0.0, 0.0, 0.0),
            covariance,
            size: [row[3], row[4], row[5]],
            heading: row[6],
            age: 1,
            missed: 0,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.mean.fixed_rows::<3>(0).into_owned()
    }
}

/// `x ← F x`, `P ← F P Fᵀ + Q` with `Q = diag(0, 0, 0, q, q, q)`.
pub fn predict(state: &TrackState, dt: f64, process_noise: f64) -> TrackState {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    let mut q = Matrix6::zeros();
    for i in 3..6 {
        q[(i, i)] = process_noise;
    }
    let p = f * state.covariance * f.transpose() + q;
    TrackState {
        mean: f * state.mean,
        covariance: 0.5 * (p + p.transpose()),
        age: state.age + 1,
        ..state.clone()
    }
}

/// Position-only Kalman update (Joseph form) with `R = r·I`. Size and heading
/// are replaced by the measured box.
pub fn update(state: &TrackState, measured: &BoxRow, measurement_noise: f64) -> TrackState {
    let z = Vector3::new(measured[0], measured[1], measured[2]);
    let p = &state.covariance;
    let r = Matrix3::identity() * measurement_noise;
    let s: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned() + r;
    let s_inv = s
        .try_inverse()
        .or_else(|| s.pseudo_inverse(1e-15).ok())
        .unwrap_or_else(Matrix3::zeros);
    let p_ht: Matrix6x3 = p.fixed_view::<6, 3>(0, 0).into_owned();
    let gain: Matrix6x3 = p_ht * s_inv;
    let innovation = z - state.position();
    let mean = state.mean + gain * innovation;

    let mut h = SMatrix::<f64, 3, 6>::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    let i_kh = Matrix6::identity() - gain * h;
    let cov = i_kh * p * i_kh.transpose() + gain * r * gain.transpose();
    TrackState {
        mean,
        covariance: 0.5 * (cov + cov.transpose()),
        size: [measured[3], measured[4], measured[5]],
        heading: measured[6],
        age: state.age,
        missed: 0,
    }
}

/// Result of one association round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// `(track index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy matching on ascending center distance; pairs beyond `gate` are
/// never matched. Ties break on (track index, detection index).
pub fn associate(tracks: &[Vector3<f64>], detections: &[Vector3<f64>], gate: f64) -> Association {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            let dist = (t - d).norm();
            if dist <= gate {
                pairs.push((dist, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut out = Association::default();
    for (_, ti, di) in pairs {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            out.matches.push((ti, di));
        }
    }
    out.matches.sort_unstable();
    out.unmatched_tracks = (0..tracks.len()).filter(|&i| !track_used[i]).collect();
    out.unmatched_detections = (0..detections.len()).filter(|&i| !det_used[i]).collect();
    out
}

/// One open-set element after tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetTrack {
    /// Measured box per frame, zeros where unmatched.
    pub boxes: Vec<BoxRow>,
    pub frame_valid: Vec<bool>,
    /// Cluster index matched in each frame.
    pub detections: Vec<Option<usize>>,
    /// Total points over all matched clusters.
    pub point_count: usize,
}

/// Tracks per-frame cluster boxes through the window. `members[f][c]` lists
/// the points of cluster `c` in frame `f` (only its length is used).
///
/// Every cluster ends up in exactly one track; tracks are ordered by the
/// frame and cluster index that spawned them.
pub fn track_open_set(
    boxes: &[Vec<BoxRow>],
    members: &[Vec<Vec<usize>>],
    config: &TrackConfig,
) -> Vec<OpenSetTrack> {
    let frames = boxes.len();
    let mut states: Vec<TrackState> = Vec::new();
    let mut tracks: Vec<OpenSetTrack> = Vec::new();

    for (f, frame_boxes) in boxes.iter().enumerate() {
        for s in states.iter_mut() {
            *s = predict(s, config.frame_dt_s, config.process_noise);
        }
        let predicted: Vec<Vector3<f64>> = states.iter().map(TrackState::position).collect();
        let detected: Vec<Vector3<f64>> = frame_boxes.iter().map(|b| Vector3::new(b[0], b[1], b[2])).collect();
        let assoc = associate(&predicted, &detected, config.gate_m);

        for &(ti, di) in &assoc.matches {
            states[ti] = update(&states[ti], &frame_boxes[di], config.measurement_noise);
            let t = &mut tracks[ti];
            t.boxes[f] = frame_boxes[di];
            t.frame_valid[f] = true;
            t.detections[f] = Some(di);
            t.point_count += members[f][di].len();
        }
        for &ti in &assoc.unmatched_tracks {
            states[ti].missed += 1;
        }
        for &di in &assoc.unmatched_detections {
            let row = &frame_boxes[di];
            states.push(TrackState::spawn(
                row,
                config.measurement_noise,
                config.initial_velocity_var,
            ));
            let mut t = OpenSetTrack {
                boxes: vec![[0.0; 7]; frames],
                frame_valid: vec![false; frames],
                detections: vec![None; frames],
                point_count: members[f][di].len(),
            };
            t.boxes[f] = *row;
            t.frame_valid[f] = true;
            t.detections[f] = Some(di);
            tracks.push(t);
        }
    }
    tracks
}
