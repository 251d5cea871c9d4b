//! Point-to-feature-map association.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CameraFrame, Overlap, Point3, ProjectionConfig, Sampling};

/// Points closer than this to the camera plane are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pixel coordinates on the feature map, or `None` when the point is behind
/// the camera or outside `[0, W') × [0, H')`.
pub fn project_point(p: &Point3, camera: &CameraFrame) -> Option<(f64, f64)> {
    let c = camera.extrinsics.apply(p);
    if c[2] <= MIN_DEPTH {
        return None;
    }
    let k = &camera.intrinsics;
    let u = k.fx * c[0] / c[2] + k.cx;
    let v = k.fy * c[1] / c[2] + k.cy;
    let inside = u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64;
    inside.then_some((u, v))
}

pub fn project_points(points: &[Point3], camera: &CameraFrame) -> Vec<Option<(f64, f64)>> {
    points.iter().map(|p| project_point(p, camera)).collect()
}

/// Writes the feature at `(u, v)` into `out`. Nearest sampling reads the cell
/// `[floor(v), floor(u)]`; bilinear interpolates between cell centers with
/// edge clamping.
pub fn sample_feature(camera: &CameraFrame, u: f64, v: f64, sampling: Sampling, out: &mut [f32]) {
    let (w, h) = (camera.width, camera.height);
    match sampling {
        Sampling::Nearest => {
            let col = (u.floor() as usize).min(w - 1);
            let row = (v.floor() as usize).min(h - 1);
            out.copy_from_slice(camera.feature(row, col));
        }
        Sampling::Bilinear => {
            let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
            let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
            let (a, b) = (camera.feature(y0, x0), camera.feature(y0, x1));
            let (c, d) = (camera.feature(y1, x0), camera.feature(y1, x1));
            for (i, o) in out.iter_mut().enumerate() {
                let top = a[i] + (b[i] - a[i]) * fx;
                let bottom = c[i] + (d[i] - c[i]) * fx;
                *o = top + (bottom - top) * fy;
            }
        }
    }
}

/// Per-point image features, row-major `N × dim`, and their validity.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub features: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Looks up an image feature for every point (with its frame index) from the
/// valid cameras of the same frame, evaluated in ascending camera id. Points
/// seen by no camera get a zero row and `valid = false`.
pub fn build_point_features(
    points: &[Point3],
    frames: &[u32],
    cameras: &[CameraFrame],
    dim: usize,
    config: &ProjectionConfig,
) -> Result<PointFeatures> {
    assert_eq!(points.len(), frames.len(), "one frame index per point");
    for cam in cameras {
        if cam.dim != dim {
            return Err(Error::DimensionMismatch {
                camera: cam.camera_id,
                frame: cam.frame_index,
                expected: dim,
                found: cam.dim,
            });
        }
    }
    let mut by_frame: BTreeMap<usize, Vec<&CameraFrame>> = BTreeMap::new();
    for cam in cameras.iter().filter(|c| c.valid) {
        by_frame.entry(cam.frame_index).or_default().push(cam);
    }
    for cams in by_frame.values_mut() {
        cams.sort_by_key(|c| c.camera_id);
    }

    let mut out = PointFeatures {
        features: vec![0.0; points.len() * dim],
        valid: vec![false; points.len()],
    };
    let mut scratch = vec![0.0f32; dim];
    for (i, (p, &f)) in points.iter().zip(frames).enumerate() {
        let Some(cams) = by_frame.get(&(f as usize)) else {
            continue;
        };
        let row = &mut out.features[i * dim..(i + 1) * dim];
        let mut hits = 0u32;
        for cam in cams {
            let Some((u, v)) = project_point(p, cam) else {
                continue;
            };
            match config.overlap {
                Overlap::FirstCamera => {
                    sample_feature(cam, u, v, config.sampling, row);
                    hits = 1;
                    break;
                }
                Overlap::Average => {
                    sample_feature(cam, u, v, config.sampling, &mut scratch);
                    for (o, s) in row.iter_mut().zip(&scratch) {
                        *o += s;
                    }
                    hits += 1;
                }
            }
        }
        if hits > 1 {
            let inv = 1.0 / hits as f32;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        out.valid[i] = hits > 0;
    }
    Ok(out)
}
