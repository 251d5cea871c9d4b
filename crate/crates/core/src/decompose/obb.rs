//! Convex hull and minimum-area enclosing rectangle (rotating calipers).

use std::f64::consts::{FRAC_PI_2, PI};

use crate::model::{box_row, BoxRow, Point3};

/// Smallest extent reported for any box dimension (m).
pub const SIZE_FLOOR: f64 = 0.05;

pub type Point2 = [f64; 2];

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain. Returns the hull counter-clockwise starting at
/// the lowest-x (then lowest-y) point, without collinear vertices.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// An oriented rectangle: `axis` is a unit direction, extents are measured
/// along `axis` and its left normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub center: Point2,
    /// Angle of `axis` in radians.
    pub angle: f64,
    pub extent_axis: f64,
    pub extent_normal: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.extent_axis * self.extent_normal
    }
}

fn dot(a: &Point2, b: &Point2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Minimum-area rectangle enclosing a convex polygon given counter-clockwise
/// with at least three vertices. Among equal-area candidates the first edge
/// in hull order wins.
pub fn min_area_rect(hull: &[Point2]) -> Rect {
    let m = hull.len();
    assert!(m >= 3, "min_area_rect needs a polygon");
    let edge_dir = |i: usize| {
        let (a, b) = (&hull[i], &hull[(i + 1) % m]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        [dx / len, dy / len]
    };

    let u0 = edge_dir(0);
    let n0 = [-u0[1], u0[0]];
    let argbest = |score: &dyn Fn(&Point2) -> f64| {
        (0..m)
            .max_by(|&a, &b| score(&hull[a]).total_cmp(&score(&hull[b])))
            .unwrap()
    };
    let mut far_u = argbest(&|p| dot(p, &u0));
    let mut far_n = argbest(&|p| dot(p, &n0));
    let mut near_u = argbest(&|p| -dot(p, &u0));

    let mut best: Option<Rect> = None;
    for i in 0..m {
        let u = edge_dir(i);
        let n = [-u[1], u[0]];
        // Each caliper only moves forward around the hull.
        for _ in 0..m {
            let next = (far_u + 1) % m;
            if dot(&hull[next], &u) > dot(&hull[far_u], &u) {
                far_u = next;
            } else {
                break;
            }
        }
        for _ in 0..m {
            let next = (far_n + 1) % m;
            if dot(&hull[next], &n) > dot(&hull[far_n], &n) {
                far_n = next;
            } else {
                break;
            }
        }
        for _ in 0..m {
            let next = (near_u + 1) % m;
            if dot(&hull[next], &u) < dot(&hull[near_u], &u) {
                near_u = next;
            } else {
                break;
            }
        }
        let base = &hull[i];
        let hi_u = dot(&hull[far_u], &u);
        let lo_u = dot(&hull[near_u], &u);
        let base_n = dot(base, &n);
        let hi_n = dot(&hull[far_n], &n);
        let rect = Rect {
            center: {
                let cu = 0.5 * (hi_u + lo_u);
                let cn = 0.5 * (hi_n + base_n);
                [u[0] * cu + n[0] * cn, u[1] * cu + n[1] * cn]
            },
            angle: u[1].atan2(u[0]),
            extent_axis: hi_u - lo_u,
            extent_normal: hi_n - base_n,
        };
        match best {
            Some(b) if rect.area() >= b.area() * (1.0 - 1e-12) => {}
            _ => best = Some(rect),
        }
    }
    best.unwrap()
}

fn canonical_heading(angle: f64) -> f64 {
    let h = angle.rem_euclid(PI);
    if h >= PI {
        0.0
    } else {
        h
    }
}

/// Tightest oriented box around a non-empty cluster: minimum-area rectangle
/// in xy, vertical extent from min/max z. Length is the longer side and the
/// heading is its direction in `[0, π)`; square footprints report a heading
/// in `[0, π/2)`.
pub fn fit_tight_box(points: &[Point3]) -> BoxRow {
    assert!(!points.is_empty(), "fit_tight_box needs at least one point");
    let (mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        z_lo = z_lo.min(p[2]);
        z_hi = z_hi.max(p[2]);
    }
    let z_center = 0.5 * (z_lo + z_hi);
    let height = (z_hi - z_lo).max(SIZE_FLOOR);

    let xy: Vec<Point2> = points.iter().map(|p| [p[0], p[1]]).collect();
    let hull = convex_hull(&xy);
    let (center, mut length, mut width, mut heading) = match hull.len() {
        1 => (hull[0], 0.0, 0.0, 0.0),
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            (
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                dx.hypot(dy),
                0.0,
                dy.atan2(dx),
            )
        }
        _ => {
            let r = min_area_rect(&hull);
            if r.extent_normal > r.extent_axis {
                (r.center, r.extent_normal, r.extent_axis, r.angle + FRAC_PI_2)
            } else {
                (r.center, r.extent_axis, r.extent_normal, r.angle)
            }
        }
    };
    heading = canonical_heading(heading);
    if (length - width).abs() <= 1e-9 * length.max(1.0) {
        heading = heading.rem_euclid(FRAC_PI_2);
        if heading >= FRAC_PI_2 - 1e-12 {
            heading = 0.0;
        }
    }
    length = length.max(SIZE_FLOOR);
    width = width.max(SIZE_FLOOR);
    box_row([center[0], center[1], z_center], [length, width, height], heading)
}
