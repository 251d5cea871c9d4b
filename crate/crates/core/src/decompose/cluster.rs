//! Euclidean connected components over raw points.

use std::collections::HashMap;

use crate::model::Point3;

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clustering {
    /// Member point indices per cluster, each ascending; clusters ordered by
    /// their smallest member index.
    pub clusters: Vec<Vec<usize>>,
    /// Cluster index per input point; `None` for points in components below
    /// the size threshold.
    pub labels: Vec<Option<usize>>,
}

fn cell_of(p: &Point3, cell: f64) -> (i64, i64, i64) {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

/// Connected components of the graph joining points at distance `<= radius`.
/// Neighbors are found through a hash grid with cell edge `radius`, which
/// visits every pair within range exactly as an all-pairs scan would.
pub fn cluster_open_set(points: &[Point3], radius: f64, min_points: usize) -> Clustering {
    let n = points.len();
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p, radius)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut uf = UnionFind::new(n);
    for (i, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell_of(p, radius);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let q = &points[j];
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                        if d2 <= r2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }

    // Roots are visited in ascending point order, so cluster order follows
    // the smallest member index.
    let mut root_slot: HashMap<usize, usize> = HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        let slot = *root_slot.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[slot].push(i);
    }

    let mut out = Clustering {
        clusters: Vec::new(),
        labels: vec![None; n],
    };
    for members in components {
        if members.len() < min_points {
            continue;
        }
        let id = out.clusters.len();
        for &m in &members {
            out.labels[m] = Some(id);
        }
        out.clusters.push(members);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// All-pairs union-find oracle; returns a canonical partition.
    fn brute_partition(points: &[Point3], radius: f64, min_points: usize) -> Vec<Vec<usize>> {
        let mut uf = UnionFind::new(points.len());
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let d: f64 = (0..3).map(|k| (points[i][k] - points[j][k]).powi(2)).sum();
                if d <= radius * radius {
                    uf.union(i, j);
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..points.len() {
            let r = uf.find(i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= min_points).collect();
        out.sort();
        out
    }

    fn blob(center: Point3, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                [center[0] + 0.3 * t.sin(), center[1] + 0.3 * t.cos(), center[2] + 0.02 * i as f64]
            })
            .collect()
    }

    #[test]
    fn two_distant_blobs() {
        let mut pts = blob([0.0, 0.0, 1.0], 10);
        pts.extend(blob([10.0, 0.0, 1.0], 10));
        let c = cluster_open_set(&pts, 0.5, 3);
        assert_eq!(c.clusters.len(), 2);
        assert_eq!(c.clusters[0], (0..10).collect::<Vec<_>>());
        assert_eq!(c.clusters[1], (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn chain_is_one_component() {
        let pts: Vec<Point3> = (0..5).map(|i| [0.4 * i as f64, 0.0, 0.0]).collect();
        let c = cluster_open_set(&pts, 0.5, 3);
        assert_eq!(c.clusters, brute_partition(&pts, 0.5, 3));
        assert_eq!(c.clusters.len(), 1);
    }

    #[test]
    fn small_components_are_discarded() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let c = cluster_open_set(&pts, 0.5, 3);
        assert!(c.clusters.is_empty());
        assert_eq!(c.labels, vec![None, None]);
    }

    #[test]
    fn radius_boundary_is_closed() {
        let pts = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let c = cluster_open_set(&pts, 0.5, 1);
        assert_eq!(c.clusters.len(), 1);
    }

    proptest! {
        #[test]
        fn grid_matches_all_pairs(pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0), 0..120)) {
            let pts: Vec<Point3> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let mut fast = cluster_open_set(&pts, 0.5, 2).clusters;
            fast.sort();
            prop_assert_eq!(fast, brute_partition(&pts, 0.5, 2));
        }

        #[test]
        fn partition_independent_of_order(pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0), 1..80), shift in 0usize..80) {
            let pts: Vec<Point3> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let shift = shift % pts.len();
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.rotate_left(shift);
            perm.reverse();
            let shuffled: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
            let canon = |c: Clustering, map: &dyn Fn(usize) -> usize| {
                let mut v: Vec<Vec<usize>> = c.clusters.into_iter().map(|g| {
                    let mut g: Vec<usize> = g.into_iter().map(map).collect();
                    g.sort();
                    g
                }).collect();
                v.sort();
                v
            };
            let a = canon(cluster_open_set(&pts, 0.5, 2), &|i| i);
            let b = canon(cluster_open_set(&shuffled, 0.5, 2), &|i| perm[i]);
            prop_assert_eq!(a, b);
        }
    }
}
