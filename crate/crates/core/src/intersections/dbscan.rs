//! Density-based clustering (DBSCAN) over planar points.
//!
//! A point is *core* when at least `min_pts` points, itself included, lie
//! within `eps` (inclusive). Clusters are the maximal density-connected sets
//! grown from core points in index order; a border point joins the first
//! cluster that reaches it. Everything else is noise.

use std::collections::{HashMap, VecDeque};

use crate::geo::LocalPoint;

use super::IntersectionError;

/// Cluster label per input point: `Some(id)` with contiguous ids, or `None` for noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub cluster_count: usize,
    pub noise_count: usize,
}

impl ClusterAssignment {
    /// Point indices of each cluster, in cluster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Relabels clusters in order of their smallest member index. Two
    /// assignments describe the same partition iff their canonical forms match.
    pub fn canonical(&self) -> Vec<Option<usize>> {
        let mut map: HashMap<usize, usize> = HashMap::new();
        self.labels
            .iter()
            .map(|l| {
                l.map(|c| {
                    let next = map.len();
                    *map.entry(c).or_insert(next)
                })
            })
            .collect()
    }
}

/// Uniform grid with cell size `eps` for fixed-radius neighbor queries.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[LocalPoint], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &LocalPoint, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices within `eps` of `points[i]`, self included, ascending.
    fn neighbors(&self, points: &[LocalPoint], i: usize, eps: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(&points[i], self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(bucket.iter().copied().filter(|&j| points[i].distance(&points[j]) <= eps));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn dbscan(points: &[LocalPoint], eps: f64, min_pts: usize) -> Result<ClusterAssignment, IntersectionError> {
    if !(eps > 0.0 && eps.is_finite()) || min_pts < 1 {
        return Err(IntersectionError::InvalidParameter(format!("eps = {eps}, min_pts = {min_pts}")));
    }
    if let Some(i) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(IntersectionError::InvalidParameter(format!("point {i} has non-finite coordinates")));
    }
    let grid = Grid::new(points, eps);
    let neighborhoods: Vec<Vec<usize>> = (0..points.len()).map(|i| grid.neighbors(points, i, eps)).collect();
    let is_core: Vec<bool> = neighborhoods.iter().map(|n| n.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut cluster_count = 0;
    let mut queue = VecDeque::new();
    for seed in 0..points.len() {
        if !is_core[seed] || labels[seed].is_some() {
            continue;
        }
        let c = cluster_count;
        cluster_count += 1;
        labels[seed] = Some(c);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighborhoods[p] {
                if labels[q].is_none() {
                    labels[q] = Some(c);
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    let noise_count = labels.iter().filter(|l| l.is_none()).count();
    Ok(ClusterAssignment { labels, cluster_count, noise_count })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> LocalPoint {
        LocalPoint::planar(x, y)
    }

    #[test]
    fn empty_input() {
        let a = dbscan(&[], 10.0, 3).unwrap();
        assert_eq!((a.cluster_count, a.noise_count), (0, 0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(dbscan(&[p(0.0, 0.0)], 0.0, 3).is_err());
        assert!(dbscan(&[p(0.0, 0.0)], 1.0, 0).is_err());
    }

    #[test]
    fn two_separated_blobs() {
        let mut pts = Vec::new();
        for k in 0..10 {
            let a = k as f64 * 0.6;
            pts.push(p(0.4 * a.cos(), 0.4 * a.sin()));
            pts.push(p(1000.0 + 0.4 * a.cos(), 0.4 * a.sin()));
        }
        let a = dbscan(&pts, 50.0, 5).unwrap();
        assert_eq!((a.cluster_count, a.noise_count), (2, 0));
        assert_eq!(a.labels[0], a.labels[2]);
        assert_ne!(a.labels[0], a.labels[1]);
    }

    #[test]
    fn eps_is_inclusive_and_self_counts() {
        // three collinear points exactly eps apart: the middle one has 3 neighbors
        let pts = [p(0.0, 0.0), p(5.0, 0.0), p(10.0, 0.0)];
        let a = dbscan(&pts, 5.0, 3).unwrap();
        assert_eq!(a.cluster_count, 1);
        assert_eq!(a.noise_count, 0);
        let a = dbscan(&[p(0.0, 0.0)], 1.0, 1).unwrap();
        assert_eq!(a.cluster_count, 1);
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // two cores on either side of a shared border point at x = 0
        let left = [p(-8.0, 0.0), p(-8.0, 1.0), p(-8.0, -1.0), p(-9.0, 0.0)];
        let right = [p(8.0, 0.0), p(8.0, 1.0), p(8.0, -1.0), p(9.0, 0.0)];
        let mut pts: Vec<LocalPoint> = left.to_vec();
        pts.extend_from_slice(&right);
        pts.push(p(0.0, 0.0));
        let a = dbscan(&pts, 8.0, 4).unwrap();
        assert_eq!(a.cluster_count, 2);
        assert_eq!(a.labels[8], a.labels[0]);
    }
}
