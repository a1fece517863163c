//! Stop-intersection geolocation.
//!
//! Stop-sign detections are projected to a local plane, clustered with
//! [`dbscan`], and each cluster is reduced to its [`geometric_median`]. The
//! resulting centers are reconciled with an authoritative intersection
//! database: a center within `merge_radius` of a database record is replaced
//! by that record.

mod dbscan;
mod median;

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::geo::{self, haversine_m, GeoError, GeoPoint};
use crate::ingest::{ClassLabel, ControlType, DbIntersection, DetectionRecord};

pub use dbscan::{dbscan, ClusterAssignment};
pub use median::{geometric_median, objective as median_objective, GeometricMedian};

#[derive(Debug, Error)]
pub enum IntersectionError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionSource {
    Clustered,
    Database,
}

impl IntersectionSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            IntersectionSource::Clustered => "clustered",
            IntersectionSource::Database => "database",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Intersection {
    pub id: String,
    pub center: GeoPoint,
    pub control_type: ControlType,
    pub source: IntersectionSource,
    /// Stop-sign detections backing this intersection.
    pub support: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
    pub merge_radius: f64,
    pub median_tol: f64,
    pub median_max_iter: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 50.0, min_pts: 5, merge_radius: 25.0, median_tol: 1e-6, median_max_iter: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct IntersectionBuild {
    /// Database-backed intersections first (by id), then clustered ones (by id).
    pub intersections: Vec<Intersection>,
    /// Stop-sign detections labeled noise by the clustering.
    pub rejects: Vec<DetectionRecord>,
    pub assignment: ClusterAssignment,
    /// Clustered centers absorbed by a database record.
    pub merged_into_db: usize,
    /// Clustered centers absorbed by a stronger clustered center.
    pub merged_clusters: usize,
    /// Database records dropped for lying within `merge_radius` of an earlier record.
    pub db_duplicates: usize,
}

pub fn build_intersections(
    detections: &[DetectionRecord],
    db: &[DbIntersection],
    params: &ClusterParams,
) -> Result<IntersectionBuild, IntersectionError> {
    if !(params.merge_radius >= 0.0) {
        return Err(IntersectionError::InvalidParameter(format!("merge_radius = {}", params.merge_radius)));
    }
    let mut stops: Vec<&DetectionRecord> =
        detections.iter().filter(|d| d.class_label == ClassLabel::StopSign).collect();
    stops.sort_by(|a, b| a.lat.total_cmp(&b.lat).then(a.lon.total_cmp(&b.lon)).then(a.timestamp.cmp(&b.timestamp)));

    let positions: Vec<GeoPoint> = stops.iter().map(|d| d.position()).collect();
    let (assignment, centers) = match geo::centroid(&positions) {
        None => (ClusterAssignment { labels: vec![], cluster_count: 0, noise_count: 0 }, vec![]),
        Some(origin) => {
            let local = geo::to_local(&positions, origin)?;
            let assignment = dbscan(&local, params.eps, params.min_pts)?;
            let mut centers = Vec::with_capacity(assignment.cluster_count);
            for members in assignment.members() {
                let pts: Vec<_> = members.iter().map(|&i| local[i]).collect();
                let m = geometric_median(&pts, params.median_tol, params.median_max_iter)?;
                centers.push((geo::from_local(&m.point), members.len()));
            }
            (assignment, centers)
        }
    };
    let rejects =
        assignment.labels.iter().zip(&stops).filter(|(l, _)| l.is_none()).map(|(_, d)| (*d).clone()).collect();

    let mut out: Vec<Intersection> = Vec::new();
    let mut db_duplicates = 0;
    let mut db_sorted: Vec<&DbIntersection> = db.iter().collect();
    db_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for rec in db_sorted {
        let center = GeoPoint { lat: rec.lat, lon: rec.lon };
        if out.iter().any(|o| haversine_m(o.center, center) <= params.merge_radius) {
            log::warn!("intersection database record `{}` duplicates an earlier record", rec.id);
            db_duplicates += 1;
            continue;
        }
        out.push(Intersection {
            id: rec.id.clone(),
            center,
            control_type: rec.control_type,
            source: IntersectionSource::Database,
            support: 0,
        });
    }
    let n_db = out.len();

    // Stronger clusters claim their neighborhood first.
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[b].1.cmp(&centers[a].1).then(a.cmp(&b)));
    let (mut merged_into_db, mut merged_clusters) = (0, 0);
    let mut clustered: Vec<(usize, Intersection)> = Vec::new();
    for c in order {
        let (center, support) = centers[c];
        let nearest_db = out[..n_db]
            .iter_mut()
            .map(|o| (haversine_m(o.center, center), o))
            .filter(|(d, _)| *d <= params.merge_radius)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, rec)) = nearest_db {
            rec.support += support;
            merged_into_db += 1;
            continue;
        }
        if let Some((_, other)) =
            clustered.iter_mut().find(|(_, o)| haversine_m(o.center, center) <= params.merge_radius)
        {
            other.support += support;
            merged_clusters += 1;
            continue;
        }
        clustered.push((
            c,
            Intersection {
                id: String::new(),
                center,
                control_type: ControlType::Unknown,
                source: IntersectionSource::Clustered,
                support,
            },
        ));
    }
    clustered.sort_by_key(|(c, _)| *c);
    for (k, (_, mut i)) in clustered.into_iter().enumerate() {
        i.id = format!("cl-{:04}", k + 1);
        out.push(i);
    }

    Ok(IntersectionBuild { intersections: out, rejects, assignment, merged_into_db, merged_clusters, db_duplicates })
}

/// Writes `id,lat,lon,control_type,source,support`.
pub fn write_intersections<W: Write>(w: W, intersections: &[Intersection]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["id", "lat", "lon", "control_type", "source", "support"])?;
    for i in intersections {
        wtr.write_record([
            i.id.clone(),
            format!("{:.7}", i.center.lat),
            format!("{:.7}", i.center.lon),
            i.control_type.as_str().to_string(),
            i.source.as_str().to_string(),
            i.support.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
