//! Geodesic primitives on a spherical earth.
//!
//! Clustering radii and approach windows are tens to hundreds of meters, so a
//! sphere of radius [`EARTH_RADIUS_M`] and an equirectangular local projection
//! are accurate well beyond what the downstream stages need.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius used by every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Maximum distance from the projection origin accepted by [`to_local`].
pub const LOCAL_ENVELOPE_M: f64 = 200_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("point {index} lies {distance_m:.0} m from the projection origin (limit {LOCAL_ENVELOPE_M} m)")]
    OutOfEnvelope { index: usize, distance_m: f64 },
}

/// A WGS84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
            Ok(Self { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }
}

/// Planar coordinates in meters east (`x`) and north (`y`) of `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
    pub origin: GeoPoint,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64, origin: GeoPoint) -> Self {
        Self { x, y, origin }
    }

    /// A point in an abstract plane anchored at (0°, 0°). Handy for the
    /// purely geometric algorithms, which never look at the origin.
    pub fn planar(x: f64, y: f64) -> Self {
        Self { x, y, origin: GeoPoint { lat: 0.0, lon: 0.0 } }
    }

    pub fn distance(&self, other: &LocalPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Great-circle distance in meters (haversine formula).
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Arithmetic mean of latitudes and longitudes. Used as the projection origin
/// for a batch of nearby points; not meaningful across the antimeridian.
pub fn centroid(points: &[GeoPoint]) -> Option<GeoPoint> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
    Some(GeoPoint { lat, lon })
}

/// Equirectangular projection around `origin`.
pub fn to_local(points: &[GeoPoint], origin: GeoPoint) -> Result<Vec<LocalPoint>, GeoError> {
    let cos_lat = origin.lat.to_radians().cos();
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let d = haversine_m(*p, origin);
            if d > LOCAL_ENVELOPE_M {
                return Err(GeoError::OutOfEnvelope { index, distance_m: d });
            }
            Ok(LocalPoint {
                x: EARTH_RADIUS_M * (p.lon - origin.lon).to_radians() * cos_lat,
                y: EARTH_RADIUS_M * (p.lat - origin.lat).to_radians(),
                origin,
            })
        })
        .collect()
}

/// Inverse of [`to_local`].
pub fn from_local(p: &LocalPoint) -> GeoPoint {
    let cos_lat = p.origin.lat.to_radians().cos();
    GeoPoint {
        lat: p.origin.lat + (p.y / EARTH_RADIUS_M).to_degrees(),
        lon: p.origin.lon + (p.x / (EARTH_RADIUS_M * cos_lat)).to_degrees(),
    }
}

/// Cumulative haversine arc length at each vertex of `traj`; the first entry is 0.
pub fn path_distance(traj: &[GeoPoint]) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    for (i, p) in traj.iter().enumerate() {
        if i > 0 {
            acc += haversine_m(traj[i - 1], *p);
        }
        out.push(acc);
    }
    out
}
