//! Stop-intersection encounters: extraction from fused drives, stop
//! classification from the speed profile, data selection and outcome
//! binarization.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgm::EpisodeLabel;
use crate::fusion::{FusedDrive, FusedSample};
use crate::geo::{haversine_m, path_distance, GeoPoint};
use crate::ingest::{AnnotationTable, EncounterFlags, ParticipantType, Presence};
use crate::intersections::Intersection;

/// 300 ft.
pub const UPSTREAM_M: f64 = 91.44;
/// 200 ft.
pub const DOWNSTREAM_M: f64 = 60.96;

#[derive(Debug, Error, PartialEq)]
pub enum EncounterError {
    #[error("cannot classify an empty speed window")]
    EmptyWindow,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopBehavior {
    Full,
    Rolling,
    NoStop,
}

impl StopBehavior {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopBehavior::Full => "full",
            StopBehavior::Rolling => "rolling",
            StopBehavior::NoStop => "no_stop",
        }
    }

    pub fn is_unsafe(&self) -> bool {
        !matches!(self, StopBehavior::Full)
    }
}

/// Thresholds that turn a speed profile into a [`StopBehavior`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Speeds strictly below this count as stationary (m/s).
    pub v_stop_eps: f64,
    /// Minimum stationary run for a full stop (s).
    pub min_stop_s: f64,
    /// No stop when the window minimum stays at or above this share of the entry speed.
    pub no_stop_ratio: f64,
    /// Time represented by one speed sample (s).
    pub sample_period_s: f64,
    /// Floor applied to the entry speed in the ratio test (m/s).
    pub min_entry_speed: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { v_stop_eps: 0.5, min_stop_s: 2.0, no_stop_ratio: 0.9, sample_period_s: 1.0, min_entry_speed: 1.0 }
    }
}

impl StopRule {
    /// Longest run of stationary samples, in seconds.
    pub fn stationary_s(&self, speeds: &[f64]) -> f64 {
        let (mut best, mut run) = (0usize, 0usize);
        for &v in speeds {
            if v < self.v_stop_eps {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best as f64 * self.sample_period_s
    }
}

/// Full if stationary for at least `min_stop_s`; otherwise no stop if the
/// minimum speed stays at or above `no_stop_ratio` of the (floored) entry
/// speed; otherwise rolling.
pub fn classify_stop(speeds: &[f64], v_entry: f64, rule: &StopRule) -> Result<StopBehavior, EncounterError> {
    if speeds.is_empty() {
        return Err(EncounterError::EmptyWindow);
    }
    // tolerate 10 x 0.1 s summing to 0.9999999
    if rule.stationary_s(speeds) >= rule.min_stop_s - 1e-9 {
        return Ok(StopBehavior::Full);
    }
    let v_min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let v_ref = v_entry.max(rule.min_entry_speed);
    Ok(if v_min >= rule.no_stop_ratio * v_ref { StopBehavior::NoStop } else { StopBehavior::Rolling })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncounterParams {
    pub capture_radius: f64,
    pub refractory_s: i64,
    pub upstream_m: f64,
    pub downstream_m: f64,
    pub rule: StopRule,
}

impl Default for EncounterParams {
    fn default() -> Self {
        Self {
            capture_radius: 25.0,
            refractory_s: 60,
            upstream_m: UPSTREAM_M,
            downstream_m: DOWNSTREAM_M,
            rule: StopRule::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encounter {
    pub participant_id: String,
    pub participant_type: ParticipantType,
    pub drive_id: String,
    /// 1-based position of this encounter in its drive, by time.
    pub ordinal: u32,
    pub intersection_id: String,
    pub nearest_approach_m: f64,
    /// Time of nearest approach.
    pub timestamp: i64,
    pub window: Vec<FusedSample>,
    pub v_entry: f64,
    pub v_min: f64,
    pub stationary_s: f64,
    pub behavior: StopBehavior,
    pub flags: EncounterFlags,
    pub episode: EpisodeLabel,
    pub glucose: Option<f64>,
}

/// Local minima of `d` below `radius`; a plateau counts once, at its first index.
fn local_minima(d: &[f64], radius: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1] == d[i] {
            j += 1;
        }
        let left_ok = i == 0 || d[i - 1] > d[i];
        let right_ok = j + 1 == d.len() || d[j + 1] > d[i];
        if left_ok && right_ok && d[i] <= radius {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

/// One encounter per distinct nearest approach to each intersection.
pub fn detect_encounters(
    drive: &FusedDrive,
    intersections: &[Intersection],
    params: &EncounterParams,
) -> Result<Vec<Encounter>, EncounterError> {
    if !(params.capture_radius > 0.0) {
        return Err(EncounterError::InvalidParameter(format!("capture_radius = {}", params.capture_radius)));
    }
    let samples = &drive.samples;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let positions: Vec<GeoPoint> = samples.iter().map(|s| s.sample.position()).collect();
    let along = path_distance(&positions);
    let speeds: Vec<f64> = samples.iter().map(|s| s.sample.speed).collect();

    // cheap bounding-box prefilter, padded by ~0.01° (> 1 km)
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &positions {
        lat0 = lat0.min(p.lat);
        lat1 = lat1.max(p.lat);
        lon0 = lon0.min(p.lon);
        lon1 = lon1.max(p.lon);
    }
    let pad = 0.01 + params.capture_radius / 111_000.0;

    let mut out = Vec::new();
    for ix in intersections {
        let c = ix.center;
        if c.lat < lat0 - pad || c.lat > lat1 + pad || c.lon < lon0 - 2.0 * pad || c.lon > lon1 + 2.0 * pad {
            continue;
        }
        let dist: Vec<f64> = positions.iter().map(|p| haversine_m(*p, c)).collect();
        let minima = local_minima(&dist, params.capture_radius);

        // collapse chains of minima closer than the refractory period
        let mut picks: Vec<usize> = Vec::new();
        let mut last_t: Option<i64> = None;
        for k in minima {
            let t = samples[k].sample.timestamp;
            match (picks.last_mut(), last_t) {
                (Some(best), Some(prev)) if t - prev <= params.refractory_s => {
                    if dist[k] < dist[*best] {
                        *best = k;
                    }
                }
                _ => picks.push(k),
            }
            last_t = Some(t);
        }

        let mut prev_end: Option<usize> = None;
        for k in picks {
            let mut start = k;
            while start > 0 && along[k] - along[start - 1] <= params.upstream_m {
                start -= 1;
            }
            let mut end = k;
            while end + 1 < samples.len() && along[end + 1] - along[k] <= params.downstream_m {
                end += 1;
            }
            if let Some(pe) = prev_end {
                start = start.max(pe + 1).min(k);
            }
            prev_end = Some(end);
            let window_speeds = &speeds[start..=end];
            let v_entry = window_speeds[0];
            let behavior = classify_stop(window_speeds, v_entry, &params.rule)?;
            out.push(Encounter {
                participant_id: drive.participant_id.clone(),
                participant_type: drive.participant_type,
                drive_id: drive.drive_id.clone(),
                ordinal: 0,
                intersection_id: ix.id.clone(),
                nearest_approach_m: dist[k],
                timestamp: samples[k].sample.timestamp,
                window: samples[start..=end].to_vec(),
                v_entry,
                v_min: window_speeds.iter().copied().fold(f64::INFINITY, f64::min),
                stationary_s: params.rule.stationary_s(window_speeds),
                behavior,
                flags: EncounterFlags::default(),
                episode: samples[k].episode,
                glucose: samples[k].glucose,
            });
        }
    }
    out.sort_by(|a, b| (a.timestamp, &a.intersection_id).cmp(&(b.timestamp, &b.intersection_id)));
    for (i, e) in out.iter_mut().enumerate() {
        e.ordinal = i as u32 + 1;
    }
    Ok(out)
}

/// Copies annotation flags onto encounters by (drive_id, ordinal). Returns
/// the number of encounters that found an annotation.
pub fn attach_annotations(encounters: &mut [Encounter], table: &AnnotationTable) -> usize {
    let mut hits = 0;
    for e in encounters {
        if let Some(f) = table.get(&(e.drive_id.clone(), e.ordinal)) {
            e.flags = *f;
            hits += 1;
        }
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NotPrimaryDriver,
    LeadVehicleEffect,
    CrossingVehicleEffect,
    CrossingPedestrianEffect,
}

/// First failing selection rule, if any.
pub fn exclusion_reason(flags: &EncounterFlags) -> Option<ExclusionReason> {
    if !flags.is_primary_driver {
        Some(ExclusionReason::NotPrimaryDriver)
    } else if flags.lead_vehicle == Presence::PresentWithEffect {
        Some(ExclusionReason::LeadVehicleEffect)
    } else if flags.crossing_vehicle == Presence::PresentWithEffect {
        Some(ExclusionReason::CrossingVehicleEffect)
    } else if flags.crossing_pedestrian == Presence::PresentWithEffect {
        Some(ExclusionReason::CrossingPedestrianEffect)
    } else {
        None
    }
}

/// Keeps encounters with the consented participant driving and no road user
/// that altered the driver's speed.
pub fn apply_selection(encounters: &[Encounter]) -> Vec<Encounter> {
    encounters.iter().filter(|e| exclusion_reason(&e.flags).is_none()).cloned().collect()
}

pub fn exclusion_counts(encounters: &[Encounter]) -> BTreeMap<ExclusionReason, usize> {
    let mut out = BTreeMap::new();
    for r in encounters.iter().filter_map(|e| exclusion_reason(&e.flags)) {
        *out.entry(r).or_insert(0) += 1;
    }
    out
}

/// Modeling row: one selected encounter with a binary outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub participant_id: String,
    pub intersection_id: String,
    pub participant_type: ParticipantType,
    pub episode: EpisodeLabel,
    /// Rolling or no stop.
    pub unsafe_stop: bool,
}

impl BehaviorRow {
    /// Moderate hyperglycemia is labeled but kept out of every model partition.
    pub fn in_model_scope(&self) -> bool {
        !matches!(self.episode, EpisodeLabel::ModerateHyper | EpisodeLabel::Missing)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Binarized {
    pub rows: Vec<BehaviorRow>,
    pub dropped_missing: usize,
}

pub fn binarize(encounters: &[Encounter]) -> Binarized {
    let mut out = Binarized::default();
    for e in encounters {
        if e.episode == EpisodeLabel::Missing {
            out.dropped_missing += 1;
            continue;
        }
        out.rows.push(BehaviorRow {
            participant_id: e.participant_id.clone(),
            intersection_id: e.intersection_id.clone(),
            participant_type: e.participant_type,
            episode: e.episode,
            unsafe_stop: e.behavior.is_unsafe(),
        });
    }
    out
}

pub fn write_encounters<W: Write>(w: W, encounters: &[Encounter]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "participant_id",
        "participant_type",
        "drive_id",
        "encounter",
        "intersection_id",
        "timestamp",
        "nearest_approach_m",
        "window_samples",
        "v_entry",
        "v_min",
        "stationary_s",
        "behavior",
        "lead_vehicle",
        "crossing_vehicle",
        "crossing_pedestrian",
        "is_primary_driver",
        "selected",
        "glucose",
        "episode",
    ])?;
    for e in encounters {
        wtr.write_record([
            e.participant_id.clone(),
            e.participant_type.as_str().into(),
            e.drive_id.clone(),
            e.ordinal.to_string(),
            e.intersection_id.clone(),
            e.timestamp.to_string(),
            format!("{:.2}", e.nearest_approach_m),
            e.window.len().to_string(),
            format!("{:.2}", e.v_entry),
            format!("{:.2}", e.v_min),
            format!("{}", e.stationary_s),
            e.behavior.as_str().into(),
            e.flags.lead_vehicle.as_str().into(),
            e.flags.crossing_vehicle.as_str().into(),
            e.flags.crossing_pedestrian.as_str().into(),
            if e.flags.is_primary_driver { "yes" } else { "no" }.into(),
            if exclusion_reason(&e.flags).is_none() { "yes" } else { "no" }.into(),
            e.glucose.map(|g| format!("{g}")).unwrap_or_default(),
            e.episode.as_str().into(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
