//! CGM series cleaning, wear compliance, glycemic episode bins and
//! point-in-time glucose lookup.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{GlucoseReading, ParticipantType};

/// Nominal CGM cadence.
pub const CADENCE_S: i64 = 300;
/// Window of the physiologic-rate rule.
pub const RATE_WINDOW_S: i64 = 900;
/// Maximum relative change tolerated within [`RATE_WINDOW_S`].
pub const MAX_RELATIVE_CHANGE: f64 = 0.25;
/// Wear periods with at least this missing fraction fail compliance.
pub const FDA_MISSING_LIMIT: f64 = 0.25;
/// Default hold for step-hold lookup: one cadence plus a minute of grace.
pub const DEFAULT_STALENESS_S: i64 = 360;

#[derive(Debug, Error, PartialEq)]
pub enum CgmError {
    #[error("readings are not strictly time-ordered at index {index}")]
    UnorderedInput { index: usize },
    #[error("wear window [{start}, {end}) is empty")]
    InvalidWindow { start: i64, end: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    PhysiologicRate,
}

impl RemovalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RemovalReason::PhysiologicRate => "physiologic_rate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlucoseSeries {
    pub participant_id: String,
    pub readings: Vec<GlucoseReading>,
    pub removed: Vec<(GlucoseReading, RemovalReason)>,
}

/// Acute glycemic state. `Ord` follows glucose for the T1DM bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeLabel {
    Hypo,
    Normal,
    ModerateHyper,
    SevereHyper,
    Missing,
    Control,
}

impl EpisodeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpisodeLabel::Hypo => "hypo",
            EpisodeLabel::Normal => "normal",
            EpisodeLabel::ModerateHyper => "moderate_hyper",
            EpisodeLabel::SevereHyper => "severe_hyper",
            EpisodeLabel::Missing => "missing",
            EpisodeLabel::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "hypo" => EpisodeLabel::Hypo,
            "normal" => EpisodeLabel::Normal,
            "moderate_hyper" => EpisodeLabel::ModerateHyper,
            "severe_hyper" => EpisodeLabel::SevereHyper,
            "missing" => EpisodeLabel::Missing,
            "control" => EpisodeLabel::Control,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub participant_id: String,
    pub expected_slots: usize,
    pub observed_slots: usize,
    pub missing_fraction: f64,
    pub removed_fraction: f64,
    pub meets_fda: bool,
}

/// Single forward pass of the physiologic-rate rule.
///
/// Each reading is compared with the most recent *retained* reading. If that
/// comparator is at most 15 minutes older and the relative change exceeds
/// 25 %, the newer reading is removed and the comparator stays. Larger gaps
/// reset the comparator.
pub fn clean_series(raw: &[GlucoseReading]) -> Result<GlucoseSeries, CgmError> {
    if let Some(i) = raw.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(CgmError::UnorderedInput { index: i + 1 });
    }
    let participant_id = raw.first().map(|r| r.participant_id.clone()).unwrap_or_default();
    let mut readings: Vec<GlucoseReading> = Vec::with_capacity(raw.len());
    let mut removed = Vec::new();
    for r in raw {
        if let Some(p) = readings.last() {
            if r.timestamp - p.timestamp <= RATE_WINDOW_S
                && (r.glucose - p.glucose).abs() / p.glucose > MAX_RELATIVE_CHANGE
            {
                removed.push((r.clone(), RemovalReason::PhysiologicRate));
                continue;
            }
        }
        readings.push(r.clone());
    }
    Ok(GlucoseSeries { participant_id, readings, removed })
}

/// Slot coverage of the 5-minute grid over `[wear_start, wear_end)`.
pub fn compliance(raw: &[GlucoseReading], wear_start: i64, wear_end: i64) -> Result<ComplianceReport, CgmError> {
    if wear_start >= wear_end {
        return Err(CgmError::InvalidWindow { start: wear_start, end: wear_end });
    }
    let expected_slots = ((wear_end - wear_start) / CADENCE_S) as usize;
    let mut seen = vec![false; expected_slots];
    for r in raw {
        if r.timestamp >= wear_start {
            let slot = ((r.timestamp - wear_start) / CADENCE_S) as usize;
            if slot < expected_slots {
                seen[slot] = true;
            }
        }
    }
    let observed_slots = seen.iter().filter(|s| **s).count();
    let missing_fraction = if expected_slots == 0 { 1.0 } else { 1.0 - observed_slots as f64 / expected_slots as f64 };
    let mut sorted = raw.to_vec();
    sorted.sort_by_key(|r| r.timestamp);
    sorted.dedup_by_key(|r| r.timestamp);
    let removed = clean_series(&sorted).map(|s| s.removed.len()).unwrap_or(0);
    let removed_fraction = if raw.is_empty() { 0.0 } else { removed as f64 / sorted.len() as f64 };
    Ok(ComplianceReport {
        participant_id: raw.first().map(|r| r.participant_id.clone()).unwrap_or_default(),
        expected_slots,
        observed_slots,
        missing_fraction,
        removed_fraction,
        meets_fda: missing_fraction < FDA_MISSING_LIMIT,
    })
}

/// Glycemic episode bins (mg/dL): `<= 70` hypo, `< 180` normal, `< 300`
/// moderate hyper, otherwise severe hyper. Control participants are always
/// [`EpisodeLabel::Control`].
pub fn classify_episode(glucose: Option<f64>, participant_type: ParticipantType) -> EpisodeLabel {
    if participant_type == ParticipantType::Control {
        return EpisodeLabel::Control;
    }
    match glucose {
        None => EpisodeLabel::Missing,
        Some(g) if g <= 70.0 => EpisodeLabel::Hypo,
        Some(g) if g < 180.0 => EpisodeLabel::Normal,
        Some(g) if g < 300.0 => EpisodeLabel::ModerateHyper,
        Some(_) => EpisodeLabel::SevereHyper,
    }
}

/// Last retained reading at or before `t`, if no older than `staleness` seconds.
pub fn glucose_at(series: &GlucoseSeries, t: i64, staleness: i64) -> Option<f64> {
    let idx = series.readings.partition_point(|r| r.timestamp <= t);
    let r = series.readings.get(idx.checked_sub(1)?)?;
    (t - r.timestamp <= staleness).then_some(r.glucose)
}

/// Removal audit: `participant_id,timestamp,glucose,reason`.
pub fn write_removals<'a, W: Write>(
    w: W,
    series: impl IntoIterator<Item = &'a GlucoseSeries>,
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["participant_id", "timestamp", "glucose", "reason"])?;
    for s in series {
        for (r, why) in &s.removed {
            wtr.write_record([
                r.participant_id.clone(),
                r.timestamp.to_string(),
                format!("{}", r.glucose),
                why.as_str().into(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
