//! Step-hold join of glucose state onto 1 Hz telemetry.

use serde::Serialize;
use thiserror::Error;

use crate::cgm::{classify_episode, glucose_at, EpisodeLabel, GlucoseSeries};
use crate::ingest::{Drive, ParticipantType, TelemetrySample};

/// Default share of drive seconds allowed without glucose before a T1DM drive is discarded.
pub const DEFAULT_DISCARD_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("drive `{drive_id}` belongs to `{drive_participant}` but the CGM series is for `{series_participant}`")]
    ParticipantMismatch { drive_id: String, drive_participant: String, series_participant: String },
}

#[derive(Debug, Clone)]
pub struct FusedSample {
    pub sample: TelemetrySample,
    pub glucose: Option<f64>,
    pub episode: EpisodeLabel,
}

#[derive(Debug, Clone)]
pub struct FusedDrive {
    pub drive_id: String,
    pub participant_id: String,
    pub participant_type: ParticipantType,
    pub samples: Vec<FusedSample>,
    pub missing_fraction: f64,
    pub discarded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionSummary {
    pub n_drives: usize,
    pub n_discarded: usize,
    pub discard_fraction: f64,
}

/// Annotates every sample with the step-held glucose value and its episode.
/// Control drives never discard; T1DM drives discard when the missing
/// fraction exceeds `discard_threshold`.
pub fn fuse_drive(
    drive: &Drive,
    series: Option<&GlucoseSeries>,
    participant_type: ParticipantType,
    staleness: i64,
    discard_threshold: f64,
) -> Result<FusedDrive, FusionError> {
    if let Some(s) = series {
        if !s.readings.is_empty() && s.participant_id != drive.participant_id {
            return Err(FusionError::ParticipantMismatch {
                drive_id: drive.drive_id.clone(),
                drive_participant: drive.participant_id.clone(),
                series_participant: s.participant_id.clone(),
            });
        }
    }
    let samples: Vec<FusedSample> = drive
        .samples
        .iter()
        .map(|s| {
            let glucose = series.and_then(|g| glucose_at(g, s.timestamp, staleness));
            FusedSample { sample: s.clone(), glucose, episode: classify_episode(glucose, participant_type) }
        })
        .collect();
    let missing = samples.iter().filter(|s| s.glucose.is_none()).count();
    let missing_fraction = if samples.is_empty() { 0.0 } else { missing as f64 / samples.len() as f64 };
    let discarded = participant_type == ParticipantType::T1dm && missing_fraction > discard_threshold;
    Ok(FusedDrive {
        drive_id: drive.drive_id.clone(),
        participant_id: drive.participant_id.clone(),
        participant_type,
        samples,
        missing_fraction,
        discarded,
    })
}

pub fn fusion_summary(drives: &[FusedDrive]) -> FusionSummary {
    let n_drives = drives.len();
    let n_discarded = drives.iter().filter(|d| d.discarded).count();
    FusionSummary {
        n_drives,
        n_discarded,
        discard_fraction: if n_drives == 0 { 0.0 } else { n_discarded as f64 / n_drives as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgm::clean_series;
    use crate::ingest::{GlucoseReading, Provenance};

    fn drive(pid: &str, t0: i64, secs: i64) -> Drive {
        Drive {
            participant_id: pid.into(),
            drive_id: "d1".into(),
            samples: (0..secs)
                .map(|k| TelemetrySample {
                    timestamp: t0 + k,
                    participant_id: pid.into(),
                    drive_id: "d1".into(),
                    lat: 41.0,
                    lon: -96.0 + k as f64 * 1e-4,
                    speed: 10.0,
                    heading: None,
                    origin: Provenance::default(),
                })
                .collect(),
        }
    }

    fn cgm(pid: &str, pts: &[(i64, f64)]) -> GlucoseSeries {
        let raw: Vec<_> = pts.iter().map(|&(t, g)| GlucoseReading::new(pid, t, g)).collect();
        clean_series(&raw).unwrap()
    }

    #[test]
    fn control_without_cgm() {
        let f = fuse_drive(&drive("c1", 0, 100), None, ParticipantType::Control, 360, 0.05).unwrap();
        assert!(f.samples.iter().all(|s| s.episode == EpisodeLabel::Control));
        assert!(!f.discarded);
        assert_eq!(f.missing_fraction, 1.0);
    }

    #[test]
    fn fully_covered_t1dm_drive() {
        let s = cgm("p1", &[(0, 100.0), (300, 105.0), (600, 110.0)]);
        let f = fuse_drive(&drive("p1", 0, 900), Some(&s), ParticipantType::T1dm, 360, 0.05).unwrap();
        assert_eq!(f.missing_fraction, 0.0);
        assert!(!f.discarded);
    }

    #[test]
    fn uncovered_tail_discards() {
        // one reading at t = 0 covers seconds 0..=360 of a 600 s drive
        let s = cgm("p1", &[(0, 100.0)]);
        let f = fuse_drive(&drive("p1", 0, 600), Some(&s), ParticipantType::T1dm, 360, 0.05).unwrap();
        assert!((f.missing_fraction - 239.0 / 600.0).abs() < 1e-12);
        assert!(f.discarded);
    }

    #[test]
    fn telemetry_passes_through_untouched() {
        let d = drive("p1", 0, 50);
        let s = cgm("p1", &[(0, 100.0)]);
        let f = fuse_drive(&d, Some(&s), ParticipantType::T1dm, 360, 0.05).unwrap();
        assert_eq!(f.samples.len(), d.samples.len());
        assert!(f.samples.iter().zip(&d.samples).all(|(a, b)| a.sample.same_fields(b)));
        // the whole drive sits inside one hold window
        assert!(f.samples.iter().all(|s| s.episode == EpisodeLabel::Normal));
    }

    #[test]
    fn mismatch_rejected() {
        let s = cgm("p2", &[(0, 100.0)]);
        assert!(matches!(
            fuse_drive(&drive("p1", 0, 10), Some(&s), ParticipantType::T1dm, 360, 0.05),
            Err(FusionError::ParticipantMismatch { .. })
        ));
    }

    #[test]
    fn summary_counts() {
        assert_eq!(fusion_summary(&[]), FusionSummary { n_drives: 0, n_discarded: 0, discard_fraction: 0.0 });
        let base = fuse_drive(&drive("c1", 0, 5), None, ParticipantType::Control, 360, 0.05).unwrap();
        let mut drives = vec![base; 10];
        drives[3].discarded = true;
        drives[7].discarded = true;
        let s = fusion_summary(&drives);
        assert_eq!((s.n_drives, s.n_discarded), (10, 2));
        assert!((s.discard_fraction - 0.2).abs() < 1e-12);

        let mut many = vec![drives[0].clone(); 1000];
        for d in many.iter_mut().take(149) {
            d.discarded = true;
        }
        assert!((fusion_summary(&many).discard_fraction - 0.149).abs() < 1e-12);
    }
}
