//! # glycodrive
//!
//! Batch analytics for naturalistic driving studies that pair 1 Hz vehicle
//! telemetry with continuous glucose monitor (CGM) data. The crate takes raw
//! telemetry, stop-sign detection logs and CGM series through to
//! mixed-effects logistic regression of unsafe stopping on glycemic state:
//!
//! - [`ingest`]: typed CSV loaders and writers for the four input families
//! - [`geo`]: great-circle distance, local projection, along-path distance
//! - [`intersections`]: DBSCAN clustering, Weiszfeld geometric median and
//!   reconciliation against an intersection database
//! - [`cgm`]: physiologic-rate cleaning, compliance, episode bins, step-hold lookup
//! - [`fusion`]: per-drive join of glucose state onto telemetry
//! - [`encounters`]: approach extraction, stop classification, selection, binarization
//! - [`glmm`]: Laplace-approximated mixed-effects logistic regression,
//!   likelihood-ratio comparison, fit summaries and group-deletion Cook's distance
//! - [`pipeline`]: configuration, the end-to-end run and its reports
//! - [`synth`]: deterministic synthetic corpora
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.
//!
//! ```
//! use glycodrive::geo::{haversine_m, GeoPoint};
//!
//! let a = GeoPoint::new(0.0, 0.0).unwrap();
//! let b = GeoPoint::new(0.0, 180.0).unwrap();
//! assert!((haversine_m(a, b) - std::f64::consts::PI * 6_371_000.0).abs() < 0.1);
//! ```

pub mod cgm;
pub mod encounters;
pub mod fusion;
pub mod geo;
pub mod glmm;
pub mod ingest;
pub mod intersections;
pub mod pipeline;
pub mod synth;

pub use cgm::{EpisodeLabel, GlucoseSeries};
pub use encounters::{BehaviorRow, Encounter, StopBehavior};
pub use fusion::FusedDrive;
pub use geo::{GeoPoint, LocalPoint};
pub use glmm::{FitControls, MelrFit, ModelSpec};
pub use ingest::{GlucoseReading, ParticipantType, TelemetrySample};
pub use intersections::Intersection;
pub use pipeline::{run_pipeline, PipelineConfig, RunReport};

// Guide chapters, compiled so their listings run under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geodesy.md")]
    mod geodesy {}
    #[doc = include_str!("../../../book/src/intersections.md")]
    mod intersections {}
    #[doc = include_str!("../../../book/src/cgm.md")]
    mod cgm {}
    #[doc = include_str!("../../../book/src/encounters.md")]
    mod encounters {}
    #[doc = include_str!("../../../book/src/glmm.md")]
    mod glmm {}
    #[doc = include_str!("../../../book/src/influence.md")]
    mod influence {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
