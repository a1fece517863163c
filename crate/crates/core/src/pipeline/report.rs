//! Run report: per-stage counts, model tables, influence tables and the
//! conservation ledger, rendered as JSON or as plain-text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::fusion::FusionSummary;
use crate::glmm::{FitSummary, InfluenceReport, LrtResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntersectionsBlock {
    pub detections: usize,
    pub pass_through_detections: usize,
    pub db_records: usize,
    pub stop_sign_detections: usize,
    pub clustered_detections: usize,
    pub noise_detections: usize,
    pub clusters: usize,
    pub merged_into_db: usize,
    pub merged_clusters: usize,
    pub db_duplicates: usize,
    pub intersections: usize,
    pub from_database: usize,
    pub from_clustering: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgmParticipant {
    pub participant_id: String,
    pub readings: usize,
    pub retained: usize,
    pub removed: usize,
    pub removed_fraction: f64,
    pub missing_fraction: f64,
    pub meets_fda: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgmBlock {
    pub participants: Vec<CgmParticipant>,
    pub readings: usize,
    pub removed: usize,
    pub removed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionBlock {
    pub telemetry_rows: usize,
    pub duplicates_dropped: usize,
    pub participants: usize,
    pub summary: FusionSummary,
    pub samples: usize,
    pub samples_with_glucose: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncounterBlock {
    pub drives_scanned: usize,
    pub annotation_records: usize,
    pub emitted: usize,
    pub annotated: usize,
    pub selected: usize,
    pub excluded: BTreeMap<String, usize>,
    pub dropped_missing_episode: usize,
    pub behavior_rows: usize,
    pub model_scope_rows: usize,
    pub by_behavior: BTreeMap<String, usize>,
    /// episode → (safe, unsafe) counts over behavior rows.
    pub by_episode: BTreeMap<String, SafeUnsafe>,
    pub by_participant_type: BTreeMap<String, SafeUnsafe>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SafeUnsafe {
    pub safe: usize,
    #[serde(rename = "unsafe")]
    pub unsafe_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelBlock {
    /// Random-effect structure, e.g. `participant+intersection`.
    pub structure: String,
    pub random_factors: Vec<String>,
    pub summary: Option<FitSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionModels {
    pub partition: String,
    pub fixed_factor: String,
    pub reference_level: String,
    pub rows: usize,
    pub error: Option<String>,
    pub fits: Vec<ModelBlock>,
    pub lrt: Option<LrtResult>,
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmittedRefit {
    pub grouping: String,
    pub group: String,
    pub summary: Option<FitSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionInfluence {
    pub partition: String,
    pub structure: String,
    pub reports: Vec<InfluenceReport>,
    pub errors: Vec<String>,
    /// Refits without each flagged group, reported beside the preliminary fit.
    pub omitted: Vec<OmittedRefit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerCheck {
    pub name: String,
    pub lhs: usize,
    pub rhs: usize,
    pub balanced: bool,
}

impl LedgerCheck {
    pub fn new(name: impl Into<String>, lhs: usize, rhs: usize) -> Self {
        Self { name: name.into(), lhs, rhs, balanced: lhs == rhs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub stages: Vec<String>,
    pub intersections: Option<IntersectionsBlock>,
    pub cgm: Option<CgmBlock>,
    pub fusion: Option<FusionBlock>,
    pub encounters: Option<EncounterBlock>,
    pub models: Option<Vec<PartitionModels>>,
    pub influence: Option<Vec<PartitionInfluence>>,
    pub ledger: Vec<LedgerCheck>,
    pub warnings: Vec<String>,
    /// Wall-clock stage timings; written to their own file so the report
    /// itself stays reproducible.
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn empty() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stages: Vec::new(),
            intersections: None,
            cgm: None,
            fusion: None,
            encounters: None,
            models: None,
            influence: None,
            ledger: Vec::new(),
            warnings: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn ledger_balanced(&self) -> bool {
        self.ledger.iter().all(|c| c.balanced)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    Human,
}

impl ReportFormat {
    pub fn file_name(&self) -> &'static str {
        match self {
            ReportFormat::Structured => "report.json",
            ReportFormat::Human => "report.txt",
        }
    }
}

pub fn render_structured(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes the report in `format` under `dir`, returning the file path.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: &Path) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    let body = match format {
        ReportFormat::Structured => render_structured(report),
        ReportFormat::Human => render_human(report),
    };
    fs::write(&path, body)?;
    Ok(path)
}

pub fn write_timings(report: &RunReport, dir: &Path) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("timings.json");
    fs::write(&path, serde_json::to_string_pretty(&report.timings).expect("timings serialize") + "\n")?;
    Ok(path)
}

// ----------------------------------------------------------------- human rendering

pub fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

pub fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

pub fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

fn render_summary(out: &mut String, title: &str, s: &FitSummary) {
    let _ = writeln!(out, "  {title}");
    let _ = writeln!(out, "    {:<24} {:<26} {:>6}", "Predictors", "Odds Ratios (95% CI)", "p");
    for r in &s.or_table {
        let or = format!("{} ({}-{})", fmt2(r.odds_ratio), fmt2(r.ci_low), fmt2(r.ci_high));
        let _ = writeln!(out, "    {:<24} {:<26} {:>6}", r.term, or, fmt_p(r.p));
    }
    let _ = writeln!(out, "    Random Effects");
    let _ = writeln!(out, "    {:<24} {}", "σ²", fmt2(s.sigma2_residual));
    for (f, t) in &s.tau {
        let _ = writeln!(out, "    {:<24} {}", format!("τ00 {f}"), fmt2(*t));
    }
    let _ = writeln!(out, "    {:<24} {}", "ICC", fmt2(s.icc));
    for (f, n) in &s.n_groups {
        let _ = writeln!(out, "    {:<24} {}", format!("N {f}"), n);
    }
    let _ = writeln!(out, "    {:<24} {}", "Observations", s.n_obs);
    let _ = writeln!(out, "    {:<24} {} / {}", "Marginal R² / Cond. R²", fmt3(s.r2_marginal), fmt3(s.r2_conditional));
    let _ = writeln!(out, "    {:<24} {}", "log-likelihood", fmt3(s.loglik));
    if !s.converged {
        let _ = writeln!(out, "    (optimizer did not reach the gradient tolerance)");
    }
}

pub fn render_human(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Run report (schema {})", report.schema_version);
    let _ = writeln!(
        out,
        "Stages: {}",
        if report.stages.is_empty() { "none".to_string() } else { report.stages.join(", ") }
    );

    if let Some(b) = &report.intersections {
        let _ = writeln!(out, "\n[intersections]");
        let _ = writeln!(
            out,
            "  detections {} (pass-through {}), database records {}",
            b.detections, b.pass_through_detections, b.db_records
        );
        let _ = writeln!(
            out,
            "  stop_sign detections {}: clustered {}, noise {}",
            b.stop_sign_detections, b.clustered_detections, b.noise_detections
        );
        let _ = writeln!(
            out,
            "  clusters {}, merged into database {}, merged with clusters {}",
            b.clusters, b.merged_into_db, b.merged_clusters
        );
        let _ = writeln!(
            out,
            "  intersections {} (database {}, clustered {})",
            b.intersections, b.from_database, b.from_clustering
        );
    }
    if let Some(c) = &report.cgm {
        let _ = writeln!(out, "\n[cgm]");
        let _ =
            writeln!(out, "  readings {}, removed {} ({}%)", c.readings, c.removed, fmt2(100.0 * c.removed_fraction));
        for p in &c.participants {
            let _ = writeln!(
                out,
                "  {:<12} readings {:>5}  removed {:>3}  missing {}%  meets FDA {}",
                p.participant_id,
                p.readings,
                p.removed,
                fmt2(100.0 * p.missing_fraction),
                if p.meets_fda { "yes" } else { "no" }
            );
        }
    }
    if let Some(f) = &report.fusion {
        let _ = writeln!(out, "\n[fusion]");
        let _ = writeln!(
            out,
            "  telemetry rows {} ({} duplicates dropped), participants {}",
            f.telemetry_rows, f.duplicates_dropped, f.participants
        );
        let _ = writeln!(
            out,
            "  drives {}, discarded {} ({}%), samples {}, with glucose {}",
            f.summary.n_drives,
            f.summary.n_discarded,
            fmt2(100.0 * f.summary.discard_fraction),
            f.samples,
            f.samples_with_glucose
        );
    }
    if let Some(e) = &report.encounters {
        let _ = writeln!(out, "\n[encounters]");
        let _ = writeln!(out, "  drives scanned {}, annotation records {}", e.drives_scanned, e.annotation_records);
        let _ = writeln!(out, "  emitted {}, annotated {}, selected {}", e.emitted, e.annotated, e.selected);
        for (why, n) in &e.excluded {
            let _ = writeln!(out, "  excluded ({why}) {n}");
        }
        let _ = writeln!(out, "  dropped for missing episode {}", e.dropped_missing_episode);
        let _ = writeln!(out, "  behavior rows {}, in model scope {}", e.behavior_rows, e.model_scope_rows);
        for (b, n) in &e.by_behavior {
            let _ = writeln!(out, "  {:<16} {n}", format!("{b} stops"));
        }
        for (title, table) in [("participant type", &e.by_participant_type), ("episode", &e.by_episode)] {
            let _ = writeln!(out, "  {title:<16} {:>6} {:>6}", "safe", "unsafe");
            for (k, v) in table {
                let _ = writeln!(out, "    {k:<14} {:>6} {:>6}", v.safe, v.unsafe_);
            }
        }
    }
    if let Some(models) = &report.models {
        let _ = writeln!(out, "\n[models]");
        for m in models {
            let _ = writeln!(
                out,
                "\nPartition {} ({} rows; {} vs reference {})",
                m.partition, m.rows, m.fixed_factor, m.reference_level
            );
            if let Some(e) = &m.error {
                let _ = writeln!(out, "  not fitted: {e}");
                continue;
            }
            for f in &m.fits {
                match (&f.summary, &f.error) {
                    (Some(s), _) => render_summary(&mut out, &format!("{} / {}", m.partition, f.structure), s),
                    (None, Some(e)) => {
                        let _ = writeln!(out, "  {} / {}: fit failed: {e}", m.partition, f.structure);
                    }
                    _ => {}
                }
            }
            if let Some(l) = &m.lrt {
                let _ =
                    writeln!(out, "  Random-effects comparison: χ²({}) = {}, p = {}", l.df, fmt2(l.chi2), fmt_p(l.p));
            }
            if let Some(w) = &m.winner {
                let _ = writeln!(out, "  Selected structure: {w}");
            }
        }
    }
    if let Some(infl) = &report.influence {
        let _ = writeln!(out, "\n[influence]");
        for p in infl {
            let _ = writeln!(out, "\nPartition {} / {}", p.partition, p.structure);
            for r in &p.reports {
                let _ = writeln!(out, "  Cook's distance by {}", r.grouping);
                for g in &r.groups {
                    let d = g.cooks_d.map_or("missing".to_string(), fmt3);
                    let _ = writeln!(out, "    {:<16} {:>8}{}", g.group, d, if g.flagged { "  > 0.5" } else { "" });
                }
            }
            for e in &p.errors {
                let _ = writeln!(out, "  error: {e}");
            }
            for o in &p.omitted {
                match (&o.summary, &o.error) {
                    (Some(s), _) => {
                        render_summary(&mut out, &format!("{} without {} {}", p.partition, o.grouping, o.group), s)
                    }
                    (None, Some(e)) => {
                        let _ = writeln!(out, "  refit without {} {} failed: {e}", o.grouping, o.group);
                    }
                    _ => {}
                }
            }
        }
    }
    let _ = writeln!(out, "\n[ledger]");
    for c in &report.ledger {
        let _ =
            writeln!(out, "  {:<72} {:>6} {:>6}  {}", c.name, c.lhs, c.rhs, if c.balanced { "ok" } else { "MISMATCH" });
    }
    if !report.warnings.is_empty() {
        let _ = writeln!(out, "\n[warnings]");
        for w in &report.warnings {
            let _ = writeln!(out, "  {w}");
        }
    }
    out
}
