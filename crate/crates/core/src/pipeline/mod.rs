//! Configuration and the end-to-end run: intersections, CGM cleaning,
//! fusion, encounters, models and influence, with CSV and report outputs.

mod report;

pub use report::{
    emit_report, fmt2, fmt3, fmt_p, render_human, render_structured, write_timings, CgmBlock, CgmParticipant,
    EncounterBlock, FusionBlock, IntersectionsBlock, LedgerCheck, ModelBlock, OmittedRefit, PartitionInfluence,
    PartitionModels, ReportFormat, RunReport, SafeUnsafe, StageTiming, SCHEMA_VERSION,
};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgm::{self, GlucoseSeries, CADENCE_S};
use crate::encounters::{self, BehaviorRow, Encounter, EncounterParams, StopRule};
use crate::fusion::{self, FusedDrive};
use crate::glmm::{
    build_partitions, cooks_groups, fit_melr, lrt_compare, summarize_fit, FitControls, MelrFit, ModelSpec, Partition,
    RandomFactor,
};
use crate::ingest::{self, GlucoseReading, ParticipantType, TelemetryLoad};
use crate::intersections::{self, ClusterParams, Intersection, IntersectionSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Intersections,
    Cgm,
    Fusion,
    Encounters,
    Models,
    Influence,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Intersections, Stage::Cgm, Stage::Fusion, Stage::Encounters, Stage::Models, Stage::Influence];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Intersections => "intersections",
            Stage::Cgm => "cgm",
            Stage::Fusion => "fusion",
            Stage::Encounters => "encounters",
            Stage::Models => "models",
            Stage::Influence => "influence",
        }
    }

    /// Stages whose outputs this stage consumes directly.
    pub fn prerequisites(&self) -> &'static [Stage] {
        match self {
            Stage::Intersections | Stage::Cgm => &[],
            Stage::Fusion => &[Stage::Cgm],
            Stage::Encounters => &[Stage::Intersections, Stage::Fusion],
            Stage::Models => &[Stage::Encounters],
            Stage::Influence => &[Stage::Models],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| ConfigError::UnknownStage(s.to_string()))
    }
}

/// Requested stages plus everything they depend on, in execution order.
pub fn stage_closure(requested: &[Stage]) -> Vec<Stage> {
    fn add(s: Stage, out: &mut Vec<Stage>) {
        if out.contains(&s) {
            return;
        }
        for p in s.prerequisites() {
            add(*p, out);
        }
        out.push(s);
    }
    let mut out = Vec::new();
    for s in requested {
        add(*s, &mut out);
    }
    out.sort();
    out
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read configuration: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("input `{name}` does not exist: {path}")]
    MissingPath { name: &'static str, path: PathBuf },
    #[error("parameter `{name}` = {value} is outside {range}")]
    OutOfRange { name: &'static str, value: String, range: &'static str },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("stage list is not in dependency order: `{later}` is listed after `{earlier}`")]
    StageOrder { earlier: Stage, later: Stage },
    #[error("stage `{0}` is listed twice")]
    DuplicateStage(Stage),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}`: {source}")]
    Stage { stage: Stage, source: Box<dyn std::error::Error + Send + Sync> },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    fn stage(stage: Stage, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        PipelineError::Stage { stage, source: Box::new(e) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub telemetry: PathBuf,
    pub cgm: PathBuf,
    pub detections: PathBuf,
    pub intersections: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    pub roster: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub eps: f64,
    pub min_pts: usize,
    pub merge_radius: f64,
    pub staleness: i64,
    pub discard_threshold: f64,
    pub capture_radius: f64,
    pub refractory_s: i64,
    pub v_stop_eps: f64,
    pub min_stop_s: f64,
    pub no_stop_ratio: f64,
    pub glmm_tol: f64,
    pub glmm_max_iter: usize,
}

impl Default for Params {
    fn default() -> Self {
        let rule = StopRule::default();
        let enc = EncounterParams::default();
        let cl = ClusterParams::default();
        let fit = FitControls::default();
        Self {
            eps: cl.eps,
            min_pts: cl.min_pts,
            merge_radius: cl.merge_radius,
            staleness: cgm::DEFAULT_STALENESS_S,
            discard_threshold: fusion::DEFAULT_DISCARD_THRESHOLD,
            capture_radius: enc.capture_radius,
            refractory_s: enc.refractory_s,
            v_stop_eps: rule.v_stop_eps,
            min_stop_s: rule.min_stop_s,
            no_stop_ratio: rule.no_stop_ratio,
            glmm_tol: fit.tol,
            glmm_max_iter: fit.max_iter,
        }
    }
}

impl Params {
    pub fn cluster(&self) -> ClusterParams {
        ClusterParams {
            eps: self.eps,
            min_pts: self.min_pts,
            merge_radius: self.merge_radius,
            ..ClusterParams::default()
        }
    }

    pub fn encounter(&self) -> EncounterParams {
        EncounterParams {
            capture_radius: self.capture_radius,
            refractory_s: self.refractory_s,
            rule: StopRule {
                v_stop_eps: self.v_stop_eps,
                min_stop_s: self.min_stop_s,
                no_stop_ratio: self.no_stop_ratio,
                ..StopRule::default()
            },
            ..EncounterParams::default()
        }
    }

    pub fn fit_controls(&self) -> FitControls {
        FitControls { tol: self.glmm_tol, max_iter: self.glmm_max_iter }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(
            ok: bool,
            name: &'static str,
            value: impl fmt::Display,
            range: &'static str,
        ) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { name, value: value.to_string(), range })
            }
        }
        check(self.eps > 0.0 && self.eps <= 1000.0, "eps", self.eps, "(0, 1000] m")?;
        check(self.min_pts >= 1, "min_pts", self.min_pts, "[1, ∞)")?;
        check(
            self.merge_radius >= 0.0 && self.merge_radius <= 1000.0,
            "merge_radius",
            self.merge_radius,
            "[0, 1000] m",
        )?;
        check(self.staleness > 0 && self.staleness <= 86_400, "staleness", self.staleness, "(0, 86400] s")?;
        check((0.0..=1.0).contains(&self.discard_threshold), "discard_threshold", self.discard_threshold, "[0, 1]")?;
        check(
            self.capture_radius > 0.0 && self.capture_radius <= 500.0,
            "capture_radius",
            self.capture_radius,
            "(0, 500] m",
        )?;
        check(self.refractory_s >= 0, "refractory_s", self.refractory_s, "[0, ∞) s")?;
        check(self.v_stop_eps > 0.0 && self.v_stop_eps <= 5.0, "v_stop_eps", self.v_stop_eps, "(0, 5] m/s")?;
        check(self.min_stop_s > 0.0 && self.min_stop_s <= 60.0, "min_stop_s", self.min_stop_s, "(0, 60] s")?;
        check(self.no_stop_ratio > 0.0 && self.no_stop_ratio <= 1.0, "no_stop_ratio", self.no_stop_ratio, "(0, 1]")?;
        check(self.glmm_tol > 0.0 && self.glmm_tol < 1.0, "glmm_tol", self.glmm_tol, "(0, 1)")?;
        check(self.glmm_max_iter >= 10, "glmm_max_iter", self.glmm_max_iter, "[10, ∞)")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default = "default_stages")]
    stages: Vec<Stage>,
    inputs: Inputs,
    #[serde(default)]
    params: Params,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

/// A validated run configuration. Relative paths in a configuration file
/// resolve against the file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    pub params: Params,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    /// Parses TOML text without touching the file system.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let f: ConfigFile = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: PathBuf::from("<config>"), message: e.to_string() })?;
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        Ok(Self {
            inputs: Inputs {
                telemetry: rel(f.inputs.telemetry),
                cgm: rel(f.inputs.cgm),
                detections: rel(f.inputs.detections),
                intersections: rel(f.inputs.intersections),
                annotations: f.inputs.annotations.map(rel),
                roster: rel(f.inputs.roster),
            },
            params: f.params,
            output_dir: rel(f.output_dir),
            stages: f.stages,
        })
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = dir.into();
        self
    }

    pub fn with_stages(mut self, stages: Vec<Stage>) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let i = &self.inputs;
        let mut paths: Vec<(&'static str, &Path)> = vec![
            ("telemetry", &i.telemetry),
            ("cgm", &i.cgm),
            ("detections", &i.detections),
            ("intersections", &i.intersections),
            ("roster", &i.roster),
        ];
        if let Some(a) = &i.annotations {
            paths.push(("annotations", a));
        }
        for (name, p) in paths {
            if !p.is_file() {
                return Err(ConfigError::MissingPath { name, path: p.to_path_buf() });
            }
        }
        self.params.validate()?;
        for w in self.stages.windows(2) {
            if w[0] == w[1] {
                return Err(ConfigError::DuplicateStage(w[0]));
            }
            if w[1] < w[0] {
                return Err(ConfigError::StageOrder { earlier: w[0], later: w[1] });
            }
        }
        Ok(())
    }

    /// Stages that will execute: the requested ones and their prerequisites.
    pub fn execution_plan(&self) -> Vec<Stage> {
        stage_closure(&self.stages)
    }
}

struct Run<'a> {
    config: &'a PipelineConfig,
    report: RunReport,
    telemetry: Option<TelemetryLoad>,
    roster: Option<BTreeMap<String, ParticipantType>>,
    intersections: Vec<Intersection>,
    series: BTreeMap<String, GlucoseSeries>,
    fused: Vec<FusedDrive>,
    rows: Vec<BehaviorRow>,
    fits: Vec<(Partition, Vec<BehaviorRow>, ModelSpec, MelrFit)>,
}

/// Runs the configured stages, writes CSV outputs and both report formats
/// (plus `timings.json`) under the output directory, and returns the report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let plan = config.execution_plan();
    fs::create_dir_all(&config.output_dir)
        .map_err(|source| PipelineError::Output { path: config.output_dir.clone(), source })?;
    let mut run = Run {
        config,
        report: RunReport::empty(),
        telemetry: None,
        roster: None,
        intersections: Vec::new(),
        series: BTreeMap::new(),
        fused: Vec::new(),
        rows: Vec::new(),
        fits: Vec::new(),
    };
    run.report.stages = plan.iter().map(|s| s.as_str().to_string()).collect();
    for stage in plan {
        info!("stage {stage}");
        let t0 = Instant::now();
        match stage {
            Stage::Intersections => run.intersections()?,
            Stage::Cgm => run.cgm()?,
            Stage::Fusion => run.fusion()?,
            Stage::Encounters => run.encounters()?,
            Stage::Models => run.models(),
            Stage::Influence => run.influence(),
        }
        run.report.timings.push(StageTiming { stage: stage.as_str().into(), seconds: t0.elapsed().as_secs_f64() });
    }
    let report = run.report;
    let dir = &config.output_dir;
    let out_err = |path: PathBuf| move |source| PipelineError::Output { path, source };
    for fmt in [ReportFormat::Structured, ReportFormat::Human] {
        emit_report(&report, fmt, dir).map_err(out_err(dir.join(fmt.file_name())))?;
    }
    write_timings(&report, dir).map_err(out_err(dir.join("timings.json")))?;
    Ok(report)
}

fn write_csv(
    dir: &Path,
    name: &str,
    stage: Stage,
    f: impl FnOnce(BufWriter<File>) -> Result<(), csv::Error>,
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|source| PipelineError::Output { path: path.clone(), source })?;
    f(BufWriter::new(file)).map_err(|e| PipelineError::stage(stage, e))
}

impl Run<'_> {
    fn telemetry(&mut self, stage: Stage) -> Result<(), PipelineError> {
        if self.telemetry.is_some() {
            return Ok(());
        }
        let i = &self.config.inputs;
        let t = ingest::load_telemetry(&i.telemetry).map_err(|e| PipelineError::stage(stage, e))?;
        let roster = ingest::load_roster(&i.roster).map_err(|e| PipelineError::stage(stage, e))?;
        self.telemetry = Some(t);
        self.roster = Some(roster);
        Ok(())
    }

    fn intersections(&mut self) -> Result<(), PipelineError> {
        let st = Stage::Intersections;
        let i = &self.config.inputs;
        let det = ingest::load_detections(&i.detections).map_err(|e| PipelineError::stage(st, e))?;
        let db = ingest::load_intersection_db(&i.intersections).map_err(|e| PipelineError::stage(st, e))?;
        let stops = det.stop_signs();
        let build = intersections::build_intersections(&stops, &db, &self.config.params.cluster())
            .map_err(|e| PipelineError::stage(st, e))?;
        let noise = build.assignment.noise_count;
        let clustered = build.assignment.labels.iter().filter(|l| l.is_some()).count();
        let from_database = build.intersections.iter().filter(|x| x.source == IntersectionSource::Database).count();
        if build.db_duplicates > 0 {
            self.report
                .warnings
                .push(format!("{} intersection database records duplicate earlier records", build.db_duplicates));
        }
        self.report.ledger.push(LedgerCheck::new(
            "stop-sign detections = clustered + noise",
            stops.len(),
            clustered + noise,
        ));
        self.report.ledger.push(LedgerCheck::new(
            "detections = stop-sign + pass-through",
            det.records.len(),
            stops.len() + det.pass_through_count(),
        ));
        self.report.intersections = Some(IntersectionsBlock {
            detections: det.records.len(),
            pass_through_detections: det.pass_through_count(),
            db_records: db.len(),
            stop_sign_detections: stops.len(),
            clustered_detections: clustered,
            noise_detections: noise,
            clusters: build.assignment.cluster_count,
            merged_into_db: build.merged_into_db,
            merged_clusters: build.merged_clusters,
            db_duplicates: build.db_duplicates,
            intersections: build.intersections.len(),
            from_database,
            from_clustering: build.intersections.len() - from_database,
        });
        write_csv(&self.config.output_dir, "intersections.csv", st, |w| {
            intersections::write_intersections(w, &build.intersections)
        })?;
        self.intersections = build.intersections;
        Ok(())
    }

    fn cgm(&mut self) -> Result<(), PipelineError> {
        let st = Stage::Cgm;
        let raw: BTreeMap<String, Vec<GlucoseReading>> =
            ingest::load_cgm(&self.config.inputs.cgm).map_err(|e| PipelineError::stage(st, e))?;
        let mut participants = Vec::new();
        let (mut readings, mut removed) = (0, 0);
        for (pid, rs) in &raw {
            let series = cgm::clean_series(rs).map_err(|e| PipelineError::stage(st, e))?;
            let (Some(first), Some(last)) = (rs.first(), rs.last()) else { continue };
            let comp = cgm::compliance(rs, first.timestamp, last.timestamp + CADENCE_S)
                .map_err(|e| PipelineError::stage(st, e))?;
            if !comp.meets_fda {
                self.report.warnings.push(format!(
                    "participant {pid}: CGM missing fraction {} exceeds the wear-compliance limit",
                    fmt3(comp.missing_fraction)
                ));
            }
            self.report.ledger.push(LedgerCheck::new(
                format!("cgm {pid}: readings = retained + removed"),
                rs.len(),
                series.readings.len() + series.removed.len(),
            ));
            readings += rs.len();
            removed += series.removed.len();
            participants.push(CgmParticipant {
                participant_id: pid.clone(),
                readings: rs.len(),
                retained: series.readings.len(),
                removed: series.removed.len(),
                removed_fraction: series.removed.len() as f64 / rs.len() as f64,
                missing_fraction: comp.missing_fraction,
                meets_fda: comp.meets_fda,
            });
            self.series.insert(pid.clone(), series);
        }
        self.report.cgm = Some(CgmBlock {
            participants,
            readings,
            removed,
            removed_fraction: if readings == 0 { 0.0 } else { removed as f64 / readings as f64 },
        });
        write_csv(&self.config.output_dir, "cgm_removals.csv", st, |w| cgm::write_removals(w, self.series.values()))
    }

    fn fusion(&mut self) -> Result<(), PipelineError> {
        let st = Stage::Fusion;
        self.telemetry(st)?;
        let t = self.telemetry.as_ref().expect("telemetry loaded");
        let roster = self.roster.as_ref().expect("roster loaded");
        if let Some(p) = t.drives.iter().find(|d| !roster.contains_key(&d.participant_id)) {
            return Err(PipelineError::stage(st, ingest::IngestError::UnrosteredParticipant(p.participant_id.clone())));
        }
        let p = &self.config.params;
        let mut fused = Vec::with_capacity(t.drives.len());
        for d in &t.drives {
            let ptype = roster[&d.participant_id];
            let series = match ptype {
                ParticipantType::T1dm => self.series.get(&d.participant_id),
                ParticipantType::Control => None,
            };
            let f = fusion::fuse_drive(d, series, ptype, p.staleness, p.discard_threshold)
                .map_err(|e| PipelineError::stage(st, e))?;
            if f.discarded {
                self.report.warnings.push(format!(
                    "drive {}: {}% of samples lack glucose; drive discarded",
                    f.drive_id,
                    fmt2(100.0 * f.missing_fraction)
                ));
            }
            fused.push(f);
        }
        let samples: usize = fused.iter().map(|f| f.samples.len()).sum();
        let with_glucose = fused.iter().flat_map(|f| &f.samples).filter(|s| s.glucose.is_some()).count();
        self.report.ledger.push(LedgerCheck::new("telemetry samples = fused samples", t.sample_count(), samples));
        let participants =
            t.drives.iter().map(|d| d.participant_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
        self.report.fusion = Some(FusionBlock {
            telemetry_rows: t.sample_count() + t.duplicates_dropped,
            duplicates_dropped: t.duplicates_dropped,
            participants,
            summary: fusion::fusion_summary(&fused),
            samples,
            samples_with_glucose: with_glucose,
        });
        self.fused = fused;
        Ok(())
    }

    fn encounters(&mut self) -> Result<(), PipelineError> {
        let st = Stage::Encounters;
        self.telemetry(st)?;
        let i = &self.config.inputs;
        let annotations = match &i.annotations {
            Some(p) => ingest::load_annotations(p).map_err(|e| PipelineError::stage(st, e))?,
            None => ingest::AnnotationTable::new(),
        };
        let aux = ingest::AuxTables {
            intersection_db: Vec::new(),
            encounter_annotations: annotations,
            participant_roster: self.roster.clone().expect("roster loaded"),
        };
        ingest::cross_validate(self.telemetry.as_ref().expect("telemetry loaded"), &aux)
            .map_err(|e| PipelineError::stage(st, e))?;
        let params = self.config.params.encounter();
        let mut emitted: Vec<Encounter> = Vec::new();
        let mut scanned = 0;
        for d in self.fused.iter().filter(|d| !d.discarded) {
            scanned += 1;
            emitted.extend(
                encounters::detect_encounters(d, &self.intersections, &params)
                    .map_err(|e| PipelineError::stage(st, e))?,
            );
        }
        let annotated = encounters::attach_annotations(&mut emitted, &aux.encounter_annotations);
        let excluded = encounters::exclusion_counts(&emitted);
        let selected = encounters::apply_selection(&emitted);
        let bin = encounters::binarize(&selected);
        let n_excluded: usize = excluded.values().sum();

        let mut by_behavior = BTreeMap::new();
        for e in &selected {
            *by_behavior.entry(e.behavior.as_str().to_string()).or_insert(0) += 1;
        }
        let (mut by_episode, mut by_type): (BTreeMap<String, SafeUnsafe>, BTreeMap<String, SafeUnsafe>) =
            Default::default();
        for r in &bin.rows {
            for (map, key) in [(&mut by_episode, r.episode.as_str()), (&mut by_type, r.participant_type.as_str())] {
                let c = map.entry(key.to_string()).or_default();
                if r.unsafe_stop {
                    c.unsafe_ += 1;
                } else {
                    c.safe += 1;
                }
            }
        }
        let ledger = &mut self.report.ledger;
        ledger.push(LedgerCheck::new(
            "emitted encounters = selected + excluded",
            emitted.len(),
            selected.len() + n_excluded,
        ));
        ledger.push(LedgerCheck::new(
            "selected encounters = behavior rows + missing episode",
            selected.len(),
            bin.rows.len() + bin.dropped_missing,
        ));
        if annotated < aux.encounter_annotations.len() {
            self.report.warnings.push(format!(
                "{} annotation records matched no detected encounter",
                aux.encounter_annotations.len() - annotated
            ));
        }
        self.report.encounters = Some(EncounterBlock {
            drives_scanned: scanned,
            annotation_records: aux.encounter_annotations.len(),
            emitted: emitted.len(),
            annotated,
            selected: selected.len(),
            excluded: excluded.into_iter().map(|(k, v)| (exclusion_name(k), v)).collect(),
            dropped_missing_episode: bin.dropped_missing,
            behavior_rows: bin.rows.len(),
            model_scope_rows: bin.rows.iter().filter(|r| r.in_model_scope()).count(),
            by_behavior,
            by_episode,
            by_participant_type: by_type,
        });
        write_csv(&self.config.output_dir, "encounters.csv", st, |w| encounters::write_encounters(w, &emitted))?;
        self.rows = bin.rows;
        Ok(())
    }

    fn models(&mut self) {
        let controls = self.config.params.fit_controls();
        let parts = build_partitions(&self.rows);
        let mut blocks = Vec::new();
        for (partition, rows) in parts.iter() {
            let mut block = PartitionModels {
                partition: partition.as_str().into(),
                fixed_factor: fixed_factor_name(partition).into(),
                reference_level: partition.reference_level().into(),
                rows: rows.as_ref().map_or(0, |r| r.len()),
                error: None,
                fits: Vec::new(),
                lrt: None,
                winner: None,
            };
            let rows = match rows {
                Ok(r) => r,
                Err(e) => {
                    block.error = Some(e.to_string());
                    blocks.push(block);
                    continue;
                }
            };
            let structures: [&[RandomFactor]; 2] =
                [&[RandomFactor::Participant], &[RandomFactor::Participant, RandomFactor::Intersection]];
            let mut fits: Vec<Option<(ModelSpec, MelrFit)>> = Vec::new();
            for factors in structures {
                let spec = ModelSpec::for_partition(partition, factors);
                let name = structure_name(factors);
                match fit_melr(rows, &spec, &controls) {
                    Ok(fit) => {
                        if !fit.converged {
                            self.report.warnings.push(format!(
                                "{} / {name}: optimizer stopped with gradient norm {:.2e}",
                                partition.as_str(),
                                fit.gradient_norm
                            ));
                        }
                        self.report.ledger.push(LedgerCheck::new(
                            format!("{} / {name}: model observations = partition rows", partition.as_str()),
                            fit.n_obs,
                            rows.len(),
                        ));
                        block.fits.push(ModelBlock {
                            structure: name,
                            random_factors: factors.iter().map(|f| f.as_str().to_string()).collect(),
                            summary: Some(summarize_fit(&fit)),
                            error: None,
                        });
                        fits.push(Some((spec, fit)));
                    }
                    Err(e) => {
                        warn!("{} / {name}: {e}", partition.as_str());
                        block.fits.push(ModelBlock {
                            structure: name,
                            random_factors: factors.iter().map(|f| f.as_str().to_string()).collect(),
                            summary: None,
                            error: Some(e.to_string()),
                        });
                        fits.push(None);
                    }
                }
            }
            let mut full = fits.pop().flatten();
            let mut reduced = fits.pop().flatten();
            let winner = match (&reduced, &full) {
                (Some((_, r)), Some((_, f))) => match lrt_compare(r, f) {
                    Ok(l) => {
                        if l.raw < -1e-6 {
                            self.report.warnings.push(format!(
                                "{}: negative likelihood-ratio statistic {:.3e} clamped to zero",
                                partition.as_str(),
                                l.raw
                            ));
                        }
                        block.lrt = Some(l);
                        if l.p < 0.05 {
                            full.take()
                        } else {
                            reduced.take()
                        }
                    }
                    Err(e) => {
                        self.report.warnings.push(format!("{}: {e}", partition.as_str()));
                        reduced.take()
                    }
                },
                (Some(_), None) => reduced.take(),
                (None, Some(_)) => full.take(),
                (None, None) => None,
            };
            if let Some((spec, fit)) = winner {
                block.winner = Some(structure_name(&spec.random_factors));
                self.fits.push((partition, rows.clone(), spec, fit));
            }
            blocks.push(block);
        }
        self.report.models = Some(blocks);
    }

    fn influence(&mut self) {
        let controls = self.config.params.fit_controls();
        let mut out = Vec::new();
        for (partition, rows, spec, fit) in &self.fits {
            let mut block = PartitionInfluence {
                partition: partition.as_str().into(),
                structure: structure_name(&spec.random_factors),
                reports: Vec::new(),
                errors: Vec::new(),
                omitted: Vec::new(),
            };
            for &factor in &spec.random_factors {
                let report = match cooks_groups(rows, spec, fit, factor, &controls) {
                    Ok(r) => r,
                    Err(e) => {
                        block.errors.push(format!("{}: {e}", factor.as_str()));
                        continue;
                    }
                };
                for g in report.groups.iter().filter(|g| g.failure.is_some()) {
                    self.report.warnings.push(format!(
                        "{} / {} {}: {}",
                        partition.as_str(),
                        factor.as_str(),
                        g.group,
                        g.failure.as_deref().unwrap_or_default()
                    ));
                }
                for group in &report.flagged {
                    let kept: Vec<BehaviorRow> =
                        rows.iter().filter(|r| group_of(r, factor) != group).cloned().collect();
                    let (summary, error) = match fit_melr(&kept, spec, &controls) {
                        Ok(f) => (Some(summarize_fit(&f)), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    block.omitted.push(OmittedRefit {
                        grouping: factor.as_str().into(),
                        group: group.clone(),
                        summary,
                        error,
                    });
                }
                block.reports.push(report);
            }
            out.push(block);
        }
        self.report.influence = Some(out);
    }
}

fn group_of(r: &BehaviorRow, f: RandomFactor) -> &str {
    match f {
        RandomFactor::Participant => &r.participant_id,
        RandomFactor::Intersection => &r.intersection_id,
    }
}

fn structure_name(factors: &[RandomFactor]) -> String {
    factors.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+")
}

fn fixed_factor_name(p: Partition) -> &'static str {
    match p {
        Partition::DmAll | Partition::DmNorm => "participant_type",
        Partition::All | Partition::Dm => "episode",
    }
}

fn exclusion_name(r: encounters::ExclusionReason) -> String {
    serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}
