//! CSV loaders and writers for the four input families: 1 Hz telemetry, CGM
//! readings, object detections and the auxiliary tables (intersection
//! database, encounter annotations, participant roster).
//!
//! Every file is UTF-8 CSV with a header row. Timestamps may be integer epoch
//! seconds or ISO-8601 (with offset, or naive and read as UTC); they are
//! normalized to integer seconds. Missing optional fields are empty strings.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

pub const TELEMETRY_COLUMNS: &[&str] = &["timestamp", "participant_id", "drive_id", "lat", "lon", "speed", "heading"];
pub const CGM_COLUMNS: &[&str] = &["timestamp", "participant_id", "glucose"];
pub const DETECTION_COLUMNS: &[&str] =
    &["timestamp", "participant_id", "drive_id", "lat", "lon", "class_label", "confidence"];
pub const INTERSECTION_COLUMNS: &[&str] = &["id", "lat", "lon", "control_type"];
pub const ANNOTATION_COLUMNS: &[&str] =
    &["drive_id", "encounter", "lead_vehicle", "crossing_vehicle", "crossing_pedestrian", "is_primary_driver"];
pub const ROSTER_COLUMNS: &[&str] = &["participant_id", "participant_type"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: cannot read: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: {message}")]
    MalformedRow { path: PathBuf, row: usize, message: String },
    #[error("drive `{drive_id}`: timestamps do not form one increasing series ({detail})")]
    NonMonotonicTime { drive_id: String, detail: String },
    #[error("{path}: row {row}: glucose {value} is not positive")]
    NonPositiveGlucose { path: PathBuf, row: usize, value: f64 },
    #[error("{path}: row {row}: unknown class label `{label}`")]
    UnknownClassLabel { path: PathBuf, row: usize, label: String },
    #[error("annotation ({drive_id}, {encounter}) references no telemetry drive")]
    DanglingAnnotationKey { drive_id: String, encounter: u32 },
    #[error("{path}: row {row}: duplicate annotation key ({drive_id}, {encounter})")]
    DuplicateAnnotation { path: PathBuf, row: usize, drive_id: String, encounter: u32 },
    #[error("participant `{0}` appears in telemetry but not in the roster")]
    UnrosteredParticipant(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Where a record came from: file and 1-based data row (header excluded).
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub source: Arc<str>,
    pub row: usize,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.row)
    }
}

#[derive(Debug, Clone)]
pub struct TelemetrySample {
    pub timestamp: i64,
    pub participant_id: String,
    pub drive_id: String,
    pub lat: f64,
    pub lon: f64,
    /// m/s
    pub speed: f64,
    pub heading: Option<f64>,
    pub origin: Provenance,
}

impl TelemetrySample {
    pub fn position(&self) -> GeoPoint {
        GeoPoint { lat: self.lat, lon: self.lon }
    }

    /// Field-wise equality ignoring provenance.
    pub fn same_fields(&self, other: &Self) -> bool {
        self.timestamp == other.timestamp
            && self.participant_id == other.participant_id
            && self.drive_id == other.drive_id
            && self.lat == other.lat
            && self.lon == other.lon
            && self.speed == other.speed
            && self.heading == other.heading
    }
}

/// All samples of one drive, time-ordered.
#[derive(Debug, Clone)]
pub struct Drive {
    pub participant_id: String,
    pub drive_id: String,
    pub samples: Vec<TelemetrySample>,
}

#[derive(Debug, Clone)]
pub struct TelemetryLoad {
    /// Sorted by (participant_id, drive_id).
    pub drives: Vec<Drive>,
    pub duplicates_dropped: usize,
}

impl TelemetryLoad {
    pub fn sample_count(&self) -> usize {
        self.drives.iter().map(|d| d.samples.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GlucoseReading {
    pub timestamp: i64,
    pub participant_id: String,
    /// mg/dL
    pub glucose: f64,
    pub origin: Provenance,
}

impl GlucoseReading {
    pub fn new(participant_id: &str, timestamp: i64, glucose: f64) -> Self {
        Self { timestamp, participant_id: participant_id.to_string(), glucose, origin: Provenance::default() }
    }

    pub fn same_fields(&self, other: &Self) -> bool {
        self.timestamp == other.timestamp
            && self.participant_id == other.participant_id
            && self.glucose == other.glucose
    }
}

/// Detector output vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    StopSign,
    TrafficLight,
    TrafficSign,
    Pedestrian,
    Vehicle,
    Bus,
    Bicycle,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::StopSign => "stop_sign",
            ClassLabel::TrafficLight => "traffic_light",
            ClassLabel::TrafficSign => "traffic_sign",
            ClassLabel::Pedestrian => "pedestrian",
            ClassLabel::Vehicle => "vehicle",
            ClassLabel::Bus => "bus",
            ClassLabel::Bicycle => "bicycle",
        }
    }
}

impl FromStr for ClassLabel {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "stop_sign" => ClassLabel::StopSign,
            "traffic_light" => ClassLabel::TrafficLight,
            "traffic_sign" => ClassLabel::TrafficSign,
            "pedestrian" => ClassLabel::Pedestrian,
            "vehicle" => ClassLabel::Vehicle,
            "bus" => ClassLabel::Bus,
            "bicycle" => ClassLabel::Bicycle,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub timestamp: i64,
    pub participant_id: String,
    pub drive_id: String,
    pub lat: f64,
    pub lon: f64,
    pub class_label: ClassLabel,
    pub confidence: f64,
    pub origin: Provenance,
}

impl DetectionRecord {
    pub fn position(&self) -> GeoPoint {
        GeoPoint { lat: self.lat, lon: self.lon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlType {
    AllWay,
    MinorRoadOnly,
    Unknown,
}

impl ControlType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlType::AllWay => "all_way",
            ControlType::MinorRoadOnly => "minor_road_only",
            ControlType::Unknown => "unknown",
        }
    }
}

impl FromStr for ControlType {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "all_way" => Ok(ControlType::AllWay),
            "minor_road_only" => Ok(ControlType::MinorRoadOnly),
            "unknown" | "" => Ok(ControlType::Unknown),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbIntersection {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub control_type: ControlType,
}

/// Presence of a potentially confounding road user during an encounter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    #[default]
    None,
    PresentWithEffect,
    PresentWithoutEffect,
}

impl Presence {
    pub fn as_str(&self) -> &'static str {
        match self {
            Presence::None => "none",
            Presence::PresentWithEffect => "present_with_effect",
            Presence::PresentWithoutEffect => "present_without_effect",
        }
    }
}

impl FromStr for Presence {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "none" => Ok(Presence::None),
            "present_with_effect" => Ok(Presence::PresentWithEffect),
            "present_without_effect" => Ok(Presence::PresentWithoutEffect),
            _ => Err(()),
        }
    }
}

/// Selection variables for one encounter. The default (nothing present,
/// primary driver at the wheel) selects the encounter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncounterFlags {
    pub lead_vehicle: Presence,
    pub crossing_vehicle: Presence,
    pub crossing_pedestrian: Presence,
    pub is_primary_driver: bool,
}

impl Default for EncounterFlags {
    fn default() -> Self {
        Self {
            lead_vehicle: Presence::None,
            crossing_vehicle: Presence::None,
            crossing_pedestrian: Presence::None,
            is_primary_driver: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipantType {
    Control,
    T1dm,
}

impl ParticipantType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParticipantType::Control => "control",
            ParticipantType::T1dm => "t1dm",
        }
    }
}

impl FromStr for ParticipantType {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "control" => Ok(ParticipantType::Control),
            "t1dm" => Ok(ParticipantType::T1dm),
            _ => Err(()),
        }
    }
}

/// Encounter annotations keyed by (drive_id, 1-based encounter ordinal within the drive).
pub type AnnotationTable = BTreeMap<(String, u32), EncounterFlags>;

#[derive(Debug, Clone, Default)]
pub struct AuxTables {
    pub intersection_db: Vec<DbIntersection>,
    pub encounter_annotations: AnnotationTable,
    pub participant_roster: BTreeMap<String, ParticipantType>,
}

#[derive(Debug, Clone)]
pub struct DetectionLoad {
    /// Every parsed record, in (participant, drive, timestamp) order.
    pub records: Vec<DetectionRecord>,
}

impl DetectionLoad {
    /// Records that feed intersection clustering.
    pub fn stop_signs(&self) -> Vec<DetectionRecord> {
        self.records.iter().filter(|r| r.class_label == ClassLabel::StopSign).cloned().collect()
    }

    /// Count of records carried through without clustering.
    pub fn pass_through_count(&self) -> usize {
        self.records.iter().filter(|r| r.class_label != ClassLabel::StopSign).count()
    }
}

// ---------------------------------------------------------------------------
// parsing helpers

struct Table {
    path: PathBuf,
    source: Arc<str>,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path, required: &[&str]) -> Result<Self, IngestError> {
        let file = std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
        Self::from_reader(file, path, required)
    }

    fn from_reader<R: Read>(reader: R, path: &Path, required: &[&str]) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let columns: HashMap<String, usize> =
            headers.iter().enumerate().map(|(i, h)| (h.trim_start_matches('\u{feff}').to_string(), i)).collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(IngestError::MissingColumn { path: path.to_path_buf(), column: col.to_string() });
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| IngestError::MalformedRow {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })?;
            rows.push(rec);
        }
        Ok(Self { path: path.to_path_buf(), source: Arc::from(path.display().to_string()), columns, rows })
    }

    fn field<'r>(&self, rec: &'r csv::StringRecord, col: &str) -> &'r str {
        self.columns.get(col).and_then(|&i| rec.get(i)).unwrap_or("")
    }

    fn malformed(&self, row: usize, message: impl Into<String>) -> IngestError {
        IngestError::MalformedRow { path: self.path.clone(), row, message: message.into() }
    }

    fn provenance(&self, row: usize) -> Provenance {
        Provenance { source: self.source.clone(), row }
    }

    fn text(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<String, IngestError> {
        let v = self.field(rec, col);
        if v.is_empty() {
            return Err(self.malformed(row, format!("empty `{col}`")));
        }
        Ok(v.to_string())
    }

    fn real(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<f64, IngestError> {
        let v = self.field(rec, col);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.malformed(row, format!("`{col}` is not a finite number: {v:?}"))),
        }
    }

    fn time(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<i64, IngestError> {
        let v = self.field(rec, col);
        parse_timestamp(v).ok_or_else(|| self.malformed(row, format!("`{col}` is not a timestamp: {v:?}")))
    }

    fn coords(&self, rec: &csv::StringRecord, row: usize) -> Result<(f64, f64), IngestError> {
        let lat = self.real(rec, row, "lat")?;
        let lon = self.real(rec, row, "lon")?;
        GeoPoint::new(lat, lon).map_err(|e| self.malformed(row, e.to_string()))?;
        Ok((lat, lon))
    }

    fn parse_enum<T: FromStr>(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<T, IngestError> {
        let v = self.field(rec, col);
        v.parse::<T>().map_err(|_| self.malformed(row, format!("`{col}` has unrecognized value {v:?}")))
    }
}

/// Integer epoch seconds, RFC 3339, or a naive `YYYY-MM-DD[T ]HH:MM:SS` read as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(t) = s.parse::<i64>() {
        return Some(t);
    }
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    None
}

// ---------------------------------------------------------------------------
// loaders

pub fn load_telemetry(path: &Path) -> Result<TelemetryLoad, IngestError> {
    let table = Table::read(path, &TELEMETRY_COLUMNS[..6])?;
    parse_telemetry(&table)
}

pub fn read_telemetry<R: Read>(reader: R, name: &Path) -> Result<TelemetryLoad, IngestError> {
    let table = Table::from_reader(reader, name, &TELEMETRY_COLUMNS[..6])?;
    parse_telemetry(&table)
}

fn parse_telemetry(table: &Table) -> Result<TelemetryLoad, IngestError> {
    let mut samples = Vec::with_capacity(table.rows.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let (lat, lon) = table.coords(rec, row)?;
        let speed = table.real(rec, row, "speed")?;
        if speed < 0.0 {
            return Err(table.malformed(row, format!("negative speed {speed}")));
        }
        let heading = match table.field(rec, "heading") {
            "" => None,
            h => {
                let h: f64 = h.parse().map_err(|_| table.malformed(row, format!("bad heading {h:?}")))?;
                if !(0.0..360.0).contains(&h) {
                    return Err(table.malformed(row, format!("heading {h} outside [0, 360)")));
                }
                Some(h)
            }
        };
        samples.push(TelemetrySample {
            timestamp: table.time(rec, row, "timestamp")?,
            participant_id: table.text(rec, row, "participant_id")?,
            drive_id: table.text(rec, row, "drive_id")?,
            lat,
            lon,
            speed,
            heading,
            origin: table.provenance(row),
        });
    }

    // A drive belongs to exactly one participant.
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for s in &samples {
        if let Some(prev) = owner.insert(&s.drive_id, &s.participant_id) {
            if prev != s.participant_id {
                return Err(IngestError::NonMonotonicTime {
                    drive_id: s.drive_id.clone(),
                    detail: format!("rows from participants `{prev}` and `{}`", s.participant_id),
                });
            }
        }
    }

    // Stable sort keeps file order among duplicate timestamps, so dedup keeps the first.
    samples.sort_by(|a, b| {
        (&a.participant_id, &a.drive_id, a.timestamp).cmp(&(&b.participant_id, &b.drive_id, b.timestamp))
    });
    let before = samples.len();
    samples.dedup_by(|later, earlier| later.drive_id == earlier.drive_id && later.timestamp == earlier.timestamp);
    let duplicates_dropped = before - samples.len();
    if duplicates_dropped > 0 {
        log::warn!("{}: dropped {duplicates_dropped} duplicate (drive_id, timestamp) rows", table.path.display());
    }

    let mut drives: Vec<Drive> = Vec::new();
    for s in samples {
        match drives.last_mut() {
            Some(d) if d.drive_id == s.drive_id => d.samples.push(s),
            _ => drives.push(Drive {
                participant_id: s.participant_id.clone(),
                drive_id: s.drive_id.clone(),
                samples: vec![s],
            }),
        }
    }
    Ok(TelemetryLoad { drives, duplicates_dropped })
}

/// CGM readings grouped per participant, each group time-ordered.
pub fn load_cgm(path: &Path) -> Result<BTreeMap<String, Vec<GlucoseReading>>, IngestError> {
    let table = Table::read(path, CGM_COLUMNS)?;
    parse_cgm(&table)
}

pub fn read_cgm<R: Read>(reader: R, name: &Path) -> Result<BTreeMap<String, Vec<GlucoseReading>>, IngestError> {
    let table = Table::from_reader(reader, name, CGM_COLUMNS)?;
    parse_cgm(&table)
}

fn parse_cgm(table: &Table) -> Result<BTreeMap<String, Vec<GlucoseReading>>, IngestError> {
    let mut out: BTreeMap<String, Vec<GlucoseReading>> = BTreeMap::new();
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let glucose = table.real(rec, row, "glucose")?;
        if glucose <= 0.0 {
            return Err(IngestError::NonPositiveGlucose { path: table.path.clone(), row, value: glucose });
        }
        let r = GlucoseReading {
            timestamp: table.time(rec, row, "timestamp")?,
            participant_id: table.text(rec, row, "participant_id")?,
            glucose,
            origin: table.provenance(row),
        };
        out.entry(r.participant_id.clone()).or_default().push(r);
    }
    for readings in out.values_mut() {
        readings.sort_by_key(|r| r.timestamp);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<DetectionLoad, IngestError> {
    let table = Table::read(path, DETECTION_COLUMNS)?;
    let mut records = Vec::with_capacity(table.rows.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let label = table.field(rec, "class_label");
        let class_label = label.parse::<ClassLabel>().map_err(|_| IngestError::UnknownClassLabel {
            path: table.path.clone(),
            row,
            label: label.to_string(),
        })?;
        let (lat, lon) = table.coords(rec, row)?;
        let confidence = table.real(rec, row, "confidence")?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(table.malformed(row, format!("confidence {confidence} outside [0, 1]")));
        }
        records.push(DetectionRecord {
            timestamp: table.time(rec, row, "timestamp")?,
            participant_id: table.text(rec, row, "participant_id")?,
            drive_id: table.text(rec, row, "drive_id")?,
            lat,
            lon,
            class_label,
            confidence,
            origin: table.provenance(row),
        });
    }
    records.sort_by(|a, b| {
        (&a.participant_id, &a.drive_id, a.timestamp, a.class_label)
            .cmp(&(&b.participant_id, &b.drive_id, b.timestamp, b.class_label))
            .then(a.lat.total_cmp(&b.lat))
            .then(a.lon.total_cmp(&b.lon))
    });
    Ok(DetectionLoad { records })
}

pub fn load_intersection_db(path: &Path) -> Result<Vec<DbIntersection>, IngestError> {
    let table = Table::read(path, INTERSECTION_COLUMNS)?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let (lat, lon) = table.coords(rec, row)?;
        out.push(DbIntersection {
            id: table.text(rec, row, "id")?,
            lat,
            lon,
            control_type: table.parse_enum(rec, row, "control_type")?,
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<AnnotationTable, IngestError> {
    let table = Table::read(path, ANNOTATION_COLUMNS)?;
    let mut out = AnnotationTable::new();
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let drive_id = table.text(rec, row, "drive_id")?;
        let encounter: u32 = table
            .field(rec, "encounter")
            .parse()
            .map_err(|_| table.malformed(row, "`encounter` must be a positive integer"))?;
        let is_primary_driver = match table.field(rec, "is_primary_driver") {
            "yes" => true,
            "no" => false,
            v => return Err(table.malformed(row, format!("`is_primary_driver` must be yes/no, got {v:?}"))),
        };
        let flags = EncounterFlags {
            lead_vehicle: table.parse_enum(rec, row, "lead_vehicle")?,
            crossing_vehicle: table.parse_enum(rec, row, "crossing_vehicle")?,
            crossing_pedestrian: table.parse_enum(rec, row, "crossing_pedestrian")?,
            is_primary_driver,
        };
        if out.insert((drive_id.clone(), encounter), flags).is_some() {
            return Err(IngestError::DuplicateAnnotation { path: table.path.clone(), row, drive_id, encounter });
        }
    }
    Ok(out)
}

pub fn load_roster(path: &Path) -> Result<BTreeMap<String, ParticipantType>, IngestError> {
    let table = Table::read(path, ROSTER_COLUMNS)?;
    let mut out = BTreeMap::new();
    for (i, rec) in table.rows.iter().enumerate() {
        let row = i + 1;
        let id = table.text(rec, row, "participant_id")?;
        let kind: ParticipantType = table.parse_enum(rec, row, "participant_type")?;
        if out.insert(id.clone(), kind).is_some() {
            return Err(table.malformed(row, format!("participant `{id}` listed twice")));
        }
    }
    Ok(out)
}

/// Loads detections and the auxiliary tables. A missing annotations path
/// yields an empty table; every encounter then takes the default flags.
pub fn load_aux(
    detections_path: &Path,
    intersections_path: &Path,
    annotations_path: Option<&Path>,
    roster_path: &Path,
) -> Result<(DetectionLoad, AuxTables), IngestError> {
    let detections = load_detections(detections_path)?;
    let aux = AuxTables {
        intersection_db: load_intersection_db(intersections_path)?,
        encounter_annotations: match annotations_path {
            Some(p) => load_annotations(p)?,
            None => AnnotationTable::new(),
        },
        participant_roster: load_roster(roster_path)?,
    };
    Ok((detections, aux))
}

/// Cross-file checks: every telemetry participant is rostered and every
/// annotation names an existing drive.
pub fn cross_validate(telemetry: &TelemetryLoad, aux: &AuxTables) -> Result<(), IngestError> {
    let participants: BTreeSet<&str> = telemetry.drives.iter().map(|d| d.participant_id.as_str()).collect();
    if let Some(p) = participants.iter().find(|p| !aux.participant_roster.contains_key(**p)) {
        return Err(IngestError::UnrosteredParticipant(p.to_string()));
    }
    let drives: HashSet<&str> = telemetry.drives.iter().map(|d| d.drive_id.as_str()).collect();
    if let Some((drive_id, encounter)) = aux.encounter_annotations.keys().find(|(d, _)| !drives.contains(d.as_str())) {
        return Err(IngestError::DanglingAnnotationKey { drive_id: drive_id.clone(), encounter: *encounter });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// writers (canonical format)

fn fmt_f64(x: f64) -> String {
    // shortest representation that round-trips
    format!("{x:?}")
}

fn writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>, csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(header)?;
    Ok(wtr)
}

pub fn write_telemetry<'a, W: Write>(
    w: W,
    samples: impl IntoIterator<Item = &'a TelemetrySample>,
) -> Result<(), csv::Error> {
    let mut wtr = writer(w, TELEMETRY_COLUMNS)?;
    for s in samples {
        wtr.write_record([
            s.timestamp.to_string(),
            s.participant_id.clone(),
            s.drive_id.clone(),
            fmt_f64(s.lat),
            fmt_f64(s.lon),
            fmt_f64(s.speed),
            s.heading.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_cgm<'a, W: Write>(w: W, readings: impl IntoIterator<Item = &'a GlucoseReading>) -> Result<(), csv::Error> {
    let mut wtr = writer(w, CGM_COLUMNS)?;
    for r in readings {
        wtr.write_record([r.timestamp.to_string(), r.participant_id.clone(), fmt_f64(r.glucose)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_detections<'a, W: Write>(
    w: W,
    records: impl IntoIterator<Item = &'a DetectionRecord>,
) -> Result<(), csv::Error> {
    let mut wtr = writer(w, DETECTION_COLUMNS)?;
    for r in records {
        wtr.write_record([
            r.timestamp.to_string(),
            r.participant_id.clone(),
            r.drive_id.clone(),
            fmt_f64(r.lat),
            fmt_f64(r.lon),
            r.class_label.as_str().to_string(),
            fmt_f64(r.confidence),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_intersection_db<'a, W: Write>(
    w: W,
    rows: impl IntoIterator<Item = &'a DbIntersection>,
) -> Result<(), csv::Error> {
    let mut wtr = writer(w, INTERSECTION_COLUMNS)?;
    for r in rows {
        wtr.write_record([r.id.clone(), fmt_f64(r.lat), fmt_f64(r.lon), r.control_type.as_str().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_annotations<W: Write>(w: W, table: &AnnotationTable) -> Result<(), csv::Error> {
    let mut wtr = writer(w, ANNOTATION_COLUMNS)?;
    for ((drive, enc), f) in table {
        wtr.write_record([
            drive.as_str(),
            &enc.to_string(),
            f.lead_vehicle.as_str(),
            f.crossing_vehicle.as_str(),
            f.crossing_pedestrian.as_str(),
            if f.is_primary_driver { "yes" } else { "no" },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_roster<W: Write>(w: W, roster: &BTreeMap<String, ParticipantType>) -> Result<(), csv::Error> {
    let mut wtr = writer(w, ROSTER_COLUMNS)?;
    for (id, kind) in roster {
        wtr.write_record([id.as_str(), kind.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const TEL_HEADER: &str = "timestamp,participant_id,drive_id,lat,lon,speed,heading\n";

    #[test]
    fn empty_telemetry_is_empty() {
        let f = file_with(TEL_HEADER);
        let t = load_telemetry(f.path()).unwrap();
        assert!(t.drives.is_empty());
    }

    #[test]
    fn three_rows_one_drive() {
        let f = file_with(&format!(
            "{TEL_HEADER}3,p1,d1,41.0,-96.0,5.0,\n1,p1,d1,41.0,-96.0,4.0,90\n2,p1,d1,41.0,-96.0,4.5,\n"
        ));
        let t = load_telemetry(f.path()).unwrap();
        assert_eq!(t.drives.len(), 1);
        let ts: Vec<i64> = t.drives[0].samples.iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, vec![1, 2, 3]);
        assert_eq!(t.drives[0].samples[0].heading, Some(90.0));
        assert_eq!(t.drives[0].samples[0].origin.row, 2);
    }

    #[test]
    fn bad_latitude_names_row() {
        let f = file_with(&format!("{TEL_HEADER}1,p1,d1,41.0,-96.0,5.0,\n2,p1,d1,95.0,-96.0,5.0,\n"));
        match load_telemetry(f.path()).unwrap_err() {
            IngestError::MalformedRow { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let f = file_with("timestamp,participant_id,drive_id,lat,lon\n");
        assert!(
            matches!(load_telemetry(f.path()), Err(IngestError::MissingColumn { column, .. }) if column == "speed")
        );
    }

    #[test]
    fn duplicates_keep_first() {
        let f = file_with(&format!("{TEL_HEADER}1,p1,d1,41.0,-96.0,5.0,\n1,p1,d1,41.0,-96.0,9.0,\n"));
        let t = load_telemetry(f.path()).unwrap();
        assert_eq!(t.duplicates_dropped, 1);
        assert_eq!(t.drives[0].samples[0].speed, 5.0);
    }

    #[test]
    fn drive_shared_by_two_participants_is_rejected() {
        let f = file_with(&format!("{TEL_HEADER}1,p1,d1,41.0,-96.0,5.0,\n2,p2,d1,41.0,-96.0,5.0,\n"));
        assert!(
            matches!(load_telemetry(f.path()), Err(IngestError::NonMonotonicTime { drive_id, .. }) if drive_id == "d1")
        );
    }

    #[test]
    fn iso_timestamps_normalize() {
        assert_eq!(parse_timestamp("1970-01-01T00:01:00Z"), Some(60));
        assert_eq!(parse_timestamp("1970-01-01 00:00:05"), Some(5));
        assert_eq!(parse_timestamp("2020-01-01T00:00:00-06:00"), Some(1_577_858_400));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn cgm_examples() {
        let f = file_with("timestamp,participant_id,glucose\n");
        assert!(load_cgm(f.path()).unwrap().is_empty());
        let f = file_with("timestamp,participant_id,glucose\n600,p1,110\n300,p1,100\n");
        let m = load_cgm(f.path()).unwrap();
        let g: Vec<f64> = m["p1"].iter().map(|r| r.glucose).collect();
        assert_eq!(g, vec![100.0, 110.0]);
        let f = file_with("timestamp,participant_id,glucose\n300,p1,0\n");
        assert!(matches!(load_cgm(f.path()), Err(IngestError::NonPositiveGlucose { row: 1, .. })));
    }

    fn aux_files(
        det: &str,
        roster: &str,
    ) -> (tempfile::NamedTempFile, tempfile::NamedTempFile, tempfile::NamedTempFile) {
        (file_with(det), file_with("id,lat,lon,control_type\nia-1,41.0,-96.0,all_way\n"), file_with(roster))
    }

    #[test]
    fn detections_split_by_class() {
        let mut det = String::from("timestamp,participant_id,drive_id,lat,lon,class_label,confidence\n");
        for i in 0..5 {
            det.push_str(&format!("{i},p1,d1,41.0,-96.0,stop_sign,0.9\n"));
        }
        det.push_str("10,p1,d1,41.0,-96.0,traffic_light,0.8\n11,p1,d1,41.0,-96.0,traffic_light,0.7\n");
        let (d, i, r) = aux_files(&det, "participant_id,participant_type\np1,t1dm\n");
        let (load, aux) = load_aux(d.path(), i.path(), None, r.path()).unwrap();
        assert_eq!(load.records.len(), 7);
        assert_eq!(load.stop_signs().len(), 5);
        assert_eq!(load.pass_through_count(), 2);
        assert!(aux.encounter_annotations.is_empty());
        assert_eq!(aux.intersection_db[0].control_type, ControlType::AllWay);
    }

    #[test]
    fn unknown_label_rejected() {
        let det = "timestamp,participant_id,drive_id,lat,lon,class_label,confidence\n1,p1,d1,41,-96,giraffe,0.5\n";
        let (d, i, r) = aux_files(det, "participant_id,participant_type\n");
        assert!(matches!(load_aux(d.path(), i.path(), None, r.path()), Err(IngestError::UnknownClassLabel { .. })));
    }

    #[test]
    fn roster_must_cover_telemetry() {
        let tel = file_with(&format!("{TEL_HEADER}1,p9,d1,41.0,-96.0,5.0,\n"));
        let telemetry = load_telemetry(tel.path()).unwrap();
        let err = cross_validate(&telemetry, &AuxTables::default()).unwrap_err();
        assert!(matches!(err, IngestError::UnrosteredParticipant(p) if p == "p9"));
    }

    #[test]
    fn dangling_annotation_detected() {
        let tel = file_with(&format!("{TEL_HEADER}1,p1,d1,41.0,-96.0,5.0,\n"));
        let telemetry = load_telemetry(tel.path()).unwrap();
        let mut aux = AuxTables::default();
        aux.participant_roster.insert("p1".into(), ParticipantType::Control);
        aux.encounter_annotations.insert(("d7".into(), 1), EncounterFlags::default());
        assert!(matches!(cross_validate(&telemetry, &aux), Err(IngestError::DanglingAnnotationKey { .. })));
    }

    #[test]
    fn annotations_parse_and_reject_duplicates() {
        let f = file_with(&format!(
            "{}\nd1,1,none,present_with_effect,none,yes\nd1,2,none,none,present_without_effect,no\n",
            ANNOTATION_COLUMNS.join(",")
        ));
        let t = load_annotations(f.path()).unwrap();
        assert_eq!(t[&("d1".to_string(), 1)].crossing_vehicle, Presence::PresentWithEffect);
        assert!(!t[&("d1".to_string(), 2)].is_primary_driver);
        let f =
            file_with(&format!("{}\nd1,1,none,none,none,yes\nd1,1,none,none,none,no\n", ANNOTATION_COLUMNS.join(",")));
        assert!(matches!(load_annotations(f.path()), Err(IngestError::DuplicateAnnotation { .. })));
    }
}
