//! Deterministic synthetic corpora: a small stop-controlled street grid,
//! simulated 1 Hz drives with planted stop behavior, matching CGM series,
//! detector logs and the auxiliary tables.
//!
//! ```
//! let a = glycodrive::synth::generate(7);
//! let b = glycodrive::synth::generate(7);
//! assert_eq!(a.telemetry.len(), b.telemetry.len());
//! assert_eq!(a.participants.len(), 3);
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encounters::StopBehavior;
use crate::geo::{from_local, GeoPoint, LocalPoint};
use crate::ingest::{
    self, AnnotationTable, ClassLabel, ControlType, DbIntersection, DetectionRecord, EncounterFlags, GlucoseReading,
    ParticipantType, Presence, Provenance, TelemetrySample,
};

pub const GRID_ROWS: usize = 3;
pub const GRID_COLS: usize = 4;
pub const SPACING_M: f64 = 400.0;
pub const ORIGIN: GeoPoint = GeoPoint { lat: 41.66, lon: -91.53 };
const BASE_EPOCH: i64 = 1_700_000_000;
const CRUISE: f64 = 12.0;
const DECEL: f64 = 1.5;
const ACCEL: f64 = 2.0;

/// Ground truth for one simulated pass through an intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct PassTruth {
    pub drive_id: String,
    pub intersection: usize,
    pub timestamp: i64,
    pub behavior: StopBehavior,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub telemetry: Vec<TelemetrySample>,
    pub cgm: Vec<GlucoseReading>,
    pub detections: Vec<DetectionRecord>,
    pub intersection_db: Vec<DbIntersection>,
    pub annotations: AnnotationTable,
    pub participants: BTreeMap<String, ParticipantType>,
    /// True node positions, row-major over the grid.
    pub nodes: Vec<GeoPoint>,
    pub passes: Vec<PassTruth>,
}

/// Glucose level held over each drive, mg/dL.
const P01_LEVELS: [f64; 4] = [58.0, 118.0, 232.0, 338.0];
const P02_LEVELS: [f64; 4] = [335.0, 122.0, 60.0, 112.0];

fn participant_effect(id: &str) -> f64 {
    match id {
        "p01" => 0.35,
        "p02" => -0.3,
        _ => -0.1,
    }
}

fn episode_effect(glucose: Option<f64>) -> f64 {
    match glucose {
        None => 0.0,
        Some(g) if g <= 70.0 => 0.9,
        Some(g) if g < 180.0 => 0.0,
        Some(g) if g < 300.0 => 0.3,
        Some(_) => 1.0,
    }
}

fn node_local(k: usize) -> (f64, f64) {
    ((k % GRID_COLS) as f64 * SPACING_M, (k / GRID_COLS) as f64 * SPACING_M)
}

fn to_geo(x: f64, y: f64) -> GeoPoint {
    from_local(&LocalPoint::new(x, y, ORIGIN))
}

fn neighbors(k: usize) -> Vec<usize> {
    let (r, c) = (k / GRID_COLS, k % GRID_COLS);
    let mut out = Vec::new();
    if r > 0 {
        out.push(k - GRID_COLS);
    }
    if r + 1 < GRID_ROWS {
        out.push(k + GRID_COLS);
    }
    if c > 0 {
        out.push(k - 1);
    }
    if c + 1 < GRID_COLS {
        out.push(k + 1);
    }
    out
}

struct DrivePlan {
    participant: &'static str,
    drive_id: String,
    start: i64,
    glucose: Option<f64>,
    /// Seconds after `start` over which CGM is absent.
    cgm_gap: Option<(i64, i64)>,
}

fn plans() -> Vec<DrivePlan> {
    let mut out = Vec::new();
    let mut n = 0;
    for (day, (pid, levels)) in
        [("p01", Some(P01_LEVELS)), ("p02", Some(P02_LEVELS)), ("c01", None)].into_iter().enumerate()
    {
        for k in 0..4 {
            n += 1;
            out.push(DrivePlan {
                participant: pid,
                drive_id: format!("d{n:02}"),
                start: BASE_EPOCH + day as i64 * 86_400 + k as i64 * 5_400,
                glucose: levels.map(|l| l[k]),
                cgm_gap: (pid == "p02" && k == 3).then_some((60, 1_200)),
            });
        }
    }
    out
}

/// Generates the corpus for `seed`.
pub fn generate(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("valid sd");
    let n_nodes = GRID_ROWS * GRID_COLS;
    let nodes: Vec<GeoPoint> = (0..n_nodes)
        .map(|k| {
            let (x, y) = node_local(k);
            to_geo(x, y)
        })
        .collect();
    let node_effect: Vec<f64> = {
        let d = Normal::new(0.0, 0.7).expect("valid sd");
        (0..n_nodes).map(|_| d.sample(&mut rng)).collect()
    };
    // each sign sits at a corner 8 m from the center
    let sign_offset: Vec<(f64, f64)> = (0..n_nodes)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (8.0 * a.cos(), 8.0 * a.sin())
        })
        .collect();

    let mut telemetry = Vec::new();
    let mut detections = Vec::new();
    let mut passes = Vec::new();
    let mut cgm = Vec::new();
    let plans = plans();

    for plan in &plans {
        // route: mid-edge start, eleven intersections, mid-edge end
        let mut prev = rng.gen_range(0..n_nodes);
        let nb = neighbors(prev);
        let mut cur = nb[rng.gen_range(0..nb.len())];
        let mut route = vec![prev, cur];
        for _ in 0..11 {
            let options: Vec<usize> = neighbors(cur).into_iter().filter(|&n| n != prev).collect();
            let next = options[rng.gen_range(0..options.len())];
            prev = cur;
            cur = next;
            route.push(cur);
        }
        let waypoints: Vec<(f64, f64)> = route.iter().map(|&k| node_local(k)).collect();
        let mut path: Vec<(f64, f64)> = Vec::new();
        let (a, b) = (waypoints[0], waypoints[1]);
        path.push(((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0));
        path.extend(&waypoints[1..waypoints.len() - 1]);
        let (a, b) = (waypoints[waypoints.len() - 2], waypoints[waypoints.len() - 1]);
        path.push(((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0));
        let mut cum = vec![0.0];
        for w in path.windows(2) {
            cum.push(cum.last().unwrap() + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
        }
        let total = *cum.last().unwrap();

        // planted behavior per interior node
        let behaviors: Vec<StopBehavior> = (1..path.len() - 1)
            .map(|i| {
                let eta =
                    0.1 + participant_effect(plan.participant) + node_effect[route[i]] + episode_effect(plan.glucose);
                let p = 1.0 / (1.0 + (-eta).exp());
                if rng.gen::<f64>() >= p {
                    StopBehavior::Full
                } else if rng.gen::<f64>() < 0.7 {
                    StopBehavior::Rolling
                } else {
                    StopBehavior::NoStop
                }
            })
            .collect();

        // kinematics at 1 Hz
        let mut t = plan.start;
        let (mut s, mut v) = (0.0f64, CRUISE);
        let mut target = 1;
        let mut samples: Vec<(i64, f64, f64)> = Vec::new();
        let mut roll_speed = 2.5;
        while s < total {
            samples.push((t, s, v));
            if target < path.len() - 1 {
                let d = cum[target] - s;
                let beh = behaviors[target - 1];
                let mut vt = CRUISE + 0.15 * jitter.sample(&mut rng);
                match beh {
                    StopBehavior::Full => vt = vt.min((2.0 * DECEL * d.max(0.0)).sqrt()),
                    StopBehavior::Rolling => vt = vt.min((roll_speed * roll_speed + 2.0 * DECEL * d.max(0.0)).sqrt()),
                    StopBehavior::NoStop => {}
                }
                v = vt.min(v + ACCEL);
                if beh == StopBehavior::Full && d - v <= 1.0 {
                    // arrive, hold, depart
                    t += 1;
                    s = cum[target];
                    passes.push(PassTruth {
                        drive_id: plan.drive_id.clone(),
                        intersection: route[target],
                        timestamp: t,
                        behavior: beh,
                    });
                    let hold = rng.gen_range(3..7);
                    for _ in 0..hold {
                        samples.push((t, s, 0.0));
                        t += 1;
                    }
                    v = 0.0;
                    target += 1;
                    roll_speed = rng.gen_range(2.0..3.5);
                    continue;
                }
                if s + v >= cum[target] {
                    passes.push(PassTruth {
                        drive_id: plan.drive_id.clone(),
                        intersection: route[target],
                        timestamp: t + 1,
                        behavior: beh,
                    });
                    target += 1;
                    roll_speed = rng.gen_range(2.0..3.5);
                }
            } else {
                v = (CRUISE + 0.15 * jitter.sample(&mut rng)).min(v + ACCEL);
            }
            s += v;
            t += 1;
        }

        let seg_at = |s: f64| -> usize { cum.iter().rposition(|&c| c <= s).unwrap_or(0).min(path.len() - 2) };
        let local_at = |s: f64| -> (f64, f64, f64) {
            let i = seg_at(s);
            let (a, b) = (path[i], path[i + 1]);
            let len = cum[i + 1] - cum[i];
            let f = ((s - cum[i]) / len).clamp(0.0, 1.0);
            let heading = (b.0 - a.0).atan2(b.1 - a.1).to_degrees().rem_euclid(360.0);
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), heading)
        };
        for &(ts, s, v) in &samples {
            let (x, y, heading) = local_at(s);
            let p = to_geo(x + jitter.sample(&mut rng), y + jitter.sample(&mut rng));
            telemetry.push(TelemetrySample {
                timestamp: ts,
                participant_id: plan.participant.into(),
                drive_id: plan.drive_id.clone(),
                lat: p.lat,
                lon: p.lon,
                speed: (v + 0.05 * jitter.sample(&mut rng)).max(0.0),
                heading: Some(heading),
                origin: Provenance::default(),
            });
        }

        // two or three sign sightings on each pass, seconds before arrival
        for pass in passes.iter().filter(|p| p.drive_id == plan.drive_id) {
            let (nx, ny) = node_local(pass.intersection);
            let (ox, oy) = sign_offset[pass.intersection];
            for k in 0..rng.gen_range(2..4) {
                let p = to_geo(nx + ox + 3.0 * jitter.sample(&mut rng), ny + oy + 3.0 * jitter.sample(&mut rng));
                detections.push(detection(
                    plan,
                    pass.timestamp - 6 + 2 * k,
                    p,
                    ClassLabel::StopSign,
                    rng.gen_range(0.55..0.99),
                ));
            }
        }
        // pass-through classes along the route
        for _ in 0..3 {
            let &(ts, s, _) = &samples[rng.gen_range(0..samples.len())];
            let (x, y, _) = local_at(s);
            let label = if rng.gen::<bool>() { ClassLabel::Vehicle } else { ClassLabel::TrafficLight };
            detections.push(detection(plan, ts, to_geo(x + 15.0, y + 15.0), label, rng.gen_range(0.5..0.95)));
        }
    }

    // isolated false-positive stop signs, mid-block and far apart
    for k in 0..5 {
        let (x, y) = node_local(k);
        let p = to_geo(x + 200.0 + 7.0 * k as f64, y + 30.0);
        let plan = &plans[k];
        detections.push(detection(plan, plan.start + 30 + k as i64, p, ClassLabel::StopSign, 0.51));
    }

    // CGM: constant level around each drive, geometric ramps in between
    for pid in ["p01", "p02"] {
        let mine: Vec<&DrivePlan> = plans.iter().filter(|p| p.participant == pid).collect();
        let first = mine[0].start - 1_800;
        let last = mine[mine.len() - 1].start + 2_400;
        let mut t = first - first.rem_euclid(300) + 17;
        let mut planted_spike = false;
        while t <= last {
            let level = glucose_profile(&mine, t);
            let in_gap = mine.iter().any(|p| p.cgm_gap.is_some_and(|(a, b)| t >= p.start + a && t < p.start + b));
            if !in_gap {
                let mut g = level * (1.0 + 0.015 * jitter.sample(&mut rng));
                if pid == "p01" && !planted_spike && t > mine[1].start + 2_400 {
                    g *= 1.5;
                    planted_spike = true;
                }
                cgm.push(GlucoseReading {
                    timestamp: t,
                    participant_id: pid.into(),
                    glucose: (g * 10.0).round() / 10.0,
                    origin: Provenance::default(),
                });
            }
            t += 300;
        }
    }

    // clock hiccups: a few repeated telemetry rows
    for i in [100usize, 1_700, 3_300] {
        if i < telemetry.len() {
            let dup = telemetry[i].clone();
            telemetry.insert(i + 1, dup);
        }
    }

    let intersection_db = [0usize, 2, 3, 5, 6, 9, 11]
        .iter()
        .map(|&k| DbIntersection {
            id: format!("int-{:02}", k + 1),
            lat: nodes[k].lat,
            lon: nodes[k].lon,
            control_type: if k % 2 == 0 { ControlType::AllWay } else { ControlType::MinorRoadOnly },
        })
        .collect();

    let mut annotations = AnnotationTable::new();
    let flag = |lead, cross, ped, primary| EncounterFlags {
        lead_vehicle: lead,
        crossing_vehicle: cross,
        crossing_pedestrian: ped,
        is_primary_driver: primary,
    };
    annotations.insert(("d01".into(), 2), flag(Presence::PresentWithEffect, Presence::None, Presence::None, true));
    annotations.insert(("d03".into(), 4), flag(Presence::None, Presence::PresentWithEffect, Presence::None, true));
    annotations.insert(("d06".into(), 1), flag(Presence::None, Presence::None, Presence::PresentWithoutEffect, true));
    annotations.insert(("d10".into(), 3), flag(Presence::None, Presence::None, Presence::None, false));
    annotations.insert(
        ("d11".into(), 5),
        flag(Presence::PresentWithoutEffect, Presence::None, Presence::PresentWithEffect, true),
    );

    let participants =
        [("p01", ParticipantType::T1dm), ("p02", ParticipantType::T1dm), ("c01", ParticipantType::Control)]
            .into_iter()
            .map(|(p, t)| (p.to_string(), t))
            .collect();

    Corpus { telemetry, cgm, detections, intersection_db, annotations, participants, nodes, passes }
}

fn detection(plan: &DrivePlan, t: i64, p: GeoPoint, class_label: ClassLabel, confidence: f64) -> DetectionRecord {
    DetectionRecord {
        timestamp: t,
        participant_id: plan.participant.into(),
        drive_id: plan.drive_id.clone(),
        lat: p.lat,
        lon: p.lon,
        class_label,
        confidence: (confidence * 1000.0).round() / 1000.0,
        origin: Provenance::default(),
    }
}

/// Level held from 10 min before to 15 min after each drive start, with
/// geometric interpolation between drives.
fn glucose_profile(drives: &[&DrivePlan], t: i64) -> f64 {
    let spans: Vec<(i64, i64, f64)> =
        drives.iter().map(|d| (d.start - 600, d.start + 900, d.glucose.expect("T1DM drive has a level"))).collect();
    if t <= spans[0].1 {
        return spans[0].2;
    }
    for w in spans.windows(2) {
        let ((_, e0, g0), (s1, e1, g1)) = (w[0], w[1]);
        if t <= s1 {
            let f = (t - e0) as f64 / (s1 - e0) as f64;
            return g0 * (g1 / g0).powf(f);
        }
        if t <= e1 {
            return g1;
        }
    }
    spans[spans.len() - 1].2
}

pub const CONFIG_TOML: &str = r#"output_dir = "out"
stages = ["intersections", "cgm", "fusion", "encounters", "models", "influence"]

[inputs]
telemetry = "telemetry.csv"
cgm = "cgm.csv"
detections = "detections.csv"
intersections = "intersections.csv"
annotations = "annotations.csv"
roster = "roster.csv"

[params]
eps = 50.0
min_pts = 5
merge_radius = 25.0
staleness = 360
discard_threshold = 0.05
capture_radius = 25.0
refractory_s = 60
v_stop_eps = 0.5
min_stop_s = 2.0
no_stop_ratio = 0.9
glmm_tol = 1e-4
glmm_max_iter = 4000
"#;

fn csv_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

/// Writes the six input files and `config.toml` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let open = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
    ingest::write_telemetry(open("telemetry.csv")?, &corpus.telemetry).map_err(csv_io)?;
    ingest::write_cgm(open("cgm.csv")?, &corpus.cgm).map_err(csv_io)?;
    ingest::write_detections(open("detections.csv")?, &corpus.detections).map_err(csv_io)?;
    ingest::write_intersection_db(open("intersections.csv")?, &corpus.intersection_db).map_err(csv_io)?;
    ingest::write_annotations(open("annotations.csv")?, &corpus.annotations).map_err(csv_io)?;
    ingest::write_roster(open("roster.csv")?, &corpus.participants).map_err(csv_io)?;
    fs::write(dir.join("config.toml"), CONFIG_TOML)
}
