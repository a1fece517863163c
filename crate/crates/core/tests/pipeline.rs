use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use glycodrive::pipeline::{
    render_human, render_structured, run_pipeline, ConfigError, PipelineConfig, PipelineError, RunReport, Stage,
};
use glycodrive::synth;
use serde_json::Value;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn bundled(out: &Path) -> PipelineConfig {
    PipelineConfig::load(&data_dir().join("config.toml")).unwrap().with_output_dir(out)
}

/// Integers must match exactly, floats to 1e-6, everything else verbatim.
fn assert_close(path: &str, got: &Value, want: &Value) {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) if a.is_f64() || b.is_f64() => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{path}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{path}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_close(&format!("{path}[{i}]"), x, y);
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let mut ka: Vec<_> = a.keys().collect();
            let mut kb: Vec<_> = b.keys().collect();
            ka.sort();
            kb.sort();
            assert_eq!(ka, kb, "{path}: keys");
            for k in ka {
                assert_close(&format!("{path}.{k}"), &a[k], &b[k]);
            }
        }
        _ => assert_eq!(got, want, "{path}"),
    }
}

#[test]
fn bundled_run_matches_golden() {
    let out = tempfile::tempdir().unwrap();
    let report = run_pipeline(&bundled(out.path())).unwrap();
    assert!(report.ledger_balanced());
    let got: Value = serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    let want: Value =
        serde_json::from_str(&fs::read_to_string(data_dir().join("golden/report.json")).unwrap()).unwrap();
    assert_close("report", &got, &want);
    let text = fs::read_to_string(out.path().join("report.txt")).unwrap();
    assert_eq!(text, fs::read_to_string(data_dir().join("golden/report.txt")).unwrap());
    for f in ["intersections.csv", "cgm_removals.csv", "encounters.csv", "timings.json"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn every_model_block_reports_logistic_residual() {
    let out = tempfile::tempdir().unwrap();
    let report = run_pipeline(&bundled(out.path())).unwrap();
    let models = report.models.as_ref().unwrap();
    let mut seen = 0;
    for m in models {
        for f in &m.fits {
            if let Some(s) = &f.summary {
                assert!((s.sigma2_residual - 3.29).abs() < 0.005);
                seen += 1;
            }
        }
    }
    assert!(seen >= 4);
    let text = render_human(&report);
    assert_eq!(text.matches("σ²").count(), text.matches("Random Effects").count());
    assert!(text.lines().filter(|l| l.trim_start().starts_with("σ²")).all(|l| l.trim_end().ends_with("3.29")));
}

#[test]
fn structured_and_human_reports_agree() {
    let out = tempfile::tempdir().unwrap();
    let report = run_pipeline(&bundled(out.path())).unwrap();
    let json: Value = serde_json::from_str(&render_structured(&report)).unwrap();
    let text = render_human(&report);
    let e = &json["encounters"];
    assert!(
        text.contains(&format!("emitted {}, annotated {}, selected {}", e["emitted"], e["annotated"], e["selected"]))
    );
    for m in json["models"].as_array().unwrap() {
        for f in m["fits"].as_array().unwrap() {
            if let Some(n) = f["summary"]["n_obs"].as_u64() {
                assert!(text.contains(&format!("Observations             {n}")));
            }
        }
        if let Some(w) = m["winner"].as_str() {
            assert!(text.contains(&format!("Selected structure: {w}")));
        }
    }
    assert_eq!(json["ledger"].as_array().unwrap().len(), text.lines().filter(|l| l.ends_with("  ok")).count());
}

#[test]
fn stage_selection_gates_outputs() {
    let out = tempfile::tempdir().unwrap();
    let config = bundled(out.path()).with_stages(vec![Stage::Cgm]);
    let report = run_pipeline(&config).unwrap();
    assert_eq!(report.stages, vec!["cgm"]);
    assert!(report.cgm.is_some());
    assert!(report.intersections.is_none() && report.fusion.is_none() && report.models.is_none());
    assert!(out.path().join("cgm_removals.csv").is_file());
    assert!(!out.path().join("encounters.csv").exists());
    assert!(!out.path().join("intersections.csv").exists());

    let out = tempfile::tempdir().unwrap();
    let report = run_pipeline(&bundled(out.path()).with_stages(vec![Stage::Encounters])).unwrap();
    assert_eq!(report.stages, vec!["intersections", "cgm", "fusion", "encounters"]);
    assert!(report.models.is_none());
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_corpus(&synth::generate(1), dir.path()).unwrap();
    fs::remove_file(dir.path().join("telemetry.csv")).unwrap();
    let config = PipelineConfig::load(&dir.path().join("config.toml")).unwrap();
    match run_pipeline(&config) {
        Err(PipelineError::Config(ConfigError::MissingPath { name, .. })) => assert_eq!(name, "telemetry"),
        other => panic!("expected a missing-path error, got {other:?}"),
    }
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn empty_report_renders_both_formats() {
    let r = RunReport::empty();
    let v: Value = serde_json::from_str(&render_structured(&r)).unwrap();
    assert_eq!(v["ledger"], Value::Array(vec![]));
    assert!(render_human(&r).contains("[ledger]"));
}

#[test]
fn synthetic_behaviors_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth::generate(7);
    synth::write_corpus(&corpus, dir.path()).unwrap();
    let config = PipelineConfig::load(&dir.path().join("config.toml")).unwrap().with_stages(vec![Stage::Encounters]);
    run_pipeline(&config).unwrap();
    let mut rdr = csv::Reader::from_path(config.output_dir.join("encounters.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (drive, ts, behavior) = (col("drive_id"), col("timestamp"), col("behavior"));
    let found: HashMap<(String, i64), String> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            ((r[drive].to_string(), r[ts].parse().unwrap()), r[behavior].to_string())
        })
        .collect();
    let scanned: std::collections::BTreeSet<&str> = found.keys().map(|(d, _)| d.as_str()).collect();
    let (mut matched, mut agree, mut total) = (0, 0, 0);
    for p in corpus.passes.iter().filter(|p| scanned.contains(p.drive_id.as_str())) {
        total += 1;
        // nearest approach is to the clustered sign position, a few metres off the node
        let hit = (0..=6).flat_map(|k| [k, -k]).find_map(|dt| found.get(&(p.drive_id.clone(), p.timestamp + dt)));
        if let Some(b) = hit {
            matched += 1;
            if b == p.behavior.as_str() {
                agree += 1;
            }
        }
    }
    assert!(total > 50);
    assert!(matched as f64 >= 0.95 * total as f64, "{matched}/{total} passes found");
    assert!(agree as f64 >= 0.95 * matched as f64, "{agree}/{matched} behaviors agree");
}
