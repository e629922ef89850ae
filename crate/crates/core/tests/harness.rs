mod common;

use std::path::Path;
use std::process::Command;

use aoi_core::aggregator::Policy;
use aoi_core::harness::{parse_scenario, run_experiment, write_run_outputs, ForecastSource, Scenario};
use aoi_core::metrics::read_report_csv;

use common::*;

fn short_default(duration_ms: f64) -> String {
    let text = std::fs::read_to_string(scenario_path("default.toml")).unwrap();
    let mut s = Scenario::from_toml(&text).unwrap();
    s.duration_ms = duration_ms;
    s.name = "short".into();
    s.to_toml().unwrap()
}

fn files_equal(a: &Path, b: &Path) {
    let x = std::fs::read(a).unwrap();
    let y = std::fs::read(b).unwrap();
    assert!(x == y, "{} differs from {}", a.display(), b.display());
}

#[test]
fn run_outputs_are_byte_identical_per_seed() {
    let sc = Scenario::from_toml(&short_default(20_000.0)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        let (stream, exp) = run_experiment(&sc, Policy::Predictive, 4, Some(&ForecastSource::Oracle)).unwrap();
        write_run_outputs(
            &tmp.path().join(dir),
            &stream,
            &exp.outcome,
            &exp.report,
            "2026-01-01T00:00:00Z",
        )
        .unwrap();
    }
    for f in ["trace.csv", "events.csv", "report.csv"] {
        files_equal(&tmp.path().join("a").join(f), &tmp.path().join("b").join(f));
    }
    let rows = read_report_csv(std::fs::File::open(tmp.path().join("a/report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 60);
}

#[test]
fn bundled_scenarios_parse() {
    for name in ["default.toml", "walkthrough.toml"] {
        parse_scenario(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

fn cli(root: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aoi-sim"));
    c.env("AOI_OUTPUT_ROOT", root).env("SOURCE_DATE_EPOCH", "0");
    c
}

#[test]
fn simulate_writes_trace_events_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(tmp.path())
        .args(["simulate", "--scenario"])
        .arg(scenario_path("walkthrough.toml"))
        .args(["--policy", "stop-n-wait", "--seed", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("walkthrough/stop-n-wait-seed1");
    let events = std::fs::read_to_string(dir.join("events.csv")).unwrap();
    assert_eq!(events.lines().next(), Some("cycle,node,action,segment,offset,wait_ms"));
    assert!(events.contains(",late,"));
    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("# generated 1970-01-01T00:00:00Z"));
    assert!(report.lines().nth(1).unwrap().starts_with("policy,"));
    assert!(dir.join("trace.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cli(tmp.path())
        .args(["simulate", "--scenario", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "q = 3.0\nunknown_key = 1\n").unwrap();
    let out = cli(tmp.path())
        .args(["simulate", "--scenario"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = cli(tmp.path()).args(["sweep", "--policies", "lifo"]).output().unwrap();
    assert!(!out.status.success());
    let out = cli(tmp.path())
        .args(["plot", "--in"])
        .arg(tmp.path().join("empty"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn sweep_then_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("short.toml");
    std::fs::write(&sc, short_default(30_000.0)).unwrap();
    let out = cli(tmp.path())
        .args(["sweep", "--scenario"])
        .arg(&sc)
        .args(["--speeds", "15,30", "--seeds", "1..2", "--oracle"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("short/sweep");
    let cmp = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("# generated 1970-01-01T00:00:00Z\n"));
    assert_eq!(cmp.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 4);

    let out = cli(tmp.path()).args(["plot", "--in"]).arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "dssr_vs_speed.svg",
        "latency_vs_speed.svg",
        "latency_breakdown.svg",
        "latency_timeline.svg",
    ] {
        let svg = std::fs::read_to_string(dir.join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
    }
}

#[test]
fn train_writes_versioned_models() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("short.toml");
    std::fs::write(&sc, short_default(120_000.0)).unwrap();
    let out = cli(tmp.path())
        .args(["train", "--scenario"])
        .arg(&sc)
        .args(["--model", "linear"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("models/short");
    let models: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "model"))
        .collect();
    assert_eq!(models.len(), 2, "{models:?}");
    for m in models {
        let bytes = std::fs::read(&m).unwrap();
        let back = aoi_core::predictor::read_model(bytes.as_slice()).unwrap();
        assert_eq!(back.kind, aoi_core::predictor::PredictorKind::Linear);
    }
}
