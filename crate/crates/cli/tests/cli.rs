use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use visitlift::lift_engine::{balanced_lift, make_kernel};
use visitlift::synthgen::ScenarioSpec;
use visitlift_cli::commands::{ACTIVITY, LIFT, MATCH, MATCH_FEATURES, REPORT, SERIES};
use visitlift_cli::config::RunConfig;
use visitlift_cli::io::{read_features, read_json, read_series};
use visitlift_cli::manifest::stage_seed;
use visitlift_cli::pipeline::{table_responses, MatchRun};

fn visitlift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visitlift"))
        .current_dir(dir)
        .env_remove("VISITLIFT_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = visitlift(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn write_config(dir: &Path, cfg: &Value) {
    std::fs::write(dir.join("run.json"), cfg.to_string()).unwrap();
}

fn scenario(n: usize, seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::null(n, seed);
    spec.n_locations = 60;
    spec.base_visit_rate = 0.2;
    spec
}

#[test]
fn missing_input_exits_2_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = visitlift(tmp.path(), &["build-graph"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["exit_code"], 2);
    assert_eq!(e["error"], "missing_input");
    assert!(e["message"].as_str().unwrap().contains("locations.jsonl"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), &json!({"bootstrap": 5}));
    let out = visitlift(tmp.path(), &["--config", "run.json", "lift"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    std::fs::write(tmp.path().join("bad.json"), "{not json").unwrap();
    let out = visitlift(tmp.path(), &["--config", "bad.json", "lift"]);
    assert_eq!(out.status.code(), Some(2));

    let mut spec = scenario_json(100, 1);
    spec["exposure_fraction"] = json!(2.0);
    write_config(tmp.path(), &json!({ "synth": spec }));
    let out = visitlift(tmp.path(), &["--config", "run.json", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

fn scenario_json(n: usize, seed: u64) -> Value {
    serde_json::to_value(scenario(n, seed)).unwrap()
}

#[test]
fn schema_violation_exits_3_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(
        out_dir.join("locations.jsonl"),
        "{\"pid\":\"a\",\"lat\":40.0,\"lon\":-74.0}\n{\"pid\":\"b\",\"lat\":\"north\"}\n",
    )
    .unwrap();
    let out = visitlift(tmp.path(), &["build-graph"]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["error"], "schema");
    assert!(e["message"].as_str().unwrap().contains(":2"), "{e}");
}

/// Runs the pipeline up to `features` in `dir`.
fn prepare(dir: &Path, cfg: Value) {
    write_config(dir, &cfg);
    for stage in ["synth", "build-graph", "visits", "features"] {
        ok(dir, &["--config", "run.json", stage]);
    }
}

#[test]
fn exact_score_clusters_on_continuous_scores_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path(), json!({"seed": 2, "synth": scenario_json(600, 2)}));
    let out = visitlift(tmp.path(), &["--config", "run.json", "match", "--exact"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "degenerate");
}

#[test]
fn null_pipeline_reports_no_lift() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, &json!({"seed": 21, "bootstrap": 300, "synth": scenario_json(6_000, 21)}));
    for stage in ["synth", "build-graph", "visits", "lift", "report"] {
        ok(dir, &["--config", "run.json", stage]);
    }
    let report: Value = read_json(&dir.join("out").join(REPORT)).unwrap();
    let general = &report["lift"]["general"];
    let boot = &general["bootstrap"];
    let lift = general["lift"].as_f64().unwrap();
    let sigma = boot["sigma_mu"].as_f64().unwrap();
    assert!(lift.abs() < 3.0 * sigma, "lift {lift} sigma {sigma}");
    assert!(boot["p_zero"].as_f64().unwrap() > 0.05, "{boot}");
    assert_eq!(report["ground_truth"]["extra_visit_pct"], 0.0);
    assert!(dir.join("out/report_epochs.csv").exists());
}

#[test]
fn balanced_match_then_lift_equals_library_call() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut spec = scenario(5_000, 8);
    spec.injected_lift = 1.4;
    prepare(dir, json!({"seed": 8, "bootstrap": 200, "synth": spec}));
    ok(dir, &["--config", "run.json", "match", "--method", "sort", "--balanced"]);
    ok(dir, &["--config", "run.json", "lift"]);

    let out = dir.join("out");
    let cfg = RunConfig::load(&dir.join("run.json")).unwrap();
    let table = read_features(&out.join(MATCH_FEATURES)).unwrap();
    let series = read_series(&out.join(SERIES), &out.join(ACTIVITY), cfg.flight_window().unwrap()).unwrap();
    let responses = table_responses(&table, &series, &make_kernel(cfg.kernel_m).unwrap()).unwrap();
    let run: MatchRun = read_json(&out.join(MATCH)).unwrap();
    let (mut e, mut c) = (Vec::new(), Vec::new());
    for i in run.result.retained() {
        if table.exposed[i] {
            e.push(responses[i]);
        } else {
            c.push(responses[i]);
        }
    }
    assert_eq!(e.len(), c.len());
    let direct = balanced_lift(&e, &c, stage_seed(8, "lift")).unwrap();

    let lift: Value = read_json(&out.join(LIFT)).unwrap();
    let reported = &lift["balanced"]["result"];
    assert_eq!(reported["lift"].as_f64().unwrap(), direct.lift);
    assert_eq!(reported["sd"].as_f64().unwrap(), direct.sd);
    assert_eq!(reported["n_pairs"].as_u64().unwrap() as usize, direct.n_pairs);
    assert!(lift["matched"]["lift"].is_f64());
}

#[test]
fn rerunning_a_stage_is_byte_identical_and_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, json!({"seed": 4, "bootstrap": 100, "synth": scenario_json(1_500, 4)}));
    ok(dir, &["--config", "run.json", "match", "--adaptive"]);
    ok(dir, &["--config", "run.json", "lift"]);
    let first = std::fs::read(dir.join("out").join(LIFT)).unwrap();
    ok(dir, &["--config", "run.json", "lift"]);
    assert_eq!(first, std::fs::read(dir.join("out").join(LIFT)).unwrap());

    let manifest: Value = read_json(&dir.join("out/manifest_lift.json")).unwrap();
    assert_eq!(manifest["stage"], "lift");
    assert_eq!(manifest["seed"], 4);
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with(MATCH)));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
    assert!(manifest["outputs"].as_object().unwrap().keys().any(|k| k.ends_with(LIFT)));
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, &json!({"seed": 1, "synth": scenario_json(300, 1)}));
    ok(dir, &["--config", "run.json", "--out", "elsewhere", "synth", "--devices", "123", "--lift", "1.3"]);
    let gt: Value = read_json(&dir.join("elsewhere/ground_truth.json")).unwrap();
    assert_eq!(gt["n_devices"], 123);
    assert_eq!(gt["injected_lift"], 1.3);
    assert!(!dir.join("out").exists());
}
