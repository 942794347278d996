//! One function per subcommand. Each reads its inputs (configured paths or
//! the artifacts of earlier stages in the output directory), writes its
//! artifacts and a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use visitlift::audience_profile::{derive_features, update_profile, PriorRecord, UserProfile};
use visitlift::lift_engine::{display_scale, make_kernel};
use visitlift::location_graph::{build_graph, combine, iterate, GraphSnapshot, Location, LocationGraph, PropagationInput};
use visitlift::matching::MatchMode;
use visitlift::synthgen::{GroundTruth, Scenario};
use visitlift::visit_engine::{HitDetector, Impression, Visit};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{
    read_features, read_impressions, read_json, read_jsonl, read_series, write_csv_rows, write_features, write_json,
    write_jsonl, write_series, FeatureTable,
};
use crate::manifest::{stage_seed, Manifest};
use crate::pipeline::{
    balanced_summary, build_match_table, general_lift_report, group_impressions, matched_summary, process_devices,
    run_match, table_responses, LiftOutput, MatchRun,
};

pub const LOCATIONS: &str = "locations.jsonl";
pub const IMPRESSIONS: &str = "impressions.jsonl";
pub const FEATURES: &str = "features.csv";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const GRAPH: &str = "graph.json";
pub const GRAPH_PROPAGATED: &str = "graph_propagated.json";
pub const KEYWORDS: &str = "keywords.csv";
pub const VISITS: &str = "visits.jsonl";
pub const SERIES: &str = "series.csv";
pub const ACTIVITY: &str = "activity.csv";
pub const PROFILES: &str = "profiles.jsonl";
pub const MATCH_FEATURES: &str = "match_features.csv";
pub const MATCH: &str = "match.json";
pub const LIFT: &str = "lift.json";
pub const EPOCHS: &str = "epochs.csv";
pub const REPORT: &str = "report.json";
pub const REPORT_EPOCHS: &str = "report_epochs.csv";

fn params<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("serializable parameters")
}

fn finish(mut m: Manifest, cfg: &RunConfig, outputs: &[PathBuf]) -> CliResult<()> {
    for o in outputs {
        m.output(o)?;
    }
    m.write(&cfg.paths.out_dir)
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let spec = cfg
        .synth
        .clone()
        .ok_or_else(|| CliError::Config("the synth stage needs a `synth` scenario in the configuration".into()))?;
    if spec.flight_start != cfg.flight.start || spec.flight_days != cfg.flight.days {
        log::warn!("scenario flight differs from the configured analysis flight");
    }
    let scenario = Scenario::new(spec.clone())?;
    let records = scenario.generate();
    let outputs = [
        cfg.out(LOCATIONS),
        cfg.out(IMPRESSIONS),
        cfg.out(FEATURES),
        cfg.out(GROUND_TRUTH),
    ];
    write_jsonl(&outputs[0], scenario.locations())?;
    write_jsonl(&outputs[1], records.iter().flat_map(|r| r.impressions.iter()))?;
    let table = FeatureTable {
        names: (0..spec.n_features).map(|k| format!("f{k}")).collect(),
        ids: records.iter().map(|r| r.truth.device_id.clone()).collect(),
        rows: records.iter().map(|r| r.features.clone()).collect(),
        exposed: records.iter().map(|r| r.truth.exposed).collect(),
        fts: None,
    };
    write_features(&outputs[2], &table)?;
    write_json(&outputs[3], &scenario.ground_truth(&records))?;
    finish(Manifest::new("synth", cfg.seed, params(&spec)), cfg, &outputs)
}

pub fn build_graph_stage(cfg: &RunConfig) -> CliResult<()> {
    let input = cfg.input(&cfg.paths.locations, LOCATIONS);
    let locations: Vec<Location> = read_jsonl(&input)?;
    let graph = build_graph(
        locations,
        cfg.grid_config()?,
        cfg.grid.edge_threshold_m,
        cfg.propagation.schema()?,
    )?;
    let out = cfg.out(GRAPH);
    write_json(&out, &graph.to_snapshot())?;
    let mut m = Manifest::new(
        "build-graph",
        cfg.seed,
        json!({"grid": cfg.grid, "keywords": cfg.propagation.keywords, "nodes": graph.len(), "edges": graph.edge_count()}),
    );
    m.input(&input)?;
    finish(m, cfg, &[out])
}

fn load_graph(path: &Path) -> CliResult<LocationGraph> {
    let snap: GraphSnapshot = read_json(path)?;
    Ok(LocationGraph::from_snapshot(snap)?)
}

/// The propagated graph when that stage has run, else the built one.
fn current_graph_path(cfg: &RunConfig) -> PathBuf {
    let p = cfg.out(GRAPH_PROPAGATED);
    if p.exists() {
        p
    } else {
        cfg.out(GRAPH)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLine {
    pub device_id: String,
    pub keywords: Vec<f64>,
}

pub fn propagate(cfg: &RunConfig) -> CliResult<()> {
    let graph_path = cfg.out(GRAPH);
    let graph = load_graph(&graph_path)?;
    let mut m = Manifest::new("propagate", cfg.seed, params(&cfg.propagation));
    m.input(&graph_path)?;
    let k = graph.schema().keywords;

    let mut input = PropagationInput::default();
    let visits_path = cfg.out(VISITS);
    if visits_path.exists() {
        m.input(&visits_path)?;
        let visits: Vec<Visit> = read_jsonl(&visits_path)?;
        let profiles_path = cfg.out(PROFILES);
        let profiles: BTreeMap<String, Vec<f64>> = if profiles_path.exists() {
            m.input(&profiles_path)?;
            read_jsonl::<ProfileLine>(&profiles_path)?
                .into_iter()
                .map(|p| (p.device_id, p.keywords))
                .collect()
        } else {
            BTreeMap::new()
        };
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        let mut kw: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
        for v in &visits {
            *counts.entry(v.pid.clone()).or_default() += v.weight;
            if let Some(p) = profiles.get(&v.device_id) {
                if p.len() != k {
                    return Err(CliError::schema(&profiles_path, 0, "profile width differs from the keyword schema"));
                }
                let e = kw.entry(v.pid.clone()).or_insert_with(|| (vec![0.0; k], 0.0));
                for (a, x) in e.0.iter_mut().zip(p) {
                    *a += v.weight * x;
                }
                e.1 += v.weight;
            }
        }
        input.visits = counts.into_iter().filter(|(pid, _)| graph.contains(pid)).collect();
        input.visitor_keywords = kw
            .into_iter()
            .filter(|(pid, (_, w))| graph.contains(pid) && *w > 0.0)
            .map(|(pid, (sum, w))| (pid, sum.into_iter().map(|x| x / w).collect()))
            .collect();
    }
    let steps = vec![input; cfg.propagation.steps.max(1)];
    let out = iterate(&graph, &steps, &cfg.propagation.smoothing())?;
    let graph_out = cfg.out(GRAPH_PROPAGATED);
    write_json(&graph_out, &out.to_snapshot())?;

    let kw_out = cfg.out(KEYWORDS);
    let mut w = csv::Writer::from_path(&kw_out).map_err(|e| CliError::schema(&kw_out, 0, e))?;
    let mut header = vec!["pid".to_string()];
    header.extend((0..k).map(|i| format!("k{i}")));
    w.write_record(&header).map_err(|e| CliError::schema(&kw_out, 0, e))?;
    for (pid, v) in combine(&out) {
        let mut rec = vec![pid];
        rec.extend(v.as_slice().iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| CliError::schema(&kw_out, 0, e))?;
    }
    w.flush().map_err(|e| CliError::io(&kw_out, e))?;
    finish(m, cfg, &[graph_out, kw_out])
}

pub fn visits(cfg: &RunConfig) -> CliResult<()> {
    let graph_path = current_graph_path(cfg);
    let graph = load_graph(&graph_path)?;
    let imp_path = cfg.input(&cfg.paths.impressions, IMPRESSIONS);
    let impressions: Vec<Impression> = read_impressions(&imp_path)?;
    let detector = HitDetector::new(&graph, None, cfg.hit_rule.clone())?;
    let flight = cfg.flight_window()?;
    let groups = group_impressions(impressions);
    let devices = process_devices(&groups, &detector, cfg.lump, flight)?;

    let dropped: usize = devices.iter().map(|d| d.dropped).sum();
    let n_hits: usize = devices.iter().map(|d| d.hits.len()).sum();
    let visits_out = cfg.out(VISITS);
    write_jsonl(&visits_out, devices.iter().flat_map(|d| d.visits.iter()))?;
    let series: Vec<_> = devices.into_iter().map(|d| d.series).collect();
    let (series_out, activity_out) = (cfg.out(SERIES), cfg.out(ACTIVITY));
    write_series(&series_out, &activity_out, &series)?;

    let mut m = Manifest::new(
        "visits",
        cfg.seed,
        json!({
            "hit_rule": cfg.hit_rule, "lump": cfg.lump, "flight": flight,
            "devices": series.len(), "hits": n_hits, "dropped_visits": dropped,
        }),
    );
    m.input(&graph_path)?;
    m.input(&imp_path)?;
    finish(m, cfg, &[visits_out, series_out, activity_out])
}

fn load_series(cfg: &RunConfig, m: &mut Manifest) -> CliResult<Vec<visitlift::visit_engine::VisitSeries>> {
    let (s, a) = (cfg.out(SERIES), cfg.out(ACTIVITY));
    m.input(&s)?;
    m.input(&a)?;
    read_series(&s, &a, cfg.flight_window()?)
}

pub fn features(cfg: &RunConfig) -> CliResult<()> {
    let seed = stage_seed(cfg.seed, "features");
    let mut m = Manifest::new(
        "features",
        cfg.seed,
        json!({"kernel_m": cfg.kernel_m, "time_features": cfg.matching.time_features}),
    );
    let feat_path = cfg.input(&cfg.paths.features, FEATURES);
    m.input(&feat_path)?;
    let table = read_features(&feat_path)?;
    let series = load_series(cfg, &mut m)?;
    let kernel = make_kernel(cfg.kernel_m)?;
    let out_table = build_match_table(&table, &series, &kernel, seed, cfg.matching.time_features)?;
    let out = cfg.out(MATCH_FEATURES);
    write_features(&out, &out_table)?;
    let mut outputs = vec![out];

    if let Some(priors_path) = &cfg.paths.priors {
        m.input(priors_path)?;
        let mut priors: Vec<PriorRecord> = read_jsonl(priors_path)?;
        priors.sort_by(|a, b| a.device_id.cmp(&b.device_id).then(a.step.cmp(&b.step)));
        let graph_path = current_graph_path(cfg);
        m.input(&graph_path)?;
        let graph = load_graph(&graph_path)?;
        let combined = combine(&graph);
        let imp_path = cfg.input(&cfg.paths.impressions, IMPRESSIONS);
        let impressions = group_impressions(read_impressions(&imp_path)?);
        let mut visits: BTreeMap<String, Vec<Visit>> = BTreeMap::new();
        for v in read_jsonl::<Visit>(&cfg.out(VISITS))? {
            visits.entry(v.device_id.clone()).or_default().push(v);
        }
        let schema = graph.schema().clone();
        let smoothing = cfg.propagation.smoothing();
        let mut profiles: BTreeMap<String, UserProfile> = BTreeMap::new();
        for rec in &priors {
            let current = match profiles.remove(&rec.device_id) {
                Some(p) => p,
                None => UserProfile::new(&rec.device_id, schema.keywords, cfg.propagation.rho)?,
            };
            let bundle = derive_features(
                impressions.get(&rec.device_id).map_or(&[][..], Vec::as_slice),
                visits.get(&rec.device_id).map_or(&[][..], Vec::as_slice),
                &graph,
                &combined,
                &smoothing.gamma_f,
                &smoothing.gamma_g,
            )?;
            profiles.insert(rec.device_id.clone(), update_profile(&current, rec, &bundle, &schema)?);
        }
        let lines: Vec<ProfileLine> = profiles
            .into_values()
            .map(|p| ProfileLine {
                device_id: p.device_id,
                keywords: p.keywords.into_inner(),
            })
            .collect();
        let out = cfg.out(PROFILES);
        write_jsonl(&out, &lines)?;
        outputs.push(out);
    }
    finish(m, cfg, &outputs)
}

pub fn match_stage(cfg: &RunConfig) -> CliResult<()> {
    let seed = stage_seed(cfg.seed, "match");
    let input = cfg.out(MATCH_FEATURES);
    let table = read_features(&input)?;
    let run = run_match(&table, &cfg.matching, seed)?;
    let out = cfg.out(MATCH);
    write_json(&out, &run)?;
    let mut m = Manifest::new("match", cfg.seed, params(&cfg.matching));
    m.input(&input)?;
    finish(m, cfg, &[out])
}

pub fn lift(cfg: &RunConfig) -> CliResult<()> {
    let seed = stage_seed(cfg.seed, "lift");
    let mut m = Manifest::new(
        "lift",
        cfg.seed,
        json!({"kernel_m": cfg.kernel_m, "mode": cfg.mode, "bootstrap": cfg.bootstrap}),
    );
    let series = load_series(cfg, &mut m)?;
    let kernel = make_kernel(cfg.kernel_m)?;
    let general = general_lift_report(&series, &kernel, cfg.bootstrap, seed)?;

    let mut output = LiftOutput {
        mode: cfg.mode,
        kernel_m: cfg.kernel_m,
        general,
        balanced: None,
        matched: None,
    };
    let table_path = cfg.out(MATCH_FEATURES);
    if table_path.exists() {
        m.input(&table_path)?;
        let table = read_features(&table_path)?;
        let responses = table_responses(&table, &series, &kernel)?;
        let match_path = cfg.out(MATCH);
        let run: Option<MatchRun> = if match_path.exists() {
            m.input(&match_path)?;
            let run: MatchRun = read_json(&match_path)?;
            if run.ids != table.ids {
                return Err(CliError::schema(&match_path, 0, "match result does not belong to match_features.csv"));
            }
            Some(run)
        } else {
            None
        };
        if let Some(run) = &run {
            output.matched = Some(matched_summary(run, &responses, &kernel, cfg.bootstrap, seed)?);
        }
        let balanced_run = run.as_ref().is_some_and(|r| r.result.mode == MatchMode::Balanced);
        if cfg.mode == MatchMode::Balanced || balanced_run {
            let rows: Vec<usize> = match &run {
                Some(r) => r.result.retained().into_iter().collect(),
                None => (0..table.len()).collect(),
            };
            output.balanced = Some(balanced_summary(&responses, &table.exposed, rows, cfg.bootstrap, seed)?);
        }
    }
    let out = cfg.out(LIFT);
    write_json(&out, &output)?;
    let epochs = cfg.out(EPOCHS);
    write_csv_rows(&epochs, &output.general.per_epoch)?;
    finish(m, cfg, &[out, epochs])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub injected_lift: f64,
    pub n_devices: usize,
    pub n_exposed: usize,
    pub extra_visit_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub seed: u64,
    pub lift: LiftOutput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<TruthSummary>,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: i64,
    n_exposed: usize,
    n_control: usize,
    exposed_mean: Option<f64>,
    control_mean: Option<f64>,
    lift: Option<f64>,
    lift_display: Option<f64>,
}

pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let lift_path = cfg.out(LIFT);
    let lift: LiftOutput = read_json(&lift_path)?;
    let mut m = Manifest::new("report", cfg.seed, json!({}));
    m.input(&lift_path)?;
    let gt_path = cfg.out(GROUND_TRUTH);
    let ground_truth = if gt_path.exists() {
        m.input(&gt_path)?;
        let gt: GroundTruth = read_json(&gt_path)?;
        Some(TruthSummary {
            injected_lift: gt.injected_lift,
            n_devices: gt.n_devices,
            n_exposed: gt.n_exposed,
            extra_visit_pct: gt.extra_visit_pct,
        })
    } else {
        None
    };
    let rows: Vec<EpochRow> = lift
        .general
        .per_epoch
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            n_exposed: e.n_exposed,
            n_control: e.n_control,
            exposed_mean: e.exposed_mean,
            control_mean: e.control_mean,
            lift: e.lift,
            lift_display: e.lift.map(display_scale),
        })
        .collect();
    let report = Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        lift,
        ground_truth,
    };
    let (out, epochs) = (cfg.out(REPORT), cfg.out(REPORT_EPOCHS));
    write_json(&out, &report)?;
    write_csv_rows(&epochs, &rows)?;
    finish(m, cfg, &[out, epochs])
}
