//! Library-level glue between the stages. The CLI commands and the
//! acceptance suite both go through these functions, so every number in a
//! report can be reproduced with direct calls.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use visitlift::lift_engine::{
    balanced_lift, bootstrap_general_lift, fts_response, general_lift, impute_control_fts, BalancedLift,
    CohortResponses, LiftReport, WeightKernel,
};
use visitlift::location_graph::LocationGraph;
use visitlift::matching::{
    auto_k, cluster_match, fit_propensity, kmeans_match, matched_lift, score, time_features, ClusterLift,
    FeatureMatrix, MatchMode, MatchResult, PropensityModel, ScoredCorpora,
};
use visitlift::quality::{bootstrap_lift, diagnose_match, BootstrapResult, QualityReport};
use visitlift::synthgen::{DeviceTruth, GroundTruth, Scenario};
use visitlift::visit_engine::{process_device, DeviceVisits, FlightWindow, HitDetector, Impression, LumpParams, VisitSeries};
use visitlift::{Error, Result};

use crate::config::{KChoice, MatchMethod, MatchingParams};
use crate::io::FeatureTable;

/// Groups impressions by device, each device's impressions in time order.
pub fn group_impressions(impressions: Vec<Impression>) -> BTreeMap<String, Vec<Impression>> {
    let mut out: BTreeMap<String, Vec<Impression>> = BTreeMap::new();
    for imp in impressions {
        out.entry(imp.device_id.clone()).or_default().push(imp);
    }
    for v in out.values_mut() {
        v.sort_by_key(|i| i.t);
    }
    out
}

pub fn process_devices(
    groups: &BTreeMap<String, Vec<Impression>>,
    detector: &HitDetector,
    lump: LumpParams,
    flight: FlightWindow,
) -> Result<Vec<DeviceVisits>> {
    let items: Vec<(&String, &Vec<Impression>)> = groups.iter().collect();
    items
        .par_iter()
        .map(|(id, imps)| process_device(id, imps, detector, lump, flight))
        .collect()
}

/// First-seen day used by the general lift: the campaign's for exposed
/// devices, the first in-flight impression day for control.
pub fn unbalanced_fts(s: &VisitSeries) -> Option<i64> {
    s.first_seen.or_else(|| {
        s.first_impression
            .map(|d| d.max(0))
            .filter(|&d| d < s.flight.days as i64 && s.last_impression.is_some_and(|l| l >= d))
    })
}

/// Exposed first-seen days, and imputed ones for control devices.
pub fn assigned_fts(series: &[VisitSeries], seed: u64) -> Vec<Option<i64>> {
    let exposed: Vec<i64> = series.iter().filter_map(|s| s.first_seen).collect();
    let control_spans: Vec<(Option<i64>, Option<i64>)> = series
        .iter()
        .filter(|s| !s.is_exposed())
        .map(|s| (s.first_impression, s.last_impression))
        .collect();
    let mut imputed = impute_control_fts(&control_spans, &exposed, seed).into_iter();
    series
        .iter()
        .map(|s| match s.first_seen {
            Some(f) => Some(f),
            None => imputed.next().expect("one draw per control device"),
        })
        .collect()
}

/// Builds exposed and control cohort responses from per-device
/// first-seen days; devices without one are left out.
pub fn cohorts(
    series: &[VisitSeries],
    fts: &[Option<i64>],
    kernel: &WeightKernel,
) -> Result<(CohortResponses, CohortResponses)> {
    let mut e = (Vec::new(), Vec::new());
    let mut c = (Vec::new(), Vec::new());
    for (s, f) in series.iter().zip(fts) {
        let Some(f) = *f else { continue };
        let side = if s.is_exposed() { &mut e } else { &mut c };
        side.0.push(s);
        side.1.push(f);
    }
    Ok((
        CohortResponses::build(&e.0, &e.1, kernel)?,
        CohortResponses::build(&c.0, &c.1, kernel)?,
    ))
}

/// General (unbalanced) lift with its bootstrap.
pub fn general_lift_report(series: &[VisitSeries], kernel: &WeightKernel, b: usize, seed: u64) -> Result<LiftReport> {
    let fts: Vec<Option<i64>> = series.iter().map(unbalanced_fts).collect();
    let (e, c) = cohorts(series, &fts, kernel)?;
    let mut report = general_lift(&e, &c)?;
    report.bootstrap = Some(bootstrap_general_lift(&e, &c, report.lift, b, seed)?);
    Ok(report)
}

/// Response at each device's assigned first-seen day.
pub fn fts_responses(series: &[&VisitSeries], fts: &[i64], kernel: &WeightKernel) -> Vec<Option<f64>> {
    series
        .par_iter()
        .zip(fts.par_iter())
        .map(|(s, &f)| fts_response(s, f, kernel))
        .collect()
}

/// Joins device features with the visit series. Keeps devices that have a
/// series, an assigned first-seen day and a response there; optionally
/// appends the two time features. The exposure flag comes from the series.
pub fn build_match_table(
    features: &FeatureTable,
    series: &[VisitSeries],
    kernel: &WeightKernel,
    seed: u64,
    with_time: bool,
) -> Result<FeatureTable> {
    let fts = assigned_fts(series, seed);
    let index: BTreeMap<&str, usize> = series.iter().enumerate().map(|(i, s)| (s.device_id.as_str(), i)).collect();
    let mut names = features.names.clone();
    if with_time {
        names.extend(["t_first_seen".to_string(), "t_active_days".to_string()]);
    }
    let mut out = FeatureTable {
        names,
        fts: Some(Vec::new()),
        ..FeatureTable::default()
    };
    for (row_i, id) in features.ids.iter().enumerate() {
        let Some(&si) = index.get(id.as_str()) else { continue };
        let s = &series[si];
        let Some(f) = fts[si] else { continue };
        if fts_response(s, f, kernel).is_none() {
            continue;
        }
        let mut row = features.rows[row_i].clone();
        if with_time {
            let days = s.flight.days as i64;
            let first = s.first_impression.unwrap_or(f).max(0);
            let last = s.last_impression.unwrap_or(f).min(days - 1);
            row.extend(time_features(f, (last - first + 1).max(0), s.flight.days));
        }
        out.ids.push(id.clone());
        out.rows.push(row);
        out.exposed.push(s.is_exposed());
        out.fts.as_mut().expect("fts column").push(f);
    }
    Ok(out)
}

/// Responses for the rows of a match table.
pub fn table_responses(table: &FeatureTable, series: &[VisitSeries], kernel: &WeightKernel) -> Result<Vec<f64>> {
    let fts = table.fts.as_ref().ok_or_else(|| Error::Data("match table has no fts column".into()))?;
    let index: BTreeMap<&str, &VisitSeries> = series.iter().map(|s| (s.device_id.as_str(), s)).collect();
    let rows: Vec<&VisitSeries> = table
        .ids
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("no visit series for `{id}`"))))
        .collect::<Result<_>>()?;
    fts_responses(&rows, fts, kernel)
        .into_iter()
        .zip(&table.ids)
        .map(|(r, id)| r.ok_or_else(|| Error::Data(format!("device `{id}` is not active at its first-seen day"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub ids: Vec<String>,
    pub exposed: Vec<bool>,
    pub model: PropensityModel,
    pub scores: Vec<f64>,
    pub k: Option<usize>,
    pub result: MatchResult,
}

pub fn run_match(table: &FeatureTable, params: &MatchingParams, seed: u64) -> Result<MatchRun> {
    let fm = FeatureMatrix::from_rows(table.ids.clone(), &table.rows, table.exposed.clone())?;
    let model = fit_propensity(&fm, params.max_iter)?;
    let scores = score(&model, &fm);
    let zeros = vec![0.0; fm.len()];
    let corpora = ScoredCorpora::new(fm.ids(), &scores, fm.exposed(), &zeros)?;
    let options = params.options();
    let (k, result) = match params.method {
        MatchMethod::Sort => (None, cluster_match(&corpora, options, seed)?),
        MatchMethod::Kmeans => {
            let k = match params.k {
                KChoice::Fixed(k) => k,
                KChoice::Auto(_) => auto_k(&corpora),
            };
            (Some(k), kmeans_match(&fm, &zeros, k, options.mode, seed)?)
        }
    };
    if result.is_empty() {
        return Err(Error::Degenerate("no cluster holds both exposed and control devices".into()));
    }
    Ok(MatchRun {
        ids: table.ids.clone(),
        exposed: table.exposed.clone(),
        model,
        scores,
        k,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSummary {
    pub method: String,
    pub caliper_width: Option<f64>,
    pub k: Option<usize>,
    pub n_exposed: usize,
    pub n_control: usize,
    pub lift: f64,
    /// `lift / g(0)`, g(0) being the response to a unit step on the
    /// evaluated day; comparable with the general report's `rate_change`
    pub rate_change: Option<f64>,
    pub clusters: Vec<ClusterLift>,
    pub diagnostics: QualityReport,
}

pub fn matched_summary(
    run: &MatchRun,
    responses: &[f64],
    kernel: &WeightKernel,
    b: usize,
    seed: u64,
) -> Result<MatchedSummary> {
    let ml = matched_lift(&run.result, responses)?;
    let g = kernel.step_gain(0);
    let diagnostics = diagnose_match(&run.result, responses, &run.exposed, b, seed)?;
    Ok(MatchedSummary {
        method: run.result.method.clone(),
        caliper_width: run.result.caliper_width,
        k: run.k,
        n_exposed: run.result.n_exposed(),
        n_control: run.result.n_control(),
        lift: ml.lift,
        rate_change: (g > 0.0).then(|| ml.lift / g),
        clusters: ml.clusters,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSummary {
    pub result: BalancedLift,
    pub bootstrap: BootstrapResult,
}

/// Balanced lift over the given rows (all rows, or the matched ones).
pub fn balanced_summary(
    responses: &[f64],
    exposed: &[bool],
    rows: impl IntoIterator<Item = usize>,
    b: usize,
    seed: u64,
) -> Result<BalancedSummary> {
    let mut e = Vec::new();
    let mut c = Vec::new();
    for i in rows {
        if exposed[i] {
            e.push(responses[i]);
        } else {
            c.push(responses[i]);
        }
    }
    Ok(BalancedSummary {
        result: balanced_lift(&e, &c, seed)?,
        bootstrap: bootstrap_lift(&e, &c, b, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftOutput {
    pub mode: MatchMode,
    pub kernel_m: usize,
    pub general: LiftReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced: Option<BalancedSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<MatchedSummary>,
}

/// A simulated campaign pushed through hit detection and lumping without
/// materializing the impression stream.
#[derive(Debug, Clone)]
pub struct SimulatedCorpus {
    pub features: FeatureTable,
    pub series: Vec<VisitSeries>,
    pub truth: GroundTruth,
    pub dropped_visits: usize,
}

pub fn simulate_corpus(
    scenario: &Scenario,
    detector: &HitDetector,
    lump: LumpParams,
    flight: FlightWindow,
) -> Result<SimulatedCorpus> {
    let n = scenario.spec().n_devices;
    let per_device: Vec<(Vec<f64>, VisitSeries, DeviceTruth, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rec = scenario.simulate_device(i);
            let dv = process_device(&rec.truth.device_id, &rec.impressions, detector, lump, flight)?;
            Ok((rec.features, dv.series, rec.truth, dv.dropped))
        })
        .collect::<Result<_>>()?;
    let mut features = FeatureTable {
        names: (0..scenario.spec().n_features).map(|k| format!("f{k}")).collect(),
        ..FeatureTable::default()
    };
    let mut series = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    let mut dropped = 0;
    for (f, s, t, d) in per_device {
        features.ids.push(t.device_id.clone());
        features.rows.push(f);
        features.exposed.push(t.exposed);
        series.push(s);
        truths.push(t);
        dropped += d;
    }
    Ok(SimulatedCorpus {
        features,
        series,
        truth: GroundTruth::from_devices(scenario.spec(), truths),
        dropped_visits: dropped,
    })
}

/// Graph of the scenario locations, for hit detection.
pub fn scenario_graph(scenario: &Scenario, grid: visitlift::geo_grid::GridConfig, threshold_m: f64) -> Result<LocationGraph> {
    visitlift::location_graph::build_graph(
        scenario.locations().to_vec(),
        grid,
        threshold_m,
        visitlift::location_graph::KeywordSchema::plain(1),
    )
}
