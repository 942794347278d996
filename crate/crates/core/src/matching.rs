//! Propensity scoring and cluster matching.
//!
//! Users are scored with a logistic model of exposure, sorted by score, and
//! swept once: every run of equal scores (or scores within a caliper of the
//! run's first score) is a cluster, and only clusters holding both exposed
//! and control users are kept. Comparisons never cross clusters.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FEATURES: usize = 25;
pub const DEFAULT_CALIPER: f64 = 1e-3;
pub const MAX_ADAPTIVE_CALIPER: f64 = 0.05;
pub const RIDGE: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10;
const LL_TOLERANCE: f64 = 1e-8;
const ROW_CHUNK: usize = 4_096;

/// Row-major user features with exposure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    ids: Vec<String>,
    k: usize,
    data: Vec<f64>,
    exposed: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, k: usize, data: Vec<f64>, exposed: Vec<bool>) -> Result<Self> {
        if data.len() != ids.len() * k || exposed.len() != ids.len() {
            return Err(Error::data("feature matrix dimensions disagree"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::data("features must be finite"));
        }
        if !exposed.iter().any(|&e| e) || exposed.iter().all(|&e| e) {
            return Err(Error::degenerate("need at least one exposed and one control user"));
        }
        Ok(FeatureMatrix { ids, k, data, exposed })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>], exposed: Vec<bool>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::data("rows have different lengths"));
        }
        FeatureMatrix::new(ids, k, rows.concat(), exposed)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn exposed(&self) -> &[bool] {
        &self.exposed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Appends columns (for example the time features) to every row.
    pub fn with_extra_columns(&self, extra: &[Vec<f64>]) -> Result<Self> {
        if extra.len() != self.len() {
            return Err(Error::data("one extra row per user is required"));
        }
        let add = extra.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(self.len() * (self.k + add));
        for (i, e) in extra.iter().enumerate() {
            if e.len() != add {
                return Err(Error::data("extra rows have different lengths"));
            }
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(e);
        }
        FeatureMatrix::new(self.ids.clone(), self.k + add, data, self.exposed.clone())
    }
}

/// First-seen day and active-day count, each scaled to `[0, 1]`.
pub fn time_features(first_seen_day: i64, active_days: i64, flight_days: u32) -> [f64; 2] {
    let t = flight_days.max(1) as f64;
    let span = (t - 1.0).max(1.0);
    [
        (first_seen_day as f64 / span).clamp(0.0, 1.0),
        (active_days as f64 / t).clamp(0.0, 1.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// intercept first, then one coefficient per input column (0 for
    /// dropped columns)
    pub beta: Vec<f64>,
    pub dropped_columns: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PropensityModel {
    pub fn linear(&self, row: &[f64]) -> f64 {
        self.beta[0] + row.iter().zip(&self.beta[1..]).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn score_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear(row))
    }
}

/// Logistic regression by iteratively reweighted least squares with a tiny
/// ridge on the slopes. Constant columns are dropped with a warning.
pub fn fit_propensity(features: &FeatureMatrix, max_iter: usize) -> Result<PropensityModel> {
    let n = features.len();
    let k = features.k();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..k {
        let first = features.data[c];
        if (0..n).all(|i| features.data[i * k + c] == first) {
            log::warn!("feature column {c} is constant; dropping it from the propensity model");
            dropped.push(c);
        } else {
            keep.push(c);
        }
    }
    let p = keep.len() + 1;
    if n < p {
        return Err(Error::TooFewSamples { needed: p, got: n });
    }
    let y: Vec<f64> = features.exposed.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    let design = |i: usize, out: &mut Vec<f64>| {
        out.clear();
        out.push(1.0);
        let row = features.row(i);
        out.extend(keep.iter().map(|&c| row[c]));
    };

    let log_lik = |beta: &[f64]| -> f64 {
        let parts: Vec<f64> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(ROW_CHUNK)
            .map(|chunk| {
                let mut x = Vec::with_capacity(p);
                chunk
                    .iter()
                    .map(|&i| {
                        design(i, &mut x);
                        let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                        // log(1 + e^eta) without overflow
                        let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
                        y[i] * eta - softplus
                    })
                    .sum()
            })
            .collect();
        parts.iter().sum::<f64>() - 0.5 * RIDGE * beta[1..].iter().map(|b| b * b).sum::<f64>()
    };

    let mut beta = vec![0.0; p];
    let mut ll = log_lik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        // chunked accumulation, reduced in chunk order for reproducibility
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(ROW_CHUNK)
            .map(|chunk| {
                let mut h = vec![0.0; p * p];
                let mut g = vec![0.0; p];
                let mut x = Vec::with_capacity(p);
                for &i in chunk {
                    design(i, &mut x);
                    let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                    let mu = sigmoid(eta);
                    let w = (mu * (1.0 - mu)).max(1e-12);
                    for a in 0..p {
                        g[a] += x[a] * (y[i] - mu);
                        let wa = w * x[a];
                        for b in a..p {
                            h[a * p + b] += wa * x[b];
                        }
                    }
                }
                (h, g)
            })
            .collect();
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for (ph, pg) in &parts {
            for a in 0..p {
                g[a] += pg[a];
                for b in a..p {
                    h[(a, b)] += ph[a * p + b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for a in 1..p {
            h[(a, a)] += RIDGE;
            g[a] -= RIDGE * beta[a];
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::degenerate("propensity Hessian is not positive definite"))?
            .solve(&g);
        let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let new_ll = log_lik(&candidate);
        let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        beta = candidate;
        ll = new_ll;
        if rel < LL_TOLERANCE {
            converged = true;
            break;
        }
    }

    let mut full = vec![0.0; k + 1];
    full[0] = beta[0];
    for (j, &c) in keep.iter().enumerate() {
        full[c + 1] = beta[j + 1];
    }
    Ok(PropensityModel {
        beta: full,
        dropped_columns: dropped,
        iterations,
        converged,
        log_likelihood: ll,
    })
}

pub fn score(model: &PropensityModel, features: &FeatureMatrix) -> Vec<f64> {
    (0..features.len())
        .into_par_iter()
        .map(|i| model.score_row(features.row(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    /// position in the caller's user arrays
    pub user: usize,
    pub score: f64,
    pub exposed: bool,
    pub response: f64,
}

/// Users sorted ascending by score, ties by device id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCorpora {
    entries: Vec<ScoredEntry>,
}

impl ScoredCorpora {
    pub fn new(ids: &[String], scores: &[f64], exposed: &[bool], responses: &[f64]) -> Result<Self> {
        let n = ids.len();
        if scores.len() != n || exposed.len() != n || responses.len() != n {
            return Err(Error::data("scored corpora arrays differ in length"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("scores must be finite"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.par_sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(&ids[b])));
        Ok(ScoredCorpora {
            entries: order
                .into_iter()
                .map(|i| ScoredEntry {
                    user: i,
                    score: scores[i],
                    exposed: exposed[i],
                    response: responses[i],
                })
                .collect(),
        })
    }

    pub fn entries(&self) -> &[ScoredEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Caliper {
    /// clusters are runs of exactly equal scores
    Off,
    Fixed { width: f64 },
    /// doubles the width from `start` until every cluster has both sides
    /// or `max` is reached
    Adaptive { start: f64, max: f64 },
}

impl Caliper {
    pub fn adaptive() -> Self {
        Caliper::Adaptive {
            start: DEFAULT_CALIPER,
            max: MAX_ADAPTIVE_CALIPER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub mode: MatchMode,
    pub caliper: Caliper,
    /// keep only clusters with more than one user on each side
    #[serde(default)]
    pub strict_cluster_size: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            mode: MatchMode::Unbalanced,
            caliper: Caliper::Off,
            strict_cluster_size: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCluster {
    /// opening score of the run, or the k-means label
    pub label: f64,
    pub exposed: Vec<usize>,
    pub control: Vec<usize>,
    /// weight of every retained control user
    pub control_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub method: String,
    pub mode: MatchMode,
    pub caliper_width: Option<f64>,
    pub seed: u64,
    pub n_input: usize,
    /// clusters formed by the sweep, before dropping one-sided ones
    pub clusters_formed: usize,
    pub clusters: Vec<MatchCluster>,
}

impl MatchResult {
    pub fn retained(&self) -> BTreeSet<usize> {
        self.clusters
            .iter()
            .flat_map(|c| c.exposed.iter().chain(&c.control).copied())
            .collect()
    }

    pub fn n_exposed(&self) -> usize {
        self.clusters.iter().map(|c| c.exposed.len()).sum()
    }

    pub fn n_control(&self) -> usize {
        self.clusters.iter().map(|c| c.control.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Run boundaries of the sweep as `(start, end)` ranges into the sorted
/// entries.
fn sweep_runs(entries: &[ScoredEntry], width: Option<f64>) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    while start < entries.len() {
        let open = entries[start].score;
        let mut end = start + 1;
        while end < entries.len() {
            let s = entries[end].score;
            let same = match width {
                None => s == open,
                Some(w) => s - open <= w,
            };
            if !same {
                break;
            }
            end += 1;
        }
        runs.push((start, end));
        start = end;
    }
    runs
}

fn two_sided(entries: &[ScoredEntry], run: (usize, usize)) -> bool {
    let slice = &entries[run.0..run.1];
    slice.iter().any(|e| e.exposed) && slice.iter().any(|e| !e.exposed)
}

fn resolve_width(entries: &[ScoredEntry], caliper: Caliper) -> Option<f64> {
    match caliper {
        Caliper::Off => None,
        Caliper::Fixed { width } => Some(width),
        Caliper::Adaptive { start, max } => {
            let mut w = start;
            loop {
                let runs = sweep_runs(entries, Some(w));
                if w >= max || runs.iter().all(|&r| two_sided(entries, r)) {
                    return Some(w);
                }
                w = (w * 2.0).min(max);
            }
        }
    }
}

/// The score-sorted cluster sweep.
pub fn cluster_match(corpora: &ScoredCorpora, options: MatchOptions, seed: u64) -> Result<MatchResult> {
    let entries = &corpora.entries;
    let width = resolve_width(entries, options.caliper);
    if let Some(w) = width {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::config("caliper width must be >= 0"));
        }
    }
    let runs = sweep_runs(entries, width);
    let mut out = MatchResult {
        method: match width {
            None => "sort".to_string(),
            Some(_) => "sort-caliper".to_string(),
        },
        mode: options.mode,
        caliper_width: width,
        seed,
        n_input: entries.len(),
        clusters_formed: runs.len(),
        clusters: Vec::new(),
    };
    let min_side = if options.strict_cluster_size { 2 } else { 1 };
    for (ci, &(a, b)) in runs.iter().enumerate() {
        let slice = &entries[a..b];
        let mut exposed: Vec<usize> = slice.iter().filter(|e| e.exposed).map(|e| e.user).collect();
        let mut control: Vec<usize> = slice.iter().filter(|e| !e.exposed).map(|e| e.user).collect();
        if exposed.len() < min_side || control.len() < min_side {
            continue;
        }
        let control_weight = match options.mode {
            MatchMode::Balanced => {
                let n = exposed.len().min(control.len());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ci as u64);
                for side in [&mut exposed, &mut control] {
                    if side.len() > n {
                        side.shuffle(&mut rng);
                        side.truncate(n);
                        side.sort_unstable();
                    }
                }
                1.0
            }
            MatchMode::Unbalanced => exposed.len() as f64 / control.len() as f64,
        };
        out.clusters.push(MatchCluster {
            label: slice[0].score,
            exposed,
            control,
            control_weight,
        });
    }
    Ok(out)
}

/// Number of sweep clusters under an adaptive caliper, used as `k` for
/// k-means.
pub fn auto_k(corpora: &ScoredCorpora) -> usize {
    let w = resolve_width(&corpora.entries, Caliper::adaptive());
    sweep_runs(&corpora.entries, w).len().max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from `k` distinct seeded data points; an empty cluster
/// takes the point farthest from its current centroid.
pub fn kmeans(features: &FeatureMatrix, k: usize, seed: u64) -> Result<KMeans> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-6;
    let n = features.len();
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > n {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let dim = features.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| features.row(i).to_vec()).collect();
    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        labels = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = features.row(i);
                let mut best = (0, f64::INFINITY);
                for (c, cent) in centroids.iter().enumerate() {
                    let d = sq_dist(row, cent);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = sq_dist(features.row(a), &centroids[labels[a]]);
                        let db = sq_dist(features.row(b), &centroids[labels[b]]);
                        da.total_cmp(&db).then_with(|| b.cmp(&a))
                    })
                    .expect("k <= n");
                taken.insert(far);
                sums[c] = features.row(far).to_vec();
                counts[c] = 1;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < TOL {
            break;
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        iterations,
    })
}

/// k-means labels fed to the same sweep as [`cluster_match`].
pub fn kmeans_match(
    features: &FeatureMatrix,
    responses: &[f64],
    k: usize,
    mode: MatchMode,
    seed: u64,
) -> Result<MatchResult> {
    let km = kmeans(features, k, seed)?;
    let labels: Vec<f64> = km.labels.iter().map(|&l| l as f64).collect();
    let corpora = ScoredCorpora::new(features.ids(), &labels, features.exposed(), responses)?;
    let mut out = cluster_match(
        &corpora,
        MatchOptions {
            mode,
            caliper: Caliper::Off,
            strict_cluster_size: false,
        },
        seed,
    )?;
    out.method = format!("kmeans-{k}");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLift {
    pub label: f64,
    pub n_exposed: usize,
    pub n_control: usize,
    pub mean_exposed: f64,
    pub mean_control: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedLift {
    pub lift: f64,
    pub clusters: Vec<ClusterLift>,
}

impl MatchedLift {
    pub fn diffs(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.diff).collect()
    }
}

/// Per-cluster exposed mean minus weighted control mean, pooled with
/// weights equal to the exposed counts.
pub fn matched_lift(result: &MatchResult, responses: &[f64]) -> Result<MatchedLift> {
    if result.is_empty() {
        return Err(Error::degenerate("match result is empty"));
    }
    let mut clusters = Vec::with_capacity(result.clusters.len());
    let mut acc = 0.0;
    let mut weight = 0.0;
    for c in &result.clusters {
        let get = |i: &usize| {
            responses
                .get(*i)
                .copied()
                .ok_or_else(|| Error::data("match refers to a user without a response"))
        };
        let me = c.exposed.iter().map(get).sum::<Result<f64>>()? / c.exposed.len() as f64;
        let wsum = c.control_weight * c.control.len() as f64;
        let mc = c.control.iter().map(|i| get(i).map(|r| c.control_weight * r)).sum::<Result<f64>>()? / wsum;
        let diff = me - mc;
        acc += c.exposed.len() as f64 * diff;
        weight += c.exposed.len() as f64;
        clusters.push(ClusterLift {
            label: c.label,
            n_exposed: c.exposed.len(),
            n_control: c.control.len(),
            mean_exposed: me,
            mean_control: mc,
            diff,
        });
    }
    Ok(MatchedLift {
        lift: acc / weight,
        clusters,
    })
}

/// Random permutation helper for tests and callers that shuffle corpora.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:05}")).collect()
    }

    fn corpora(scores: &[f64], exposed: &[bool]) -> ScoredCorpora {
        ScoredCorpora::new(&ids(scores.len()), scores, exposed, &vec![0.0; scores.len()]).unwrap()
    }

    #[test]
    fn lone_exposed_cluster_is_dropped() {
        let c = corpora(&[0.2, 0.2, 0.5], &[true, false, true]);
        let r = cluster_match(&c, MatchOptions::default(), 1).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.clusters[0].label, 0.2);
        assert_eq!(r.retained(), [0, 1].into());
        assert_eq!(r.clusters_formed, 2);
    }

    #[test]
    fn identical_users_form_one_cluster() {
        let exposed: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let c = corpora(&[0.4; 10], &exposed);
        let r = cluster_match(&c, MatchOptions::default(), 1).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.retained().len(), 10);
        assert!((r.clusters[0].control_weight - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn strict_sizes_follow_the_printed_condition() {
        let c = corpora(&[0.2, 0.2, 0.3, 0.3, 0.3, 0.3], &[true, false, true, true, false, false]);
        let loose = cluster_match(&c, MatchOptions::default(), 1).unwrap();
        assert_eq!(loose.clusters.len(), 2);
        let strict = cluster_match(
            &c,
            MatchOptions {
                strict_cluster_size: true,
                ..MatchOptions::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(strict.clusters.len(), 1);
    }

    fn brute_force_retained(scores: &[f64], exposed: &[bool]) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for i in 0..scores.len() {
            let group: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] == scores[i]).collect();
            let e = group.iter().any(|&j| exposed[j]);
            let c = group.iter().any(|&j| !exposed[j]);
            if e && c {
                out.insert(i);
            }
        }
        out
    }

    #[test]
    fn sweep_matches_quadratic_grouping() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..25) as f64 / 25.0).collect();
        let exposed: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
        let r = cluster_match(&corpora(&scores, &exposed), MatchOptions::default(), 3).unwrap();
        assert_eq!(r.retained(), brute_force_retained(&scores, &exposed));
    }

    #[test]
    fn balanced_clusters_have_equal_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..300).map(|_| rng.random_range(0..10) as f64).collect();
        let exposed: Vec<bool> = (0..300).map(|_| rng.random_bool(0.4)).collect();
        let opts = MatchOptions {
            mode: MatchMode::Balanced,
            ..MatchOptions::default()
        };
        let r = cluster_match(&corpora(&scores, &exposed), opts, 9).unwrap();
        for c in &r.clusters {
            assert_eq!(c.exposed.len(), c.control.len());
            assert_eq!(c.control_weight, 1.0);
        }
        let again = cluster_match(&corpora(&scores, &exposed), opts, 9).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn caliper_groups_nearby_scores() {
        let c = corpora(&[0.1000, 0.1005, 0.1009, 0.1020], &[true, false, true, false]);
        let fixed = MatchOptions {
            caliper: Caliper::Fixed { width: 1e-3 },
            ..MatchOptions::default()
        };
        let r = cluster_match(&c, fixed, 1).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.retained(), [0, 1, 2].into());
        let adaptive = MatchOptions {
            caliper: Caliper::adaptive(),
            ..MatchOptions::default()
        };
        let r = cluster_match(&c, adaptive, 1).unwrap();
        assert_eq!(r.caliper_width, Some(2e-3));
        assert_eq!(r.retained().len(), 4);
    }

    #[test]
    fn auto_k_counts_distinct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..140).map(|i| 0.1 + 0.1 * (i % 7) as f64).collect();
        let exposed: Vec<bool> = (0..140).map(|_| rng.random_bool(0.5)).collect();
        assert_eq!(auto_k(&corpora(&scores, &exposed)), 7);
    }

    fn matrix(rows: &[Vec<f64>], exposed: &[bool]) -> FeatureMatrix {
        FeatureMatrix::from_rows(ids(rows.len()), rows, exposed.to_vec()).unwrap()
    }

    /// Coarse-to-fine grid search of the one-feature logistic likelihood.
    fn grid_search_mle(x: &[f64], y: &[f64]) -> (f64, f64) {
        let ll = |b0: f64, b1: f64| -> f64 {
            x.iter()
                .zip(y)
                .map(|(&xi, &yi)| {
                    let p = 1.0 / (1.0 + (-(b0 + b1 * xi)).exp());
                    yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()
                })
                .sum()
        };
        let (mut c0, mut c1, mut span) = (0.0, 0.0, 10.0);
        for _ in 0..12 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for i in -20..=20 {
                for j in -20..=20 {
                    let b0 = c0 + span * i as f64 / 20.0;
                    let b1 = c1 + span * j as f64 / 20.0;
                    let v = ll(b0, b1);
                    if v > best.0 {
                        best = (v, b0, b1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            span /= 4.0;
        }
        (c0, c1)
    }

    #[test]
    fn irls_matches_likelihood_grid_search() {
        let x = [0.1, 0.3, 0.4, 0.6, 0.7, 0.9];
        let y = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let exposed: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
        let m = fit_propensity(&matrix(&rows, &exposed), DEFAULT_MAX_ITER).unwrap();
        let (b0, b1) = grid_search_mle(&x, &y);
        assert!((m.beta[0] - b0).abs() < 1e-3, "{} vs {b0}", m.beta[0]);
        assert!((m.beta[1] - b1).abs() < 1e-3, "{} vs {b1}", m.beta[1]);
        assert!(m.converged);
    }

    #[test]
    fn null_model_scores_near_exposed_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..20_000).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let exposed: Vec<bool> = (0..20_000).map(|_| rng.random_bool(0.3)).collect();
        let fm = matrix(&rows, &exposed);
        let m = fit_propensity(&fm, DEFAULT_MAX_ITER).unwrap();
        for b in &m.beta[1..] {
            assert!(b.abs() < 0.15, "beta {b}");
        }
        let frac = exposed.iter().filter(|&&e| e).count() as f64 / 20_000.0;
        for s in score(&m, &fm) {
            assert!((s - frac).abs() < 0.05);
        }
    }

    #[test]
    fn constant_column_is_dropped() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i % 7) as f64 / 7.0, 0.5]).collect();
        let exposed: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let m = fit_propensity(&matrix(&rows, &exposed), DEFAULT_MAX_ITER).unwrap();
        assert_eq!(m.dropped_columns, vec![1]);
        assert_eq!(m.beta[2], 0.0);
        assert!(matches!(
            fit_propensity(&matrix(&[vec![0.1, 0.2], vec![0.3, 0.1]], &[true, false]), 10),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn scoring_examples() {
        let zero = PropensityModel {
            beta: vec![0.0; 4],
            dropped_columns: vec![],
            iterations: 0,
            converged: true,
            log_likelihood: 0.0,
        };
        assert_eq!(zero.score_row(&[0.3, 0.9, 0.1]), 0.5);
        let mut m = zero.clone();
        m.beta = vec![0.0, 10.0, 0.0, 0.0];
        let a = m.score_row(&[0.5, 0.0, 0.0]);
        let b = m.score_row(&[1.0, 0.0, 0.0]);
        assert!(b > a && b < 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.beta = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let eta = m.beta[0] + m.beta[1] * x[0] + m.beta[2] * x[1] + m.beta[3] * x[2];
            assert!((m.score_row(&x) - 1.0 / (1.0 + (-eta).exp())).abs() < 1e-12);
        }
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let b = i % 2;
            let c = if b == 0 { 0.15 } else { 0.85 };
            rows.push((0..4).map(|_| c + rng.random_range(-0.05..0.05)).collect());
            truth.push(b);
        }
        (rows, truth)
    }

    #[test]
    fn kmeans_separates_blobs() {
        let (rows, truth) = blobs(400, 3);
        let exposed: Vec<bool> = (0..400).map(|i| i % 5 == 0).collect();
        let km = kmeans(&matrix(&rows, &exposed), 2, 11).unwrap();
        let first = km.labels[0];
        for (l, t) in km.labels.iter().zip(&truth) {
            assert_eq!(*l == first, *t == truth[0]);
        }
    }

    #[test]
    fn kmeans_k1_keeps_everyone() {
        let (rows, _) = blobs(60, 4);
        let exposed: Vec<bool> = (0..60).map(|i| i % 4 == 0).collect();
        let fm = matrix(&rows, &exposed);
        let r = kmeans_match(&fm, &vec![0.0; 60], 1, MatchMode::Unbalanced, 2).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert_eq!(r.retained().len(), 60);
        assert!(kmeans(&fm, 0, 1).is_err());
        assert!(kmeans(&fm, 61, 1).is_err());
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![if i < 11 { 0.0 } else { 1.0 }]).collect();
        let exposed: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        // eleven identical points: several initial centroids coincide
        let km = kmeans(&matrix(&rows, &exposed), 3, 5).unwrap();
        let mut counts = BTreeMap::new();
        for l in &km.labels {
            *counts.entry(*l).or_insert(0) += 1;
        }
        assert!(counts.len() >= 2);
        assert!(km.centroids.iter().all(|c| c[0].is_finite()));
    }

    #[test]
    fn matched_lift_examples() {
        let scores = [0.1, 0.1, 0.1, 0.5, 0.5];
        let exposed = [true, false, false, true, false];
        let responses = [1.0, 0.0, 0.5, 2.0, 2.0];
        let c = ScoredCorpora::new(&ids(5), &scores, &exposed, &responses).unwrap();
        let r = cluster_match(&c, MatchOptions::default(), 0).unwrap();
        let ml = matched_lift(&r, &responses).unwrap();
        assert_eq!(ml.clusters.len(), 2);
        assert!((ml.clusters[0].diff - 0.75).abs() < 1e-15);
        assert_eq!(ml.clusters[1].diff, 0.0);
        assert!((ml.lift - 0.375).abs() < 1e-15);

        let same = ScoredCorpora::new(&ids(4), &[0.3; 4], &[true, true, false, false], &[1.0, 3.0, 0.0, 1.0]).unwrap();
        let r = cluster_match(&same, MatchOptions::default(), 0).unwrap();
        let ml = matched_lift(&r, &[1.0, 3.0, 0.0, 1.0]).unwrap();
        assert!((ml.lift - 1.5).abs() < 1e-15);

        let empty = MatchResult {
            method: "sort".into(),
            mode: MatchMode::Unbalanced,
            caliper_width: None,
            seed: 0,
            n_input: 0,
            clusters_formed: 0,
            clusters: vec![],
        };
        assert!(matched_lift(&empty, &[]).is_err());
    }

    #[test]
    fn time_feature_scaling() {
        assert_eq!(time_features(0, 30, 30), [0.0, 1.0]);
        assert_eq!(time_features(29, 15, 30), [1.0, 0.5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn permutation_never_changes_retained_ids(
                users in prop::collection::vec((0u8..8, any::<bool>()), 2..80),
                seed in any::<u64>(),
                balanced in any::<bool>(),
            ) {
                let n = users.len();
                let names = ids(n);
                let scores: Vec<f64> = users.iter().map(|u| u.0 as f64 / 8.0).collect();
                let exposed: Vec<bool> = users.iter().map(|u| u.1).collect();
                let opts = MatchOptions {
                    mode: if balanced { MatchMode::Balanced } else { MatchMode::Unbalanced },
                    ..MatchOptions::default()
                };
                let base = ScoredCorpora::new(&names, &scores, &exposed, &vec![0.0; n]).unwrap();
                let r = cluster_match(&base, opts, 7).unwrap();
                let kept: BTreeSet<&String> = r.retained().iter().map(|&i| &names[i]).collect();

                let perm = shuffled_indices(n, seed);
                let pn: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
                let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
                let pe: Vec<bool> = perm.iter().map(|&i| exposed[i]).collect();
                let shuffled = ScoredCorpora::new(&pn, &ps, &pe, &vec![0.0; n]).unwrap();
                let r2 = cluster_match(&shuffled, opts, 7).unwrap();
                let kept2: BTreeSet<&String> = r2.retained().iter().map(|&i| &pn[i]).collect();
                prop_assert_eq!(kept, kept2);

                for c in &r.clusters {
                    prop_assert!(!c.exposed.is_empty() && !c.control.is_empty());
                    prop_assert!(c.control_weight > 0.0);
                    for &u in c.exposed.iter().chain(&c.control) {
                        prop_assert_eq!(scores[u], c.label);
                    }
                    if balanced {
                        prop_assert_eq!(c.exposed.len(), c.control.len());
                    }
                }
            }

            #[test]
            fn equal_rows_get_equal_scores(
                row in prop::collection::vec(0.0..1.0f64, 5),
                beta in prop::collection::vec(-3.0..3.0f64, 6),
            ) {
                let m = PropensityModel { beta, dropped_columns: vec![], iterations: 0, converged: true, log_likelihood: 0.0 };
                let copy = row.clone();
                prop_assert_eq!(m.score_row(&row), m.score_row(&copy));
                let s = m.score_row(&row);
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }
    }
}
