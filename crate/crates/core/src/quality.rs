//! Diagnostics for a matching and lift run.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::matching::{matched_lift, MatchResult};

pub const DEFAULT_BOOTSTRAP: usize = 1_000;
pub const MIN_BOOTSTRAP: usize = 100;

/// Empirical distribution of (optionally weighted) response values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    /// distinct values, ascending, with their probabilities
    pub support: Vec<(f64, f64)>,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: Option<f64>,
}

impl ResponseDistribution {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        ResponseDistribution::weighted(values, &vec![1.0; values.len()])
    }

    /// Weighted empirical distribution; weights must be positive.
    pub fn weighted(values: &[f64], weights: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::degenerate("empty response distribution"));
        }
        if values.len() != weights.len() {
            return Err(Error::data("one weight per value is required"));
        }
        if values.iter().any(|v| !v.is_finite()) || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::data("values must be finite and weights positive"));
        }
        // uniform weights of any size reduce to plain counts
        let top = weights.iter().copied().fold(0.0, f64::max);
        let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().map(|w| w / top)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let mut support: Vec<(f64, f64)> = Vec::new();
        for (v, w) in &pairs {
            match support.last_mut() {
                Some(last) if last.0 == *v => last.1 += w,
                _ => support.push((*v, *w)),
            }
        }
        for s in &mut support {
            s.1 /= total;
        }
        let mean = pairs.iter().map(|(v, w)| v * w).sum::<f64>() / total;
        let variance = pairs.iter().map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
        Ok(ResponseDistribution {
            support,
            count: values.len(),
            mean,
            variance,
            skewness: skewness(values).ok(),
        })
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Shannon entropy in bits.
pub fn entropy(dist: &ResponseDistribution) -> f64 {
    -dist
        .support
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(_, p)| p * p.log2())
        .sum::<f64>()
}

/// `(H(exposed after) - H(exposed before), H(control after) - H(control before))`.
pub fn entropy_delta(
    before_exposed: &ResponseDistribution,
    before_control: &ResponseDistribution,
    after_exposed: &ResponseDistribution,
    after_control: &ResponseDistribution,
) -> (f64, f64) {
    (
        entropy(after_exposed) - entropy(before_exposed),
        entropy(after_control) - entropy(before_control),
    )
}

/// `2 (1 - Phi(|sigma_M / sigma_N - sqrt(M / N)|))`: how plausible the
/// subsample's spread is for a random subsample of size `M`.
pub fn sample_confidence(sigma_m: f64, sigma_n: f64, m: usize, n: usize) -> Result<f64> {
    if sigma_n <= 0.0 || !sigma_n.is_finite() {
        return Err(Error::degenerate("corpus standard deviation is zero"));
    }
    if m < 2 || n < m {
        return Err(Error::config(format!("need 2 <= M <= N, got M = {m}, N = {n}")));
    }
    let dev = (sigma_m / sigma_n - (m as f64 / n as f64).sqrt()).abs();
    Ok((2.0 * (1.0 - Normal::standard().cdf(dev))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttModel {
    Normal,
    Laplace,
}

/// `2 (1 - F(|mu| / sigma))` for the mean and standard deviation of the
/// paired differences, `F` a standard Normal or unit-scale Laplace CDF.
pub fn att_confidence(diffs: &[f64], model: AttModel) -> Result<f64> {
    if diffs.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: diffs.len(),
        });
    }
    let (mean, sd) = mean_sd(diffs);
    if sd <= 0.0 {
        return Err(Error::degenerate("differences have zero variance"));
    }
    let z = mean.abs() / sd;
    let tail = match model {
        AttModel::Normal => 1.0 - Normal::standard().cdf(z),
        AttModel::Laplace => 0.5 * (-z).exp(),
    };
    Ok((2.0 * tail).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub k: usize,
    pub upper_p: f64,
    pub lower_p: f64,
    pub two_sided_p: f64,
    /// statistic implausibly small: clusters agree better than chance
    pub under_dispersed: bool,
}

/// Two-sample t statistic of a cluster (mean difference over its pooled
/// standard error) and its degrees of freedom; `None` for clusters too small
/// or with zero variance.
pub fn cluster_t(exposed: &[f64], control: &[f64]) -> Option<(f64, f64)> {
    let (ne, nc) = (exposed.len(), control.len());
    if ne == 0 || nc == 0 || ne + nc < 3 {
        return None;
    }
    let me = exposed.iter().sum::<f64>() / ne as f64;
    let mc = control.iter().sum::<f64>() / nc as f64;
    let ss: f64 = exposed.iter().map(|x| (x - me).powi(2)).sum::<f64>()
        + control.iter().map(|x| (x - mc).powi(2)).sum::<f64>();
    let df = (ne + nc - 2) as f64;
    let pooled = (ss / df).sqrt();
    if !(pooled > 0.0) {
        return None;
    }
    Some(((me - mc) / (pooled * (1.0 / ne as f64 + 1.0 / nc as f64).sqrt()), df))
}

/// The cluster t statistic mapped to the standard normal score with the
/// same tail probability, so that squares are chi-square(1) for normal
/// responses at any cluster size.
pub fn standardized_cluster_mean(exposed: &[f64], control: &[f64]) -> Option<f64> {
    let (t, df) = cluster_t(exposed, control)?;
    let tail = StudentsT::new(0.0, 1.0, df).expect("df >= 1").cdf(-t.abs());
    let z = -Normal::standard().inverse_cdf(tail);
    Some(if t < 0.0 { -z } else { z })
}

/// Sum of squared standardized cluster statistics against `chi2_k`.
pub fn chi_square_confidence(z: &[f64]) -> Result<ChiSquareResult> {
    let z: Vec<f64> = z.iter().copied().filter(|x| x.is_finite()).collect();
    if z.is_empty() {
        return Err(Error::degenerate("no cluster with a usable statistic"));
    }
    let statistic: f64 = z.iter().map(|x| x * x).sum();
    let chi = ChiSquared::new(z.len() as f64).expect("k >= 1");
    let lower_p = chi.cdf(statistic);
    let upper_p = 1.0 - lower_p;
    Ok(ChiSquareResult {
        statistic,
        k: z.len(),
        upper_p,
        lower_p,
        two_sided_p: (2.0 * upper_p.min(lower_p)).min(1.0),
        under_dispersed: lower_p < 0.025,
    })
}

/// Adjusted Fisher-Pearson skewness.
pub fn skewness(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return Err(Error::degenerate("zero variance"));
    }
    let g1 = m3 / m2.powf(1.5);
    Ok((nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub iterations: usize,
    pub seed: u64,
    pub lift: f64,
    pub mu_lift: f64,
    pub sigma_mu: f64,
    /// `2 (1 - Phi(|lift - mu_lift| / sigma_mu))`
    pub p_value: f64,
    /// `2 (1 - Phi(|lift| / sigma_mu))`, against a zero lift
    pub p_zero: f64,
    /// `lift -/+ 1.96 sigma_mu`
    pub ci95: (f64, f64),
    pub percentile95: (f64, f64),
}

impl BootstrapResult {
    pub fn ci_contains(&self, x: f64) -> bool {
        self.ci95.0 <= x && x <= self.ci95.1
    }
}

/// Bootstrap over two cohorts of sizes `n_e` and `n_c`: each iteration
/// draws indices with replacement within each cohort and evaluates `stat`
/// on them. Iteration `i` uses ChaCha stream `i` of `seed`, so results do
/// not depend on thread scheduling. Iterations returning NaN are skipped.
pub fn bootstrap_with<F>(n_e: usize, n_c: usize, observed: f64, b: usize, seed: u64, stat: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize], &[usize]) -> f64 + Sync,
{
    if b < MIN_BOOTSTRAP {
        return Err(Error::config(format!("bootstrap needs at least {MIN_BOOTSTRAP} iterations")));
    }
    if n_e == 0 || n_c == 0 {
        return Err(Error::degenerate("bootstrap needs two non-empty cohorts"));
    }
    let mut stats: Vec<f64> = (0..b)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n_e), Vec::with_capacity(n_c)),
            |(ie, ic), i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                ie.clear();
                ic.clear();
                ie.extend((0..n_e).map(|_| rng.random_range(0..n_e)));
                ic.extend((0..n_c).map(|_| rng.random_range(0..n_c)));
                stat(ie, ic)
            },
        )
        .collect();
    stats.retain(|x| x.is_finite());
    if stats.len() < 2 {
        return Err(Error::degenerate("bootstrap produced no usable resample"));
    }
    let (mu, sigma) = mean_sd(&stats);
    let normal = Normal::standard();
    let two_tail = |x: f64| -> f64 {
        if sigma > 0.0 {
            (2.0 * (1.0 - normal.cdf(x.abs() / sigma))).clamp(0.0, 1.0)
        } else if x == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let p_value = if sigma > 0.0 { two_tail(observed - mu) } else { 1.0 };
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| stats[((stats.len() - 1) as f64 * p).round() as usize];
    Ok(BootstrapResult {
        iterations: b,
        seed,
        lift: observed,
        mu_lift: mu,
        sigma_mu: sigma,
        p_value,
        p_zero: two_tail(observed),
        ci95: (observed - 1.96 * sigma, observed + 1.96 * sigma),
        percentile95: (q(0.025), q(0.975)),
    })
}

fn mean(xs: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
}

/// Bootstrap of the difference of cohort means.
pub fn bootstrap_lift(exposed: &[f64], control: &[f64], b: usize, seed: u64) -> Result<BootstrapResult> {
    if exposed.is_empty() || control.is_empty() {
        return Err(Error::degenerate("bootstrap needs two non-empty cohorts"));
    }
    let observed = exposed.iter().sum::<f64>() / exposed.len() as f64 - control.iter().sum::<f64>() / control.len() as f64;
    bootstrap_with(exposed.len(), control.len(), observed, b, seed, |ie, ic| {
        mean(exposed, ie) - mean(control, ic)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_delta: Option<(f64, f64)>,
    /// (corpus, matched) response variance for exposed and control
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_exposed: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_control: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_confidence_exposed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_confidence_control: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub att_normal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub att_laplace: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_square: Option<ChiSquareResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skewness_exposed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skewness_control: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
    pub notes: BTreeMap<String, String>,
}

impl QualityReport {
    pub fn standard_notes() -> BTreeMap<String, String> {
        [
            (
                "sample_confidence",
                "absolute deviation |sigma_M / sigma_N - sqrt(M / N)| inside Phi",
            ),
            ("att_confidence", "F evaluated at the standardized ratio |mu_E| / sigma_E"),
            (
                "chi_square",
                "interpretation: sum over clusters of the squared cluster mean difference over its pooled standard error",
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

/// Diagnostics of a matching: corpus against matched response
/// distributions, per-cluster confidences, and a bootstrap over clusters of
/// the exposed-count weighted lift. `responses` and `exposed` are indexed by
/// user like the match result.
pub fn diagnose_match(
    result: &MatchResult,
    responses: &[f64],
    exposed: &[bool],
    b: usize,
    seed: u64,
) -> Result<QualityReport> {
    if responses.len() != exposed.len() {
        return Err(Error::data("one exposure flag per response is required"));
    }
    let lift = matched_lift(result, responses)?;
    let pick = |flag: bool| -> Vec<f64> {
        responses.iter().zip(exposed).filter(|(_, &e)| e == flag).map(|(r, _)| *r).collect()
    };
    let (corpus_e, corpus_c) = (pick(true), pick(false));
    let mut matched_e = Vec::new();
    let mut matched_c = Vec::new();
    let mut weights_c = Vec::new();
    let mut z = Vec::new();
    for c in &result.clusters {
        let ce: Vec<f64> = c.exposed.iter().map(|&i| responses[i]).collect();
        let cc: Vec<f64> = c.control.iter().map(|&i| responses[i]).collect();
        z.extend(standardized_cluster_mean(&ce, &cc));
        matched_e.extend_from_slice(&ce);
        weights_c.extend(std::iter::repeat_n(c.control_weight, cc.len()));
        matched_c.extend(cc);
    }
    let de = ResponseDistribution::from_values(&corpus_e)?;
    let dc = ResponseDistribution::from_values(&corpus_c)?;
    let me = ResponseDistribution::from_values(&matched_e)?;
    let mc = ResponseDistribution::weighted(&matched_c, &weights_c)?;

    let mut report = QualityReport {
        entropy_delta: Some(entropy_delta(&de, &dc, &me, &mc)),
        variance_exposed: Some((de.variance, me.variance)),
        variance_control: Some((dc.variance, mc.variance)),
        sample_confidence_exposed: sample_confidence(me.sd(), de.sd(), me.count, de.count).ok(),
        sample_confidence_control: sample_confidence(mc.sd(), dc.sd(), mc.count, dc.count).ok(),
        att_normal: att_confidence(&lift.diffs(), AttModel::Normal).ok(),
        att_laplace: att_confidence(&lift.diffs(), AttModel::Laplace).ok(),
        chi_square: chi_square_confidence(&z).ok(),
        skewness_exposed: me.skewness,
        skewness_control: skewness(&matched_c).ok(),
        bootstrap: None,
        notes: QualityReport::standard_notes(),
    };
    let sizes: Vec<f64> = lift.clusters.iter().map(|c| c.n_exposed as f64).collect();
    let diffs = lift.diffs();
    report.bootstrap = bootstrap_with(diffs.len(), 1, lift.lift, b, seed, |ie, _| {
        let w: f64 = ie.iter().map(|&i| sizes[i]).sum();
        ie.iter().map(|&i| sizes[i] * diffs[i]).sum::<f64>() / w
    })
    .ok();
    report.notes.insert(
        "bootstrap".to_string(),
        "clusters resampled with replacement; statistic is the exposed-count weighted mean difference".to_string(),
    );
    Ok(report)
}
