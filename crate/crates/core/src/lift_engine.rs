//! Visit acceleration and lift.
//!
//! The response of a device at epoch `j` is a kernel-weighted difference of
//! its daily visits after and before `j`. Cohort expectations average the
//! responses of the active devices per epoch, then average over epochs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{bootstrap_with, BootstrapResult, QualityReport};
use crate::visit_engine::VisitSeries;

/// Below this magnitude of the control expectation the percentage lift is
/// not reported.
pub const LIFT_P_EPSILON: f64 = 1e-9;

/// Quasi-Laplace weights `w_k = e^{-k}` for `k` in `[0, M)` and
/// `w_k = -e^{k+1}` for `k` in `[-M, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightKernel {
    m: usize,
    /// `w_0 .. w_{M-1}`; the negative half mirrors it
    positive: Vec<f64>,
}

pub fn make_kernel(m: usize) -> Result<WeightKernel> {
    if m < 1 {
        return Err(Error::config("kernel half-width M must be >= 1"));
    }
    Ok(WeightKernel {
        m,
        positive: (0..m).map(|k| (-(k as f64)).exp()).collect(),
    })
}

impl WeightKernel {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn weight(&self, k: i64) -> f64 {
        let m = self.m as i64;
        if (0..m).contains(&k) {
            self.positive[k as usize]
        } else if (-m..0).contains(&k) {
            -self.positive[(-1 - k) as usize]
        } else {
            0.0
        }
    }

    /// `(k, w_k)` for `k` in `[-M, M)`.
    pub fn weights(&self) -> Vec<(i64, f64)> {
        let m = self.m as i64;
        (-m..m).map(|k| (k, self.weight(k))).collect()
    }

    /// Response to a unit step in daily visits that happened `lag` days
    /// before the evaluated epoch (`lag >= 0`).
    pub fn step_gain(&self, lag: i64) -> f64 {
        if lag < 0 || lag >= self.m as i64 {
            return 0.0;
        }
        self.positive[lag as usize..].iter().sum()
    }
}

/// `sum_k w_k V(j + k)` evaluated pairwise as
/// `sum_{k >= 0} w_k (V(j + k) - V(j - 1 - k))`, which makes the response
/// of a constant series exactly zero. Days outside the stored series read
/// as zero.
pub fn response_value(series: &VisitSeries, epoch: i64, kernel: &WeightKernel) -> f64 {
    kernel
        .positive
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let k = k as i64;
            w * (series.at(epoch + k) - series.at(epoch - 1 - k))
        })
        .sum()
}

/// A device counts at epoch `j` from its first-seen day on, until `M` days
/// after its last impression.
pub fn is_active(first_seen: i64, last_impression: i64, epoch: i64, m: usize) -> bool {
    first_seen <= epoch && last_impression >= epoch - m as i64
}

/// Response at `epoch` if the device is active there, using the series'
/// own first-seen day and last impression.
pub fn response(series: &VisitSeries, epoch: i64, kernel: &WeightKernel) -> Option<f64> {
    let fs = series.first_seen?;
    let last = series.last_impression?;
    is_active(fs, last, epoch, kernel.m).then(|| response_value(series, epoch, kernel))
}

/// Response at the device's first-seen day `fts`.
pub fn fts_response(series: &VisitSeries, fts: i64, kernel: &WeightKernel) -> Option<f64> {
    let last = series.last_impression?;
    is_active(fts, last, fts, kernel.m).then(|| response_value(series, fts, kernel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub device_id: String,
    pub epoch: i64,
    pub value: f64,
}

/// All responses of one cohort over the flight. Each device is active on
/// one contiguous run of epochs, stored as `(start, len)` into `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortResponses {
    ids: Vec<String>,
    fts: Vec<i64>,
    spans: Vec<(u32, u32)>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    days: usize,
    kernel: WeightKernel,
    visit_total: f64,
    post_days: f64,
}

impl CohortResponses {
    /// `fts[i]` is the first-seen day assigned to `series[i]` (actual for
    /// exposed devices, imputed or first impression for control).
    pub fn build(series: &[&VisitSeries], fts: &[i64], kernel: &WeightKernel) -> Result<Self> {
        if series.len() != fts.len() {
            return Err(Error::data("one first-seen day is needed per device"));
        }
        let days = match series.first() {
            Some(s) => s.flight.days as usize,
            None => 0,
        };
        let mut out = CohortResponses {
            ids: Vec::with_capacity(series.len()),
            fts: Vec::with_capacity(series.len()),
            spans: Vec::with_capacity(series.len()),
            offsets: Vec::with_capacity(series.len()),
            values: Vec::new(),
            days,
            kernel: kernel.clone(),
            visit_total: 0.0,
            post_days: 0.0,
        };
        for (s, &xi) in series.iter().zip(fts) {
            if s.flight.days as usize != days {
                return Err(Error::data("devices come from different flights"));
            }
            let start = xi.max(0);
            let end = match s.last_impression {
                Some(last) => (last + kernel.m as i64).min(days as i64 - 1),
                None => -1,
            };
            let len = (end - start + 1).max(0);
            out.ids.push(s.device_id.clone());
            out.fts.push(xi);
            out.offsets.push(out.values.len());
            out.spans.push((start.min(days as i64) as u32, len as u32));
            for j in start..start + len {
                out.values.push(response_value(s, j, kernel));
            }
            out.visit_total += s.total_in_flight();
            out.post_days += (days as i64 - xi.max(0)).max(0) as f64;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fts(&self) -> &[i64] {
        &self.fts
    }

    /// Total in-flight visit weight of the cohort.
    pub fn visit_total(&self) -> f64 {
        self.visit_total
    }

    /// Sum over devices of the flight days from first seen to the end.
    pub fn post_days(&self) -> f64 {
        self.post_days
    }

    pub fn device_values(&self, i: usize) -> (i64, &[f64]) {
        let (start, len) = self.spans[i];
        let off = self.offsets[i];
        (start as i64, &self.values[off..off + len as usize])
    }

    pub fn records(&self) -> impl Iterator<Item = ResponseRecord> + '_ {
        (0..self.len()).flat_map(move |i| {
            let (start, vals) = self.device_values(i);
            vals.iter().enumerate().map(move |(o, &v)| ResponseRecord {
                device_id: self.ids[i].clone(),
                epoch: start + o as i64,
                value: v,
            })
        })
    }

    /// Per-epoch response sums and active counts over the devices listed in
    /// `idx` (with repetition), or over all devices.
    pub fn epoch_totals(&self, idx: Option<&[usize]>) -> (Vec<f64>, Vec<f64>) {
        let mut sums = vec![0.0; self.days];
        let mut delta = vec![0.0; self.days + 1];
        let mut add = |i: usize| {
            let (start, vals) = self.device_values(i);
            let s = start as usize;
            for (acc, v) in sums[s..s + vals.len()].iter_mut().zip(vals) {
                *acc += v;
            }
            delta[s] += 1.0;
            delta[s + vals.len()] -= 1.0;
        };
        match idx {
            Some(idx) => idx.iter().for_each(|&i| add(i)),
            None => (0..self.len()).for_each(add),
        }
        let mut counts = Vec::with_capacity(self.days);
        let mut running = 0.0;
        for d in &delta[..self.days] {
            running += d;
            counts.push(running);
        }
        (sums, counts)
    }

    /// Two-level expectation of a unit visit-rate step at each device's
    /// first-seen day, under the same activity pattern.
    pub fn unit_step_gain(&self) -> Option<f64> {
        let mut sums = vec![0.0; self.days];
        let mut counts = vec![0.0; self.days];
        for i in 0..self.len() {
            let (start, vals) = self.device_values(i);
            for o in 0..vals.len() {
                let j = start + o as i64;
                sums[j as usize] += self.kernel.step_gain(j - self.fts[i]);
                counts[j as usize] += 1.0;
            }
        }
        two_level_mean(&sums, &counts)
    }
}

/// Mean over epochs with at least one active device of the per-epoch mean.
pub fn two_level_mean(sums: &[f64], counts: &[f64]) -> Option<f64> {
    let mut acc = 0.0;
    let mut epochs = 0usize;
    for (s, c) in sums.iter().zip(counts) {
        if *c > 0.0 {
            acc += s / c;
            epochs += 1;
        }
    }
    (epochs > 0).then(|| acc / epochs as f64)
}

/// `(1/T) sum_i (1/N_i) sum_j r(d_j, e_i)`, where `T` counts the epochs
/// with `N_i > 0`.
pub fn cohort_expectation(c: &CohortResponses) -> Result<f64> {
    let (sums, counts) = c.epoch_totals(None);
    two_level_mean(&sums, &counts).ok_or_else(|| Error::degenerate("cohort has no active device-epoch"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLift {
    pub epoch: i64,
    pub exposed_mean: Option<f64>,
    pub control_mean: Option<f64>,
    pub n_exposed: usize,
    pub n_control: usize,
    pub lift: Option<f64>,
}

/// Per-epoch exposed mean minus control mean.
pub fn lift_timeseries(exposed: &CohortResponses, control: &CohortResponses) -> Vec<EpochLift> {
    let (se, ce) = exposed.epoch_totals(None);
    let (sc, cc) = control.epoch_totals(None);
    let days = exposed.days.max(control.days);
    (0..days)
        .map(|j| {
            let me = (ce.get(j).copied().unwrap_or(0.0) > 0.0).then(|| se[j] / ce[j]);
            let mc = (cc.get(j).copied().unwrap_or(0.0) > 0.0).then(|| sc[j] / cc[j]);
            EpochLift {
                epoch: j as i64,
                exposed_mean: me,
                control_mean: mc,
                n_exposed: ce.get(j).copied().unwrap_or(0.0) as usize,
                n_control: cc.get(j).copied().unwrap_or(0.0) as usize,
                lift: me.zip(mc).map(|(a, b)| a - b),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub lift: f64,
    pub exposed_expectation: f64,
    pub control_expectation: f64,
    /// `100 * lift / E[r|C]`; `None` when the control expectation is
    /// within `LIFT_P_EPSILON` of zero
    pub lift_p: Option<f64>,
    pub lift_p_unstable: bool,
    pub lift_v: Option<f64>,
    /// `lift / g`, the per-day visit-rate change per exposed device
    #[serde(default)]
    pub rate_change: Option<f64>,
    pub n_exposed: usize,
    pub n_control: usize,
    pub per_epoch: Vec<EpochLift>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<QualityReport>,
    pub notes: BTreeMap<String, String>,
}

pub const LIFT_V_NOTE: &str = "lift / g is the per-day visit-rate change, g being the two-level \
    expectation of a unit step at each exposed device's first-seen day; lift_v = 100 * (lift / g) * \
    (exposed post-first-seen device-days) / (in-flight visit weight of both cohorts)";

pub fn percent_lift(lift: f64, control: f64) -> Option<f64> {
    (control.abs() >= LIFT_P_EPSILON).then(|| 100.0 * lift / control)
}

/// `E[r|E] - E[r|C]` with the presentation measures.
pub fn general_lift(exposed: &CohortResponses, control: &CohortResponses) -> Result<LiftReport> {
    if exposed.is_empty() || control.is_empty() {
        return Err(Error::degenerate("both cohorts need at least one device"));
    }
    let e = cohort_expectation(exposed)?;
    let c = cohort_expectation(control)?;
    let lift = e - c;
    let lift_p = percent_lift(lift, c);
    let total = exposed.visit_total + control.visit_total;
    let rate_change = exposed.unit_step_gain().filter(|g| *g > 0.0).map(|g| lift / g);
    let lift_v = rate_change
        .filter(|_| total > 0.0)
        .map(|r| 100.0 * r * exposed.post_days / total);
    let mut notes = BTreeMap::new();
    notes.insert("lift_v".to_string(), LIFT_V_NOTE.to_string());
    notes.insert("kernel_m".to_string(), exposed.kernel.m.to_string());
    Ok(LiftReport {
        lift,
        exposed_expectation: e,
        control_expectation: c,
        lift_p,
        lift_p_unstable: lift_p.is_none(),
        lift_v,
        rate_change,
        n_exposed: exposed.len(),
        n_control: control.len(),
        per_epoch: lift_timeseries(exposed, control),
        bootstrap: None,
        diagnostics: None,
        notes,
    })
}

/// Resamples devices with replacement within each cohort and recomputes
/// the two-level lift.
pub fn bootstrap_general_lift(
    exposed: &CohortResponses,
    control: &CohortResponses,
    observed: f64,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_with(exposed.len(), control.len(), observed, b, seed, |ie, ic| {
        let (se, ce) = exposed.epoch_totals(Some(ie));
        let (sc, cc) = control.epoch_totals(Some(ic));
        match (two_level_mean(&se, &ce), two_level_mean(&sc, &cc)) {
            (Some(a), Some(b)) => a - b,
            _ => f64::NAN,
        }
    })
}

/// Draws a first-seen day for each control device from the exposed
/// first-seen days that fall inside the device's activity span
/// `[first, last]`. Picking uniformly among those values is the same as
/// resampling the exposed distribution until a feasible day comes up.
/// Devices with no feasible day get `None`.
pub fn impute_control_fts(spans: &[(Option<i64>, Option<i64>)], exposed_fts: &[i64], seed: u64) -> Vec<Option<i64>> {
    let mut sorted = exposed_fts.to_vec();
    sorted.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spans
        .iter()
        .map(|span| {
            let (Some(first), Some(last)) = *span else {
                return None;
            };
            let lo = sorted.partition_point(|&x| x < first);
            let hi = sorted.partition_point(|&x| x <= last);
            (hi > lo).then(|| sorted[rng.random_range(lo..hi)])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedLift {
    pub lift: f64,
    pub sd: f64,
    pub se: f64,
    pub n_pairs: usize,
    pub seed: u64,
    /// control positions paired with exposed 0, 1, ...
    pub pairing: Vec<usize>,
}

/// Subsamples control to the exposed count, pairs at random, and averages
/// the paired differences.
pub fn balanced_lift(exposed: &[f64], control: &[f64], seed: u64) -> Result<BalancedLift> {
    if exposed.is_empty() {
        return Err(Error::degenerate("no exposed device has a response"));
    }
    if control.len() < exposed.len() {
        return Err(Error::degenerate(format!(
            "balanced lift needs at least as many control ({}) as exposed ({}) devices",
            control.len(),
            exposed.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairing = rand::seq::index::sample(&mut rng, control.len(), exposed.len()).into_vec();
    pairing.shuffle(&mut rng);
    let diffs: Vec<f64> = exposed.iter().zip(&pairing).map(|(e, &c)| e - control[c]).collect();
    let n = diffs.len() as f64;
    let lift = diffs.iter().sum::<f64>() / n;
    let sd = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - lift).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BalancedLift {
        lift,
        sd,
        se: sd / n.sqrt(),
        n_pairs: diffs.len(),
        seed,
        pairing,
    })
}

/// Plot scale: linear on `[-1, 1]`, `sign(v) (1 + log10 |v|)` beyond.
pub fn display_scale(v: f64) -> f64 {
    if v.abs() <= 1.0 {
        v
    } else {
        v.signum() * (1.0 + v.abs().log10())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visit_engine::FlightWindow;

    fn flight(days: u32, m: u32) -> FlightWindow {
        FlightWindow::new(0, days, m).unwrap()
    }

    /// Series from flight-day values; margin days copy the nearest edge.
    fn series(id: &str, m: u32, values: &[f64]) -> VisitSeries {
        let f = flight(values.len() as u32, m);
        let mut all = vec![values[0]; m as usize];
        all.extend_from_slice(values);
        all.extend(std::iter::repeat_n(*values.last().unwrap(), m as usize));
        VisitSeries::from_counts(id, f, all).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let k1 = make_kernel(1).unwrap();
        assert_eq!(k1.weights(), vec![(-1, -1.0), (0, 1.0)]);
        let k2 = make_kernel(2).unwrap();
        let e1 = (-1.0f64).exp();
        assert_eq!(k2.weights(), vec![(-2, -e1), (-1, -1.0), (0, 1.0), (1, e1)]);
        assert!((e1 - 0.36788).abs() < 1e-5);
        let k7 = make_kernel(7).unwrap();
        let pairwise: f64 = (0..7).map(|k| k7.weight(k) + k7.weight(-(1 + k))).sum();
        assert_eq!(pairwise, 0.0);
        for k in 0..7 {
            assert_eq!(k7.weight(k), -k7.weight(-(1 + k)));
        }
        assert!(make_kernel(0).is_err());
    }

    #[test]
    fn response_examples() {
        let k = make_kernel(2).unwrap();
        let flat = series("d", 2, &[3.0; 10]);
        for j in 0..10 {
            assert_eq!(response_value(&flat, j, &k), 0.0);
        }
        let mut step = vec![0.0; 5];
        step.extend([1.0; 5]);
        let s = series("d", 2, &step);
        assert!((response_value(&s, 5, &k) - (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        let zero = series("d", 2, &[0.0; 10]);
        assert_eq!(response_value(&zero, 4, &k), 0.0);
    }

    #[test]
    fn activity_rule() {
        let k = make_kernel(2).unwrap();
        let s = series("d", 2, &[1.0; 10]).with_activity(Some(3), Some(0), Some(5));
        assert!(response(&s, 2, &k).is_none());
        assert!(response(&s, 3, &k).is_some());
        assert!(response(&s, 7, &k).is_some());
        assert!(response(&s, 8, &k).is_none());
        let unseen = series("d", 2, &[1.0; 10]);
        assert!(response(&unseen, 3, &k).is_none());
    }

    fn cohort(values: &[(&[f64], i64, i64)], m: usize) -> CohortResponses {
        let k = make_kernel(m).unwrap();
        let ss: Vec<VisitSeries> = values
            .iter()
            .enumerate()
            .map(|(i, (v, _, last))| series(&format!("d{i}"), m as u32, v).with_activity(None, Some(0), Some(*last)))
            .collect();
        let refs: Vec<&VisitSeries> = ss.iter().collect();
        let fts: Vec<i64> = values.iter().map(|v| v.1).collect();
        CohortResponses::build(&refs, &fts, &k).unwrap()
    }

    #[test]
    fn expectation_examples() {
        let zero = cohort(&[(&[0.0; 6], 0, 5), (&[0.0; 6], 2, 5)], 1);
        assert_eq!(cohort_expectation(&zero).unwrap(), 0.0);
        // single device active at the last epoch only: value 2 - 0
        let single = cohort(&[(&[0.0, 0.0, 0.0, 0.0, 0.0, 2.0], 5, 5)], 1);
        assert_eq!(cohort_expectation(&single).unwrap(), 2.0);
        assert!((two_level_mean(&[0.1, 0.6], &[1.0, 2.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(two_level_mean(&[0.0], &[0.0]).is_none());
        let empty = cohort(&[(&[0.0; 6], 3, -5)], 1);
        assert!(cohort_expectation(&empty).is_err());
    }

    #[test]
    fn cohort_records_match_direct_responses() {
        let k = make_kernel(2).unwrap();
        let v = [0.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0, 3.0];
        let s = series("d", 2, &v).with_activity(None, Some(0), Some(3));
        let c = CohortResponses::build(&[&s], &[1], &k).unwrap();
        let recs: Vec<ResponseRecord> = c.records().collect();
        assert_eq!(recs.first().unwrap().epoch, 1);
        assert_eq!(recs.last().unwrap().epoch, 5);
        for r in recs {
            assert_eq!(r.value, response_value(&s, r.epoch, &k));
        }
    }

    #[test]
    fn general_lift_and_percentages() {
        let e = cohort(&[(&[0.0, 0.0, 1.0, 1.0], 2, 3)], 1);
        let c = cohort(&[(&[0.0, 0.0, 0.0, 0.0], 2, 3)], 1);
        let r = general_lift(&e, &c).unwrap();
        assert_eq!(r.lift, r.exposed_expectation);
        assert!(r.lift_p_unstable && r.lift_p.is_none());
        let same = general_lift(&e, &e).unwrap();
        assert_eq!(same.lift, 0.0);
        assert_eq!(percent_lift(0.01, 0.01), Some(100.0));
        assert_eq!(percent_lift(0.01, 1e-10), None);
        let swapped = general_lift(&c, &e).unwrap();
        assert_eq!(swapped.lift, -r.lift);
    }

    #[test]
    fn unit_step_gain_for_single_device() {
        // one device seen at day 2 of 4, M = 2: epochs 2, 3 active
        let e = cohort(&[(&[0.0; 4], 2, 3)], 2);
        let k = make_kernel(2).unwrap();
        let expected = (k.step_gain(0) + k.step_gain(1)) / 2.0;
        assert!((e.unit_step_gain().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn single_epoch_series_equals_general_lift() {
        let e = cohort(&[(&[1.0], 0, 0), (&[2.0], 0, 0)], 1);
        let c = cohort(&[(&[0.5], 0, 0)], 1);
        let r = general_lift(&e, &c).unwrap();
        assert_eq!(r.per_epoch.len(), 1);
        assert_eq!(r.per_epoch[0].lift, Some(r.lift));
    }

    #[test]
    fn imputation_examples() {
        let spans = vec![(Some(0), Some(9)), (Some(3), Some(4)), (Some(5), Some(9)), (None, None)];
        let out = impute_control_fts(&spans, &[1, 1, 1], 9);
        assert_eq!(out, vec![Some(1), None, None, None]);
        let exposed = [0, 2, 4, 6, 8];
        let a = impute_control_fts(&spans, &exposed, 42);
        assert_eq!(a, impute_control_fts(&spans, &exposed, 42));
        assert_eq!(a[1], Some(4));
        assert!(matches!(a[2], Some(6) | Some(8)));
    }

    #[test]
    fn balanced_examples() {
        let xs = [0.1, -0.2, 0.3, 0.0];
        let b = balanced_lift(&xs, &xs, 5).unwrap();
        assert_eq!(b.n_pairs, 4);
        assert!(b.lift.abs() < 1e-15);
        assert!(balanced_lift(&xs, &xs[..2], 5).is_err());
        assert_eq!(balanced_lift(&xs, &[0.0; 10], 3).unwrap(), balanced_lift(&xs, &[0.0; 10], 3).unwrap());
    }

    #[test]
    fn display_scale_examples() {
        assert_eq!(display_scale(0.5), 0.5);
        assert_eq!(display_scale(-1.0), -1.0);
        assert!((display_scale(100.0) - 3.0).abs() < 1e-15);
        assert!((display_scale(-10.0) + 2.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constant_shift_leaves_responses_unchanged(
                v in prop::collection::vec(0u8..5, 12),
                c in 0u8..5,
                m in 1usize..5,
                j in 0i64..12,
            ) {
                let k = make_kernel(m).unwrap();
                let base: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                let shifted: Vec<f64> = base.iter().map(|x| x + c as f64).collect();
                let a = series("a", m as u32, &base);
                let b = series("b", m as u32, &shifted);
                prop_assert_eq!(response_value(&a, j, &k), response_value(&b, j, &k));
            }

            #[test]
            fn cohort_swap_negates_lift(
                e in prop::collection::vec((prop::collection::vec(0.0..3.0f64, 8), 0i64..8), 1..6),
                c in prop::collection::vec((prop::collection::vec(0.0..3.0f64, 8), 0i64..8), 1..6),
            ) {
                let ev: Vec<(&[f64], i64, i64)> = e.iter().map(|(v, f)| (v.as_slice(), *f, 7)).collect();
                let cv: Vec<(&[f64], i64, i64)> = c.iter().map(|(v, f)| (v.as_slice(), *f, 7)).collect();
                let (ce, cc) = (cohort(&ev, 2), cohort(&cv, 2));
                let ab = general_lift(&ce, &cc).unwrap();
                let ba = general_lift(&cc, &ce).unwrap();
                prop_assert_eq!(ab.lift, -ba.lift);
            }

            #[test]
            fn lift_p_never_reported_near_zero_control(lift in -1.0..1.0f64, c in -1e-9..1e-9f64) {
                prop_assume!(c.abs() < 1e-9);
                prop_assert!(percent_lift(lift, c).is_none());
            }
        }
    }
}
