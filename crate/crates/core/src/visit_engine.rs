//! Impressions to hits, hits to visits, visits to daily series.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, LogNormal, Normal};

use crate::error::{Error, Result};
use crate::geo_grid::{distance, CellIndex, GeoPoint, GridConfig};
use crate::location_graph::LocationGraph;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Minimum sample count for [`fit_stochastic`].
pub const MIN_FIT_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Campaign delivery: the impression carried the advert.
    #[serde(rename = "ND")]
    Nd,
    #[serde(rename = "LRTB")]
    Lrtb,
    #[serde(rename = "URTB")]
    Urtb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawImpression", into = "RawImpression")]
pub struct Impression {
    pub device_id: String,
    pub t: i64,
    pub loc: Option<GeoPoint>,
    pub source: Source,
    pub exposed_campaign: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawImpression {
    device_id: String,
    t: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exposed_campaign: Option<String>,
}

impl TryFrom<RawImpression> for Impression {
    type Error = Error;

    fn try_from(r: RawImpression) -> Result<Self> {
        let loc = match (r.lat, r.lon) {
            (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon)?),
            (None, None) => None,
            _ => return Err(Error::data("impression has only one of lat/lon")),
        };
        Ok(Impression {
            device_id: r.device_id,
            t: r.t,
            loc,
            source: r.source,
            exposed_campaign: r.exposed_campaign,
        })
    }
}

impl From<Impression> for RawImpression {
    fn from(i: Impression) -> Self {
        RawImpression {
            device_id: i.device_id,
            t: i.t,
            lat: i.loc.map(|p| p.lat()),
            lon: i.loc.map(|p| p.lon()),
            source: i.source,
            exposed_campaign: i.exposed_campaign,
        }
    }
}

/// A closed polygon around one location, vertices in order (the ring is
/// closed implicitly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub pid: String,
    pub ring: Vec<GeoPoint>,
}

impl Parcel {
    pub fn new(pid: impl Into<String>, ring: Vec<GeoPoint>) -> Result<Self> {
        let p = Parcel {
            pid: pid.into(),
            ring,
        };
        p.validate()?;
        Ok(p)
    }

    fn xy(&self) -> Vec<(f64, f64)> {
        self.ring.iter().map(|p| (p.lon(), p.lat())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ring.len();
        if n < 3 {
            return Err(Error::config(format!("parcel `{}` needs at least 3 vertices", self.pid)));
        }
        let xy = self.xy();
        let area2: f64 = (0..n)
            .map(|i| {
                let (a, b) = (xy[i], xy[(i + 1) % n]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        if area2.abs() < 1e-18 {
            return Err(Error::config(format!("parcel `{}` has zero area", self.pid)));
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(xy[i], xy[(i + 1) % n], xy[j], xy[(j + 1) % n]) {
                    return Err(Error::config(format!("parcel `{}` is self-intersecting", self.pid)));
                }
            }
        }
        Ok(())
    }

    /// Ray casting in (lon, lat); points on an edge count as inside.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let xy = self.xy();
        let (px, py) = (p.lon(), p.lat());
        let n = xy.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (xy[i], xy[(i + 1) % n]);
            if on_segment(a, b, (px, py)) {
                return true;
            }
            if (a.1 > py) != (b.1 > py) {
                let x = a.0 + (py - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if px < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn centroid(&self) -> GeoPoint {
        let n = self.ring.len() as f64;
        let lat = self.ring.iter().map(|p| p.lat()).sum::<f64>() / n;
        let lon = self.ring.iter().map(|p| p.lon()).sum::<f64>() / n;
        GeoPoint::new(lat, lon).expect("mean of valid points is valid")
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &self.ring {
            b.0 = b.0.min(p.lat());
            b.1 = b.1.min(p.lon());
            b.2 = b.2.max(p.lat());
            b.3 = b.3.max(p.lon());
        }
        b
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    cross(a, b, p).abs() <= 1e-12 * len.max(1e-12)
        && p.0 >= a.0.min(b.0) - 1e-12
        && p.0 <= a.0.max(b.0) + 1e-12
        && p.1 >= a.1.min(b.1) - 1e-12
        && p.1 <= a.1.max(b.1) + 1e-12
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

/// Inverse Gaussian CDF.
pub fn ig_cdf(x: f64, mu: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let std = Normal::standard();
    let s = (lambda / x).sqrt();
    let first = std.cdf(s * (x / mu - 1.0));
    // exp(2 lambda / mu) * Phi(-z) computed in log space
    let z = s * (x / mu + 1.0);
    let second = (2.0 * lambda / mu + ln_phi(-z)).exp();
    (first + second).clamp(0.0, 1.0)
}

pub fn ig_survival(x: f64, mu: f64, lambda: f64) -> f64 {
    1.0 - ig_cdf(x, mu, lambda)
}

pub fn ig_pdf(x: f64, mu: f64, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    (lambda / (2.0 * std::f64::consts::PI * x.powi(3))).sqrt()
        * (-lambda * (x - mu).powi(2) / (2.0 * mu * mu * x)).exp()
}

/// log of the standard normal CDF, accurate in the far left tail.
fn ln_phi(z: f64) -> f64 {
    if z > -30.0 {
        Normal::standard().cdf(z).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// Distance-to-weight model for probabilistic hits. Within `r_m` a hit is
/// certain; in `(R, 1.5R]` the weight is the inverse Gaussian survival; in
/// `(1.5R, 3R]` the log-normal survival; beyond that there is no hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticModel {
    pub r_m: f64,
    pub ig_mu: f64,
    pub ig_lambda: f64,
    pub ln_mu: f64,
    pub ln_sigma: f64,
}

impl StochasticModel {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.r_m, self.ig_mu, self.ig_lambda, self.ln_sigma]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0)
            && self.ln_mu.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config("stochastic hit parameters must be finite and positive"))
        }
    }

    pub fn reach_m(&self) -> f64 {
        3.0 * self.r_m
    }

    pub fn weight(&self, d: f64) -> Option<f64> {
        let r = self.r_m;
        let w = if d <= r {
            1.0
        } else if d <= 1.5 * r {
            ig_survival(d, self.ig_mu, self.ig_lambda)
        } else if d <= 3.0 * r {
            self.ln_survival(d)
        } else {
            return None;
        };
        (w > 0.0).then_some(w)
    }

    fn ln_survival(&self, d: f64) -> f64 {
        let ln = LogNormal::new(self.ln_mu, self.ln_sigma).expect("validated parameters");
        1.0 - ln.cdf(d)
    }

    /// Jumps of the piecewise weight at `R` and `1.5R` (left minus right).
    pub fn discontinuities(&self) -> (f64, f64) {
        let r = self.r_m;
        let at_r = 1.0 - ig_survival(r, self.ig_mu, self.ig_lambda);
        let at_band = ig_survival(1.5 * r, self.ig_mu, self.ig_lambda) - self.ln_survival(1.5 * r);
        (at_r, at_band)
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Moment fit of an inverse Gaussian: `mu = mean`, `lambda = mean^3 / var`.
pub fn fit_inverse_gaussian(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(Error::data("inverse Gaussian samples must be positive"));
    }
    let (mean, var) = mean_var(samples);
    if var <= 0.0 {
        return Err(Error::degenerate("samples have zero variance"));
    }
    Ok((mean, mean.powi(3) / var))
}

/// Fits the stochastic hit model on observed hit distances. Samples beyond
/// `3R` are ignored.
pub fn fit_stochastic(distances: &[f64], r_m: f64) -> Result<StochasticModel> {
    if !(r_m.is_finite() && r_m > 0.0) {
        return Err(Error::config("R must be positive"));
    }
    let kept: Vec<f64> = distances
        .iter()
        .copied()
        .filter(|d| d.is_finite() && *d > 0.0 && *d <= 3.0 * r_m)
        .collect();
    let (ig_mu, ig_lambda) = fit_inverse_gaussian(&kept)?;
    let logs: Vec<f64> = kept.iter().map(|d| d.ln()).collect();
    let (ln_mu, ln_var) = mean_var(&logs);
    if ln_var <= 0.0 {
        return Err(Error::degenerate("samples have zero variance"));
    }
    let model = StochasticModel {
        r_m,
        ig_mu,
        ig_lambda,
        ln_mu,
        ln_sigma: ln_var.sqrt(),
    };
    let (jump_r, jump_band) = model.discontinuities();
    log::debug!("stochastic fit: jump at R {jump_r:.4}, at 1.5R {jump_band:.4}");
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum HitRule {
    Radius { k_m: f64 },
    Parcel { parcels: Vec<Parcel> },
    Stochastic(StochasticModel),
}

impl HitRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            HitRule::Radius { k_m } if !(k_m.is_finite() && *k_m > 0.0) => {
                Err(Error::config("radius must be positive"))
            }
            HitRule::Radius { .. } => Ok(()),
            HitRule::Parcel { parcels } => parcels.iter().try_for_each(Parcel::validate),
            HitRule::Stochastic(m) => m.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub device_id: String,
    pub t: i64,
    pub pid: String,
    pub weight: f64,
    /// meters to the matched location (0 for parcel hits)
    pub distance_m: f64,
}

/// Campaign locations indexed by grid cell, ready for hit lookups.
#[derive(Debug, Clone)]
pub struct HitDetector {
    grid: GridConfig,
    rule: HitRule,
    cells: std::collections::BTreeMap<CellIndex, Vec<(String, GeoPoint)>>,
}

impl HitDetector {
    /// `campaign` restricts which graph locations count; `None` means every
    /// location that is not a prior node.
    pub fn new(graph: &LocationGraph, campaign: Option<&BTreeSet<String>>, rule: HitRule) -> Result<Self> {
        rule.validate()?;
        if let Some(set) = campaign {
            if let Some(missing) = set.iter().find(|p| !graph.contains(p)) {
                return Err(Error::UnknownPid(missing.clone()));
            }
        }
        let grid = *graph.grid();
        let mut cells: std::collections::BTreeMap<CellIndex, Vec<(String, GeoPoint)>> = Default::default();
        let mut max_lat: f64 = 0.0;
        for loc in graph.locations() {
            let member = match campaign {
                Some(set) => set.contains(&loc.pid),
                None => !loc.is_prior_node,
            };
            if member {
                max_lat = max_lat.max(loc.point.lat().abs());
                cells
                    .entry(grid.cell_of(&loc.point))
                    .or_default()
                    .push((loc.pid.clone(), loc.point));
            }
        }
        let reach = match &rule {
            HitRule::Radius { k_m } => *k_m,
            HitRule::Stochastic(m) => m.reach_m(),
            HitRule::Parcel { .. } => 0.0,
        };
        // impressions can sit one reach further from the equator than the
        // locations they hit
        let slack = reach / 111_000.0;
        let limit = grid.max_window_radius_m((max_lat + slack).min(90.0));
        if reach > limit {
            return Err(Error::config(format!(
                "hit reach {reach} m exceeds the {limit:.1} m covered by a 3x3 cell window"
            )));
        }
        Ok(HitDetector { grid, rule, cells })
    }

    pub fn rule(&self) -> &HitRule {
        &self.rule
    }

    /// Nearest campaign location in the 3x3 window, by distance then pid.
    pub fn nearest(&self, p: &GeoPoint) -> Option<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for cell in self.grid.window(self.grid.cell_of(p)) {
            for (pid, q) in self.cells.get(&cell).into_iter().flatten() {
                let d = distance(p, q);
                let better = match best {
                    None => true,
                    Some((bp, bd)) => d < bd || (d == bd && pid.as_str() < bp),
                };
                if better {
                    best = Some((pid, d));
                }
            }
        }
        best
    }

    pub fn detect(&self, imp: &Impression) -> Option<Hit> {
        let p = imp.loc.as_ref()?;
        let (pid, weight, d) = match &self.rule {
            HitRule::Radius { k_m } => {
                let (pid, d) = self.nearest(p)?;
                if d >= *k_m {
                    return None;
                }
                (pid.to_string(), 1.0, d)
            }
            HitRule::Stochastic(m) => {
                let (pid, d) = self.nearest(p)?;
                (pid.to_string(), m.weight(d)?, d)
            }
            HitRule::Parcel { parcels } => {
                let parcel = parcels.iter().find(|parcel| {
                    let (lat0, lon0, lat1, lon1) = parcel.bbox();
                    (lat0..=lat1).contains(&p.lat()) && (lon0..=lon1).contains(&p.lon()) && parcel.contains(p)
                })?;
                (parcel.pid.clone(), 1.0, 0.0)
            }
        };
        Some(Hit {
            device_id: imp.device_id.clone(),
            t: imp.t,
            pid,
            weight,
            distance_m: d,
        })
    }
}

/// Single-shot hit detection against every non-prior location of `graph`.
/// Build a [`HitDetector`] once when processing many impressions.
pub fn detect_hit(imp: &Impression, graph: &LocationGraph, rule: &HitRule) -> Result<Option<Hit>> {
    Ok(HitDetector::new(graph, None, rule.clone())?.detect(imp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub device_id: String,
    pub t: i64,
    pub pid: String,
    pub weight: f64,
}

/// Lumps a device's hits into visits with greedy windows anchored at the
/// first unconsumed hit. A window becomes a visit when its summed weight
/// exceeds `h`; the visit weight is `min(1, max hit weight)` and its
/// location is that of the heaviest hit.
pub fn lump_visits(hits: &[Hit], delta_t: i64, h: f64) -> Result<Vec<Visit>> {
    if delta_t <= 0 || delta_t > SECONDS_PER_DAY {
        return Err(Error::config(format!("lumping window must be in (0, 86400] s, got {delta_t}")));
    }
    if !(h.is_finite() && h >= 0.0) {
        return Err(Error::config("lumping threshold must be >= 0"));
    }
    let mut sorted: Vec<&Hit> = hits.iter().collect();
    sorted.sort_by(|a, b| a.t.cmp(&b.t).then_with(|| a.pid.cmp(&b.pid)));
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i].t;
        let mut j = i;
        let mut sum = 0.0;
        let mut heaviest = sorted[i];
        while j < sorted.len() && sorted[j].t < start + delta_t {
            sum += sorted[j].weight;
            if sorted[j].weight > heaviest.weight {
                heaviest = sorted[j];
            }
            j += 1;
        }
        if sum > h {
            out.push(Visit {
                device_id: sorted[i].device_id.clone(),
                t: start,
                pid: heaviest.pid.clone(),
                weight: heaviest.weight.min(1.0),
            });
        }
        i = j;
    }
    Ok(out)
}

/// Flight days `[0, days)` starting at epoch second `start`, plus `margin`
/// days of series on either side for the response kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlightWindow {
    pub start: i64,
    pub days: u32,
    pub margin: u32,
}

impl FlightWindow {
    pub fn new(start: i64, days: u32, margin: u32) -> Result<Self> {
        if days == 0 {
            return Err(Error::config("flight must span at least one day"));
        }
        Ok(FlightWindow { start, days, margin })
    }

    pub fn day_index(&self, t: i64) -> i64 {
        (t - self.start).div_euclid(SECONDS_PER_DAY)
    }

    pub fn in_flight(&self, day: i64) -> bool {
        (0..self.days as i64).contains(&day)
    }

    /// Whether `day` is inside `[-margin, days + margin)`.
    pub fn in_series(&self, day: i64) -> bool {
        let m = self.margin as i64;
        (-m..self.days as i64 + m).contains(&day)
    }

    pub fn series_len(&self) -> usize {
        (self.days + 2 * self.margin) as usize
    }
}

/// Daily visit weights over `[-margin, days + margin)` plus the device's
/// activity span (all as flight day indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSeries {
    pub device_id: String,
    pub flight: FlightWindow,
    counts: Vec<f64>,
    pub first_seen: Option<i64>,
    pub first_impression: Option<i64>,
    pub last_impression: Option<i64>,
}

impl VisitSeries {
    pub fn empty(device_id: impl Into<String>, flight: FlightWindow) -> Self {
        VisitSeries {
            device_id: device_id.into(),
            flight,
            counts: vec![0.0; flight.series_len()],
            first_seen: None,
            first_impression: None,
            last_impression: None,
        }
    }

    /// Builds a series from per-day values; `values[0]` is day `-margin`.
    pub fn from_counts(device_id: impl Into<String>, flight: FlightWindow, values: Vec<f64>) -> Result<Self> {
        if values.len() != flight.series_len() {
            return Err(Error::data(format!(
                "series has {} days, flight needs {}",
                values.len(),
                flight.series_len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::data("visit counts must be finite and >= 0"));
        }
        let mut s = VisitSeries::empty(device_id, flight);
        s.counts = values;
        Ok(s)
    }

    pub fn with_activity(mut self, first_seen: Option<i64>, first: Option<i64>, last: Option<i64>) -> Self {
        self.first_seen = first_seen;
        self.first_impression = first;
        self.last_impression = last;
        self
    }

    /// Visits on `day`; 0 outside the stored range.
    pub fn at(&self, day: i64) -> f64 {
        let idx = day + self.flight.margin as i64;
        if idx < 0 {
            return 0.0;
        }
        self.counts.get(idx as usize).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, day: i64, w: f64) -> bool {
        if !self.flight.in_series(day) {
            return false;
        }
        self.counts[(day + self.flight.margin as i64) as usize] += w;
        true
    }

    /// All stored values, starting at day `-margin`.
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn in_flight(&self) -> &[f64] {
        let m = self.flight.margin as usize;
        &self.counts[m..m + self.flight.days as usize]
    }

    pub fn total_in_flight(&self) -> f64 {
        self.in_flight().iter().sum()
    }

    pub fn is_exposed(&self) -> bool {
        self.first_seen.is_some()
    }
}

/// Sums visit weights per day. Returns the series and the number of visits
/// dropped for falling outside the flight plus margin.
pub fn daily_series(device_id: &str, visits: &[Visit], flight: FlightWindow) -> (VisitSeries, usize) {
    let mut s = VisitSeries::empty(device_id, flight);
    let mut dropped = 0;
    for v in visits {
        if !s.add(flight.day_index(v.t), v.weight) {
            dropped += 1;
        }
    }
    (s, dropped)
}

/// Everything derived from one device's impressions.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceVisits {
    pub series: VisitSeries,
    pub hits: Vec<Hit>,
    pub visits: Vec<Visit>,
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LumpParams {
    pub delta_t: i64,
    pub threshold: f64,
}

impl Default for LumpParams {
    fn default() -> Self {
        LumpParams {
            delta_t: 3_600,
            threshold: 0.0,
        }
    }
}

/// Hits, visits and the daily series for one device.
///
/// First seen is the day of the first in-flight campaign (ND) impression.
/// The activity span (first and last impression) is taken from impressions
/// that are not hits, so that for control devices it does not depend on the
/// visits being measured.
pub fn process_device(
    device_id: &str,
    impressions: &[Impression],
    detector: &HitDetector,
    lump: LumpParams,
    flight: FlightWindow,
) -> Result<DeviceVisits> {
    let mut hits = Vec::new();
    let mut first_seen: Option<i64> = None;
    let mut span: Option<(i64, i64)> = None;
    for imp in impressions {
        let day = flight.day_index(imp.t);
        if imp.source == Source::Nd && flight.in_flight(day) {
            first_seen = Some(first_seen.map_or(day, |d| d.min(day)));
        }
        match detector.detect(imp) {
            Some(hit) => hits.push(hit),
            None => {
                span = Some(span.map_or((day, day), |(a, b)| (a.min(day), b.max(day))));
            }
        }
    }
    let visits = lump_visits(&hits, lump.delta_t, lump.threshold)?;
    let (series, dropped) = daily_series(device_id, &visits, flight);
    let series = series.with_activity(first_seen, span.map(|s| s.0), span.map(|s| s.1));
    Ok(DeviceVisits {
        series,
        hits,
        visits,
        dropped,
    })
}
