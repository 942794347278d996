//! Synthetic campaigns with known ground truth.
//!
//! Every device has a latent visit propensity `z` in `[0, 1]`. Features are
//! noisy copies of `z`, the visit rate grows with `z`, and so does the slope
//! of a per-device visit trend. Exposure odds depend on the first feature
//! through `targeting_bias`, so a biased campaign reaches devices whose
//! visits were already accelerating. Exposed devices get their rate
//! multiplied by `injected_lift` from the first exposure day on.
//!
//! Devices are simulated independently from their own RNG stream, so
//! [`Scenario::simulate_device`] can be called in any order or in parallel.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_grid::GeoPoint;
use crate::location_graph::Location;
use crate::visit_engine::{FlightWindow, Impression, Source, SECONDS_PER_DAY};

pub const DEFAULT_FLIGHT_START: i64 = 1_704_067_200;
pub const CAMPAIGN_ID: &str = "campaign";
/// Visits on one day use distinct two-hour slots.
const SLOTS_PER_DAY: usize = 12;
const SLOT_SECONDS: i64 = 7_200;
const SCENARIO_STREAM: u64 = u64::MAX;

fn default_features() -> usize {
    25
}
fn default_rate_sigma() -> f64 {
    0.8
}
fn default_trend() -> f64 {
    1.0
}
fn default_margin() -> u32 {
    7
}
fn default_start() -> i64 {
    DEFAULT_FLIGHT_START
}
fn default_center() -> (f64, f64) {
    (40.75, -73.98)
}
fn default_extent() -> f64 {
    20_000.0
}
fn default_jitter() -> f64 {
    15.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMix {
    pub nd: f64,
    pub lrtb: f64,
    pub urtb: f64,
}

impl Default for SourceMix {
    fn default() -> Self {
        SourceMix {
            nd: 0.2,
            lrtb: 0.5,
            urtb: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_devices: usize,
    pub n_locations: usize,
    pub flight_days: u32,
    /// mean visits per device-day
    pub base_visit_rate: f64,
    pub exposure_fraction: f64,
    pub targeting_bias: f64,
    pub injected_lift: f64,
    /// impressions per device-day; the ND share of `source_mix` is served
    /// as campaign impressions to exposed devices only
    pub impression_rate: f64,
    #[serde(default)]
    pub source_mix: SourceMix,
    pub seed: u64,
    #[serde(default = "default_features")]
    pub n_features: usize,
    /// log-normal spread of the per-device rate
    #[serde(default = "default_rate_sigma")]
    pub rate_sigma: f64,
    /// log-rate change over the flight for `z = 1` (and its negative for
    /// `z = 0`)
    #[serde(default = "default_trend")]
    pub visit_trend: f64,
    #[serde(default = "default_margin")]
    pub margin_days: u32,
    #[serde(default = "default_start")]
    pub flight_start: i64,
    #[serde(default = "default_center")]
    pub center: (f64, f64),
    /// side of the square region holding the locations, meters
    #[serde(default = "default_extent")]
    pub extent_m: f64,
    /// sd of the visit impression position around the location, meters
    #[serde(default = "default_jitter")]
    pub jitter_m: f64,
}

impl ScenarioSpec {
    /// Null randomized experiment.
    pub fn null(n_devices: usize, seed: u64) -> Self {
        ScenarioSpec {
            n_devices,
            n_locations: 200,
            flight_days: 30,
            base_visit_rate: 0.1,
            exposure_fraction: 0.3,
            targeting_bias: 0.0,
            injected_lift: 1.0,
            impression_rate: 1.0,
            source_mix: SourceMix::default(),
            seed,
            n_features: default_features(),
            rate_sigma: default_rate_sigma(),
            visit_trend: default_trend(),
            margin_days: default_margin(),
            flight_start: DEFAULT_FLIGHT_START,
            center: default_center(),
            extent_m: default_extent(),
            jitter_m: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("base_visit_rate", self.base_visit_rate),
            ("targeting_bias", self.targeting_bias.abs()),
            ("injected_lift", self.injected_lift),
            ("impression_rate", self.impression_rate),
            ("rate_sigma", self.rate_sigma),
            ("visit_trend", self.visit_trend.abs()),
            ("extent_m", self.extent_m),
            ("jitter_m", self.jitter_m),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.exposure_fraction) {
            return Err(Error::config("exposure_fraction must be in [0, 1]"));
        }
        let m = self.source_mix;
        if [m.nd, m.lrtb, m.urtb].iter().any(|p| !(0.0..=1.0).contains(p)) || (m.nd + m.lrtb + m.urtb - 1.0).abs() > 1e-9 {
            return Err(Error::config("source_mix proportions must be in [0, 1] and sum to 1"));
        }
        if self.flight_days == 0 {
            return Err(Error::config("flight_days must be >= 1"));
        }
        if self.n_features == 0 {
            return Err(Error::config("n_features must be >= 1"));
        }
        if self.n_locations == 0 && self.base_visit_rate > 0.0 {
            return Err(Error::config("visits need at least one location"));
        }
        GeoPoint::new(self.center.0, self.center.1)?;
        Ok(())
    }

    /// Flight with the generated margin on both sides.
    pub fn flight(&self) -> FlightWindow {
        FlightWindow {
            start: self.flight_start,
            days: self.flight_days,
            margin: self.margin_days,
        }
    }

    pub fn device_id(&self, idx: usize) -> String {
        let width = self.n_devices.max(1).to_string().len();
        format!("dev{idx:0width$}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTruth {
    pub device_id: String,
    pub propensity: f64,
    pub rate: f64,
    pub home: String,
    pub exposure_probability: f64,
    pub exposed: bool,
    /// first exposure day (flight index)
    pub first_seen: Option<i64>,
    /// visits per day over `[-margin, days + margin)`
    pub visits: Vec<u32>,
    /// injected extra visits inside the flight (negative when thinned)
    pub extra_in_flight: i64,
    /// in-flight visits on and after the first exposure day, without the
    /// injected change
    pub post_base: u64,
}

impl DeviceTruth {
    pub fn visits_in_flight(&self, margin: u32, days: u32) -> u64 {
        self.visits[margin as usize..(margin + days) as usize].iter().map(|&v| v as u64).sum()
    }

    /// Visits on the margin days before the flight.
    pub fn pre_flight_visits(&self, margin: u32) -> u64 {
        self.visits[..margin as usize].iter().map(|&v| v as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceRecord {
    pub truth: DeviceTruth,
    pub features: Vec<f64>,
    pub impressions: Vec<Impression>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: ScenarioSpec,
    pub injected_lift: f64,
    pub n_devices: usize,
    pub n_exposed: usize,
    pub expected_exposed: f64,
    pub visits_in_flight: u64,
    pub extra_visits_in_flight: i64,
    /// `100 * extra / total` over in-flight visits of all devices
    pub extra_visit_pct: f64,
    pub devices: Vec<DeviceTruth>,
}

impl GroundTruth {
    pub fn from_devices(spec: &ScenarioSpec, devices: Vec<DeviceTruth>) -> Self {
        let visits: u64 = devices.iter().map(|d| d.visits_in_flight(spec.margin_days, spec.flight_days)).sum();
        let extra: i64 = devices.iter().map(|d| d.extra_in_flight).sum();
        GroundTruth {
            spec: spec.clone(),
            injected_lift: spec.injected_lift,
            n_devices: devices.len(),
            n_exposed: devices.iter().filter(|d| d.exposed).count(),
            expected_exposed: devices.iter().map(|d| d.exposure_probability).sum(),
            visits_in_flight: visits,
            extra_visits_in_flight: extra,
            extra_visit_pct: if visits > 0 {
                100.0 * extra as f64 / visits as f64
            } else {
                0.0
            },
            devices,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    spec: ScenarioSpec,
    locations: Vec<Location>,
    loadings: Vec<f64>,
    base_logit: Option<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> u64 {
    if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(rng) as u64
    } else {
        0
    }
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(SCENARIO_STREAM);
        let center = GeoPoint::new(spec.center.0, spec.center.1)?;
        let half = spec.extent_m / 2.0;
        let width = spec.n_locations.max(1).to_string().len();
        let locations = (0..spec.n_locations)
            .map(|i| {
                let p = center.offset_m(rng.random_range(-half..=half), rng.random_range(-half..=half));
                Location::new(format!("loc{i:0width$}"), p)
            })
            .collect();
        let loadings = (0..spec.n_features).map(|_| rng.random_range(0.3..0.9)).collect();
        let base_logit = (spec.exposure_fraction > 0.0 && spec.exposure_fraction < 1.0).then(|| logit(spec.exposure_fraction));
        Ok(Scenario {
            spec,
            locations,
            loadings,
            base_logit,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    fn exposure_probability(&self, x0: f64) -> f64 {
        match self.base_logit {
            Some(b) => {
                let eta = b + self.spec.targeting_bias * (x0 - 0.5);
                1.0 / (1.0 + (-eta).exp())
            }
            None => self.spec.exposure_fraction,
        }
    }

    pub fn simulate_device(&self, idx: usize) -> DeviceRecord {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64);
        let device_id = spec.device_id(idx);
        let t_days = spec.flight_days as f64;
        let margin = spec.margin_days as i64;

        let z: f64 = rng.random();
        let features: Vec<f64> = self
            .loadings
            .iter()
            .map(|&a| (a * z + (1.0 - a) * rng.random::<f64>()).clamp(0.0, 1.0))
            .collect();
        let sigma = spec.rate_sigma;
        let scale = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("sigma >= 0").sample(&mut rng);
        let rate = spec.base_visit_rate * scale * (0.5 + z);
        let home_idx = if self.locations.is_empty() {
            0
        } else {
            rng.random_range(0..self.locations.len())
        };
        let p_exp = self.exposure_probability(features[0]);
        let exposed = rng.random_bool(p_exp);
        let first_seen = exposed.then(|| {
            let u: f64 = rng.random();
            ((t_days * u * u).floor() as i64).min(spec.flight_days as i64 - 1)
        });

        let mut visits = Vec::with_capacity(spec.flight().series_len());
        let mut extra_in_flight = 0i64;
        let mut post_base = 0u64;
        let mut impressions = Vec::new();
        let jitter = Normal::new(0.0, spec.jitter_m).expect("jitter >= 0");
        let mix = spec.source_mix;
        let other = mix.lrtb + mix.urtb;
        let background_rate = spec.impression_rate * other;
        let campaign_rate = spec.impression_rate * mix.nd;
        let pick_source = |rng: &mut ChaCha8Rng| {
            if other <= 0.0 || rng.random::<f64>() * other < mix.lrtb {
                Source::Lrtb
            } else {
                Source::Urtb
            }
        };

        for day in -margin..spec.flight_days as i64 + margin {
            let day_start = spec.flight_start + day * SECONDS_PER_DAY;
            let in_flight = (0..spec.flight_days as i64).contains(&day);
            let trend = (spec.visit_trend * (2.0 * z - 1.0) * (day as f64 + 0.5 - t_days / 2.0) / t_days).exp();
            let lambda = rate * trend;
            let base = poisson(&mut rng, lambda) as i64;
            let post = first_seen.is_some_and(|f| day >= f);
            let mut total = base;
            if post {
                if spec.injected_lift >= 1.0 {
                    total += poisson(&mut rng, lambda * (spec.injected_lift - 1.0)) as i64;
                } else if base > 0 {
                    total = Binomial::new(base as u64, spec.injected_lift).expect("p in [0, 1]").sample(&mut rng) as i64;
                }
            }
            let capped_base = base.min(SLOTS_PER_DAY as i64);
            let realized = if self.locations.is_empty() {
                0
            } else {
                total.min(SLOTS_PER_DAY as i64)
            };
            if in_flight && post {
                extra_in_flight += realized - capped_base;
                post_base += capped_base as u64;
            }
            visits.push(realized as u32);

            if realized > 0 {
                let home = self.locations[home_idx].point;
                let mut slots = index::sample(&mut rng, SLOTS_PER_DAY, realized as usize).into_vec();
                slots.sort_unstable();
                for slot in slots {
                    let t0 = day_start + slot as i64 * SLOT_SECONDS + rng.random_range(0..900);
                    let n_imp = rng.random_range(1..=3);
                    for _ in 0..n_imp {
                        let p = home.offset_m(jitter.sample(&mut rng), jitter.sample(&mut rng));
                        impressions.push(Impression {
                            device_id: device_id.clone(),
                            t: t0 + rng.random_range(0..600),
                            loc: Some(p),
                            source: pick_source(&mut rng),
                            exposed_campaign: None,
                        });
                    }
                }
            }

            for _ in 0..poisson(&mut rng, background_rate) {
                let t = day_start + rng.random_range(0..SECONDS_PER_DAY);
                let loc = if rng.random_bool(0.5) && !self.locations.is_empty() {
                    let home = self.locations[home_idx].point;
                    let dist = rng.random_range(1_000.0..5_000.0);
                    let bearing = rng.random_range(0.0..std::f64::consts::TAU);
                    Some(home.offset_m(dist * bearing.cos(), dist * bearing.sin()))
                } else {
                    None
                };
                impressions.push(Impression {
                    device_id: device_id.clone(),
                    t,
                    loc,
                    source: pick_source(&mut rng),
                    exposed_campaign: None,
                });
            }

            if let Some(f) = first_seen {
                if in_flight && day >= f {
                    let n = poisson(&mut rng, campaign_rate) + u64::from(day == f);
                    for _ in 0..n {
                        impressions.push(Impression {
                            device_id: device_id.clone(),
                            t: day_start + rng.random_range(0..SECONDS_PER_DAY),
                            loc: None,
                            source: Source::Nd,
                            exposed_campaign: Some(CAMPAIGN_ID.to_string()),
                        });
                    }
                }
            }
        }
        impressions.sort_by_key(|i| i.t);

        DeviceRecord {
            truth: DeviceTruth {
                device_id,
                propensity: z,
                rate,
                home: self.locations.get(home_idx).map_or_else(String::new, |l| l.pid.clone()),
                exposure_probability: p_exp,
                exposed,
                first_seen,
                visits,
                extra_in_flight,
                post_base,
            },
            features,
            impressions,
        }
    }

    /// Simulates every device (in parallel, in device order).
    pub fn generate(&self) -> Vec<DeviceRecord> {
        (0..self.spec.n_devices).into_par_iter().map(|i| self.simulate_device(i)).collect()
    }

    pub fn ground_truth(&self, records: &[DeviceRecord]) -> GroundTruth {
        GroundTruth::from_devices(&self.spec, records.iter().map(|r| r.truth.clone()).collect())
    }
}
