use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use visitlift::geo_grid::GridConfig;
use visitlift::location_graph::{KeywordSchema, SmoothingParams, DEFAULT_KEYWORDS};
use visitlift::matching::{Caliper, MatchMode, MatchOptions, DEFAULT_CALIPER, MAX_ADAPTIVE_CALIPER};
use visitlift::quality::{DEFAULT_BOOTSTRAP, MIN_BOOTSTRAP};
use visitlift::synthgen::{ScenarioSpec, DEFAULT_FLIGHT_START};
use visitlift::visit_engine::{FlightWindow, HitRule, LumpParams};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "VISITLIFT_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub locations: Option<PathBuf>,
    pub impressions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            locations: None,
            impressions: None,
            features: None,
            priors: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub delta_deg: f64,
    pub edge_threshold_m: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            delta_deg: 0.01,
            edge_threshold_m: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlightParams {
    pub start: i64,
    pub days: u32,
}

impl Default for FlightParams {
    fn default() -> Self {
        FlightParams {
            start: DEFAULT_FLIGHT_START,
            days: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Sort,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KChoice {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl std::str::FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(KChoice::Auto(AutoTag::Auto))
        } else {
            s.parse().map(KChoice::Fixed).map_err(|_| format!("k must be `auto` or a count, got `{s}`"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingParams {
    pub method: MatchMethod,
    pub balanced: bool,
    /// off means clusters are runs of exactly equal scores
    pub caliper: bool,
    pub caliper_width: f64,
    /// widen the caliper until every cluster has both cohorts
    pub adaptive: bool,
    pub k: KChoice,
    /// append first-seen day and active span to the features
    pub time_features: bool,
    pub strict_cluster_size: bool,
    pub max_iter: usize,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams {
            method: MatchMethod::Sort,
            balanced: false,
            caliper: true,
            caliper_width: DEFAULT_CALIPER,
            adaptive: false,
            k: KChoice::Auto(AutoTag::Auto),
            time_features: true,
            strict_cluster_size: false,
            max_iter: visitlift::matching::DEFAULT_MAX_ITER,
        }
    }
}

impl MatchingParams {
    pub fn options(&self) -> MatchOptions {
        MatchOptions {
            mode: if self.balanced {
                MatchMode::Balanced
            } else {
                MatchMode::Unbalanced
            },
            caliper: match (self.caliper, self.adaptive) {
                (false, _) => Caliper::Off,
                (true, false) => Caliper::Fixed {
                    width: self.caliper_width,
                },
                (true, true) => Caliper::Adaptive {
                    start: self.caliper_width,
                    max: MAX_ADAPTIVE_CALIPER.max(self.caliper_width),
                },
            },
            strict_cluster_size: self.strict_cluster_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationParams {
    pub keywords: usize,
    pub exclusive_groups: Vec<Vec<usize>>,
    pub steps: usize,
    pub smoothing: Option<SmoothingParams>,
    /// profile retention
    pub rho: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            keywords: DEFAULT_KEYWORDS,
            exclusive_groups: Vec::new(),
            steps: 10,
            smoothing: None,
            rho: 0.5,
        }
    }
}

impl PropagationParams {
    pub fn schema(&self) -> CliResult<KeywordSchema> {
        Ok(KeywordSchema::new(self.keywords, self.exclusive_groups.clone())?)
    }

    pub fn smoothing(&self) -> SmoothingParams {
        self.smoothing.clone().unwrap_or_else(|| SmoothingParams::uniform(self.keywords))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub grid: GridParams,
    pub hit_rule: HitRule,
    pub lump: LumpParams,
    pub flight: FlightParams,
    pub kernel_m: usize,
    pub mode: MatchMode,
    pub matching: MatchingParams,
    pub propagation: PropagationParams,
    pub bootstrap: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: Option<ScenarioSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            grid: GridParams::default(),
            hit_rule: HitRule::Radius { k_m: 50.0 },
            lump: LumpParams::default(),
            flight: FlightParams::default(),
            kernel_m: 7,
            mode: MatchMode::Unbalanced,
            matching: MatchingParams::default(),
            propagation: PropagationParams::default(),
            bootstrap: DEFAULT_BOOTSTRAP,
            seed: 0,
            threads: None,
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.grid_config()?;
        if !(self.grid.edge_threshold_m.is_finite() && self.grid.edge_threshold_m > 0.0) {
            return bad("grid.edge_threshold_m must be > 0");
        }
        if self.kernel_m < 1 {
            return bad("kernel_m must be >= 1");
        }
        if self.flight.days < 1 {
            return bad("flight.days must be >= 1");
        }
        if self.bootstrap < MIN_BOOTSTRAP {
            return Err(CliError::Config(format!("bootstrap must be >= {MIN_BOOTSTRAP}")));
        }
        if !(self.lump.delta_t > 0 && self.lump.delta_t <= 86_400) {
            return bad("lump.delta_t must be in (0, 86400] seconds");
        }
        if !(self.matching.caliper_width.is_finite() && self.matching.caliper_width > 0.0) {
            return bad("matching.caliper_width must be > 0");
        }
        if self.matching.k == KChoice::Fixed(0) {
            return bad("matching.k must be >= 1");
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.propagation.rho) {
            return bad("propagation.rho must be in [0, 1]");
        }
        self.propagation.schema()?;
        self.propagation.smoothing().validate(self.propagation.keywords)?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn grid_config(&self) -> CliResult<GridConfig> {
        Ok(GridConfig::square(self.grid.delta_deg)?)
    }

    /// Analysis window: the flight plus `kernel_m` margin days.
    pub fn flight_window(&self) -> CliResult<FlightWindow> {
        Ok(FlightWindow::new(self.flight.start, self.flight.days, self.kernel_m as u32)?)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    /// Configured input path, or the artifact of an earlier stage.
    pub fn input(&self, configured: &Option<PathBuf>, default_name: &str) -> PathBuf {
        configured.clone().unwrap_or_else(|| self.out(default_name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn k_accepts_auto_or_count() {
        let m: MatchingParams = serde_json::from_str(r#"{"k": "auto"}"#).unwrap();
        assert_eq!(m.k, KChoice::Auto(AutoTag::Auto));
        let m: MatchingParams = serde_json::from_str(r#"{"k": 7, "method": "kmeans"}"#).unwrap();
        assert_eq!(m.k, KChoice::Fixed(7));
        assert_eq!("12".parse::<KChoice>().unwrap(), KChoice::Fixed(12));
        assert!("x".parse::<KChoice>().is_err());
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        let mut c = RunConfig::default();
        c.bootstrap = 10;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.grid.delta_deg = -1.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = RunConfig::default();
        c.lump.delta_t = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn caliper_flags_map_to_options() {
        let mut m = MatchingParams::default();
        assert_eq!(m.options().caliper, Caliper::Fixed { width: DEFAULT_CALIPER });
        m.caliper = false;
        assert_eq!(m.options().caliper, Caliper::Off);
        m.caliper = true;
        m.adaptive = true;
        assert!(matches!(m.options().caliper, Caliper::Adaptive { .. }));
        m.balanced = true;
        assert_eq!(m.options().mode, MatchMode::Balanced);
    }
}
