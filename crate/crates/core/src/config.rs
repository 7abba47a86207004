//! Platform configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::DEFAULT_ALPHA;
use crate::mesh::{SimConfig, Topology, TopologyError, TopologySpec, Workload};
use crate::monocle::MonocleConfig;
use crate::orchestrator::experiment::{DEFAULT_DURATION_SECS, DEFAULT_SAMPLING_PCT};
use crate::safety::SafetyConfig;
use crate::telemetry::DEFAULT_AVAILABILITY_DELAY_SECS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub availability_delay_secs: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            availability_delay_secs: DEFAULT_AVAILABILITY_DELAY_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub default_duration_secs: u64,
    pub default_sampling_pct: f64,
    pub max_sampling_pct: f64,
    /// Longest wait for in-flight experiment requests after unpublishing.
    pub drain_timeout_secs: u64,
    /// Stop user traffic while the only work left is waiting for aggregates.
    pub pause_traffic_when_idle: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            default_duration_secs: DEFAULT_DURATION_SECS,
            default_sampling_pct: DEFAULT_SAMPLING_PCT,
            max_sampling_pct: 50.0,
            drain_timeout_secs: 60,
            pause_traffic_when_idle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub seed: u64,
    /// Region new experiments run in unless they name one.
    pub region: String,
    pub regions: Vec<String>,
    /// Topology file, relative to the config file.
    pub topology_path: Option<PathBuf>,
    /// Inline topology; wins over `topology_path`.
    pub topology: Option<TopologySpec>,
    pub workload: Workload,
    pub safety: SafetyConfig,
    pub analysis: AnalysisConfig,
    pub orchestrator: OrchestratorConfig,
    pub monocle: MonocleConfig,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            region: "us-east-1".into(),
            regions: vec!["us-east-1".into(), "us-west-2".into(), "eu-west-1".into()],
            topology_path: None,
            topology: None,
            workload: Workload::default(),
            safety: SafetyConfig::default(),
            analysis: AnalysisConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            monocle: MonocleConfig::default(),
        }
    }
}

impl PlatformConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`; a relative `topology_path` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        if let Some(p) = &cfg.topology_path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.topology_path = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.safety
            .validate()
            .map_err(|e| ConfigError::Invalid(e.0))?;
        if self.regions.is_empty() {
            return Err(ConfigError::Invalid(
                "at least one region is required".into(),
            ));
        }
        if !self.regions.contains(&self.region) {
            return Err(ConfigError::Invalid(format!(
                "default region {} is not listed",
                self.region
            )));
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return Err(ConfigError::Invalid(
                "analysis.alpha must lie in (0, 1)".into(),
            ));
        }
        let o = &self.orchestrator;
        if o.default_duration_secs == 0 {
            return Err(ConfigError::Invalid(
                "orchestrator.default_duration_secs must be positive".into(),
            ));
        }
        if !(o.max_sampling_pct > 0.0 && o.max_sampling_pct <= 50.0) {
            return Err(ConfigError::Invalid(
                "orchestrator.max_sampling_pct must lie in (0, 50]".into(),
            ));
        }
        if !(o.default_sampling_pct > 0.0 && o.default_sampling_pct <= o.max_sampling_pct) {
            return Err(ConfigError::Invalid(
                "orchestrator.default_sampling_pct out of range".into(),
            ));
        }
        if !(self.workload.request_rate >= 0.0 && self.workload.request_rate.is_finite())
            || self.workload.users == 0
        {
            return Err(ConfigError::Invalid(
                "workload needs users > 0 and a finite request rate".into(),
            ));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        let spec = match (&self.topology, &self.topology_path) {
            (Some(spec), _) => spec.clone(),
            (None, Some(path)) => TopologySpec::load(path)?,
            (None, None) => return Err(ConfigError::Invalid("no topology configured".into())),
        };
        Ok(Topology::new(spec)?)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            availability_delay_secs: self.analysis.availability_delay_secs,
            max_sampling_pct: self.orchestrator.max_sampling_pct,
            workload: self.workload,
        }
    }
}
