use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::config::ConfigError;
use crate::edge::EdgeError;
use crate::fit::FitError;
use crate::mesh::{SimError, TopologyError};
use crate::monocle::MonocleError;
use crate::orchestrator::OrchestratorError;
use crate::telemetry::TelemetryError;

/// Any failure the platform can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Monocle(#[from] MonocleError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
