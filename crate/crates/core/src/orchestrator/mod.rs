//! Experiment lifecycle: admission, provisioning, monitoring, cleanup and
//! analysis, driven one virtual second at a time.

pub mod experiment;
pub mod platform;

use thiserror::Error;

use crate::config::ConfigError;
use crate::fit::ExperimentId;
use crate::mesh::SimError;
use crate::monocle::MonocleError;
use crate::safety::RejectReason;

pub use experiment::{
    AbortReason, AuditEntry, AuditKind, ClusterPair, Experiment, ExperimentDefinition,
    ExperimentState, IllegalTransition,
};
pub use platform::{canary_size, Platform, PlatformEvent, ScheduleRun, ScheduleSkip};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid experiment: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown experiment {0}")]
    UnknownExperiment(ExperimentId),
    #[error("{0}")]
    Conflict(String),
    #[error("rejected by safety checks: {0}")]
    Safety(RejectReason),
    #[error(transparent)]
    Transition(#[from] IllegalTransition),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Monocle(#[from] MonocleError),
    #[error("{0}")]
    Config(String),
}

impl From<ConfigError> for OrchestratorError {
    fn from(e: ConfigError) -> Self {
        OrchestratorError::Config(e.to_string())
    }
}
