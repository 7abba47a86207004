//! Experiment records and the lifecycle state machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::CanaryVerdict;
use crate::fit::{ExperimentId, FaultRule};
use crate::safety::{RejectReason, StopReason};

pub const DEFAULT_SAMPLING_PCT: f64 = 1.0;
pub const DEFAULT_DURATION_SECS: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentState {
    Created,
    Provisioning,
    Running,
    Stopping,
    Analyzing,
    Completed,
    Aborted,
    Failed,
}

impl ExperimentState {
    pub const ALL: [ExperimentState; 8] = [
        ExperimentState::Created,
        ExperimentState::Provisioning,
        ExperimentState::Running,
        ExperimentState::Stopping,
        ExperimentState::Analyzing,
        ExperimentState::Completed,
        ExperimentState::Aborted,
        ExperimentState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ExperimentState::Completed | ExperimentState::Aborted | ExperimentState::Failed
        )
    }

    /// Whether the state machine allows `self -> to`. `aborting` tells
    /// whether the experiment carries an abort reason, which decides where
    /// Stopping may lead.
    pub fn can_transition(self, to: ExperimentState, aborting: bool) -> bool {
        use ExperimentState::*;
        match (self, to) {
            (s, Failed) => !s.is_terminal(),
            (Created, Provisioning)
            | (Provisioning, Running)
            | (Running, Stopping)
            | (Analyzing, Completed) => true,
            (Stopping, Analyzing) => !aborting,
            (Stopping, Aborted) => aborting,
            _ => false,
        }
    }
}

impl std::fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    Manual,
    AutoStop,
    SafetyViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDefinition {
    pub fault: FaultRule,
    pub observed_cluster: String,
    #[serde(default = "default_sampling")]
    pub sampling_pct: f64,
    #[serde(default = "default_duration")]
    pub duration_secs: u64,
    #[serde(default)]
    pub region: Option<String>,
}

fn default_sampling() -> f64 {
    DEFAULT_SAMPLING_PCT
}

fn default_duration() -> u64 {
    DEFAULT_DURATION_SECS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPair {
    pub baseline: String,
    pub canary: String,
    pub baseline_vip: String,
    pub canary_vip: String,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditKind {
    Transition {
        from: ExperimentState,
        to: ExperimentState,
    },
    SafetyRejected {
        reason: RejectReason,
    },
    Note {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// Virtual second.
    pub at: u64,
    pub wall_clock: chrono::DateTime<chrono::Utc>,
    #[serde(flatten)]
    pub kind: AuditKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: ExperimentId,
    pub definition: ExperimentDefinition,
    pub state: ExperimentState,
    pub region: String,
    pub clusters: Option<ClusterPair>,
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub ended_at: Option<u64>,
    pub verdict: Option<CanaryVerdict>,
    pub abort_reason: Option<AbortReason>,
    pub stop_detail: Option<StopReason>,
    pub failure: Option<String>,
    /// Key of the generated plan this experiment came from, if any.
    #[serde(default)]
    pub plan_key: Option<String>,
    pub audit: Vec<AuditEntry>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: ExperimentState,
    pub to: ExperimentState,
}

impl Experiment {
    pub fn new(
        id: ExperimentId,
        definition: ExperimentDefinition,
        region: String,
        now: u64,
    ) -> Self {
        Self {
            id,
            definition,
            state: ExperimentState::Created,
            region,
            clusters: None,
            created_at: now,
            started_at: None,
            ended_at: None,
            verdict: None,
            abort_reason: None,
            stop_detail: None,
            failure: None,
            plan_key: None,
            audit: Vec::new(),
        }
    }

    pub fn transition(
        &mut self,
        to: ExperimentState,
        at: u64,
        wall_clock: chrono::DateTime<chrono::Utc>,
    ) -> Result<(), IllegalTransition> {
        let from = self.state;
        if !from.can_transition(to, self.abort_reason.is_some()) {
            return Err(IllegalTransition { from, to });
        }
        self.state = to;
        self.audit.push(AuditEntry {
            at,
            wall_clock,
            kind: AuditKind::Transition { from, to },
        });
        Ok(())
    }

    pub fn note(&mut self, at: u64, wall_clock: chrono::DateTime<chrono::Utc>, kind: AuditKind) {
        self.audit.push(AuditEntry {
            at,
            wall_clock,
            kind,
        });
    }
}
