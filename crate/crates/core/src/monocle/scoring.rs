//! Criticality, safety and priority of generated experiments.

use serde::{Deserialize, Serialize};

use super::{DependencyRef, DependencySnapshot, MonocleError};
use crate::fit::{FaultRule, InjectionPoint};

/// KPIs whose declared impact makes a dependency off limits.
pub const KPI_NAMES: [&str; 4] = ["sps", "downloads", "login", "signup"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpType {
    Failure,
    LatencyBelowTimeout,
    LatencyCausingFailure,
}

impl ExpType {
    pub const ALL: [ExpType; 3] = [
        ExpType::Failure,
        ExpType::LatencyBelowTimeout,
        ExpType::LatencyCausingFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpType::Failure => "failure",
            ExpType::LatencyBelowTimeout => "latency_below_timeout",
            ExpType::LatencyCausingFailure => "latency_causing_failure",
        }
    }

    pub fn is_latency(self) -> bool {
        self != ExpType::Failure
    }
}

fn trigger_bucket(pct: f64) -> u64 {
    if pct < 0.1 {
        0
    } else if pct < 1.0 {
        10
    } else if pct < 10.0 {
        100
    } else {
        1000
    }
}

pub fn criticality_score(s: &DependencySnapshot) -> Result<u64, MonocleError> {
    if s.is_stale() {
        return Err(MonocleError::Stale(s.name.clone()));
    }
    let kind = if s.is_command() { 100 } else { 1 };
    let retry = if s.is_command() {
        s.wraps
            .iter()
            .map(|c| 1 + u64::from(c.retries))
            .max()
            .unwrap_or(1)
    } else {
        1 + u64::from(s.retries.unwrap_or(0))
    };
    let interactions = if s.is_command() {
        s.wraps.len()
    } else {
        s.wrapped_by.len()
    }
    .max(1) as u64;
    Ok(kind * trigger_bucket(s.trigger_pct) * retry * interactions)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum SafetyReason {
    Blacklisted,
    StaleData,
    UnwrappedClient,
    KpiImpact(String),
    MissingFallbackAndTimeoutMisaligned,
    MissingFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyScore {
    pub score: i8,
    pub reasons: Vec<SafetyReason>,
}

pub fn safety_score(s: &DependencySnapshot, exp_type: ExpType) -> SafetyScore {
    let mut reasons = Vec::new();
    if s.blacklisted {
        reasons.push(SafetyReason::Blacklisted);
    }
    if s.is_stale() {
        reasons.push(SafetyReason::StaleData);
    }
    if !s.is_command() && s.wrapped_by.is_empty() {
        reasons.push(SafetyReason::UnwrappedClient);
    }
    for impact in &s.known_impacts {
        if let Some(kpi) = KPI_NAMES
            .iter()
            .find(|k| k.eq_ignore_ascii_case(impact.trim()))
        {
            reasons.push(SafetyReason::KpiImpact(kpi.to_string()));
        }
    }
    let missing = s.missing_fallback();
    if exp_type.is_latency() && missing && s.timeout_misaligned() {
        reasons.push(SafetyReason::MissingFallbackAndTimeoutMisaligned);
    }
    if exp_type == ExpType::Failure && missing {
        reasons.push(SafetyReason::MissingFallback);
    }
    SafetyScore {
        score: if reasons.is_empty() { 1 } else { -1 },
        reasons,
    }
}

/// Type weight, flipped for unsafe experiments so the type order survives
/// the sign change.
pub fn weight(safety: i8, exp_type: ExpType) -> i64 {
    match (safety > 0, exp_type) {
        (true, ExpType::Failure) | (false, ExpType::LatencyCausingFailure) => 3,
        (_, ExpType::LatencyBelowTimeout) => 2,
        (true, ExpType::LatencyCausingFailure) | (false, ExpType::Failure) => 1,
    }
}

pub fn prioritization_score(criticality: u64, safety: i8, exp_type: ExpType) -> i64 {
    criticality as i64 * i64::from(safety.signum()) * weight(safety, exp_type)
}

/// For a command the larger of its own timeout and the longest any wrapped
/// client can take; for a client its per-try timeout, which is what each
/// injected attempt races.
pub fn highest_timeout_ms(s: &DependencySnapshot) -> u64 {
    if s.is_command() {
        s.wraps
            .iter()
            .map(|c| c.max_computed_timeout_ms())
            .fold(s.timeout_ms, u64::max)
    } else {
        s.timeout_ms
    }
}

pub fn latency_below_timeout_ms(s: &DependencySnapshot) -> u64 {
    let target = highest_timeout_ms(s) as f64 * 95.0 / 100.0 - s.p99();
    target.max(0.0).floor() as u64
}

pub fn latency_causing_failure_ms(s: &DependencySnapshot) -> u64 {
    (highest_timeout_ms(s) * 105).div_ceil(100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedExperiment {
    pub dependency: DependencyRef,
    pub exp_type: ExpType,
    pub injected_latency_ms: Option<u64>,
    pub criticality: u64,
    pub safety: i8,
    pub safety_reasons: Vec<SafetyReason>,
    pub weight: i64,
    pub priority_score: i64,
}

impl GeneratedExperiment {
    /// Stable identity used by the scheduler's history.
    pub fn key(&self) -> String {
        format!("{}/{}", self.dependency, self.exp_type.as_str())
    }

    pub fn fault(&self) -> FaultRule {
        let point = InjectionPoint {
            kind: self.dependency.kind,
            name: self.dependency.name.clone(),
        };
        match self.injected_latency_ms {
            Some(ms) => FaultRule::latency(point, ms),
            None => FaultRule::fail(point),
        }
    }
}

/// Up to three experiments per dependency. Stale snapshots are still
/// listed, at criticality zero, so they show in the plan but never run.
pub fn generate(snapshots: &[DependencySnapshot]) -> Vec<GeneratedExperiment> {
    let mut out = Vec::new();
    for s in snapshots {
        let criticality = criticality_score(s).unwrap_or(0);
        for exp_type in ExpType::ALL {
            let injected = match exp_type {
                ExpType::Failure => None,
                ExpType::LatencyBelowTimeout => Some(latency_below_timeout_ms(s)),
                ExpType::LatencyCausingFailure => Some(latency_causing_failure_ms(s)),
            };
            if injected == Some(0) {
                continue;
            }
            let safety = safety_score(s, exp_type);
            out.push(GeneratedExperiment {
                dependency: s.reference(),
                exp_type,
                injected_latency_ms: injected,
                criticality,
                safety: safety.score,
                weight: weight(safety.score, exp_type),
                priority_score: prioritization_score(criticality, safety.score, exp_type),
                safety_reasons: safety.reasons,
            });
        }
    }
    out
}
