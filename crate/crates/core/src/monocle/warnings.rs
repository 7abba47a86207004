//! Configuration hazards visible from a snapshot set.

use serde::{Deserialize, Serialize};

use super::{DependencyRef, DependencySnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Yellow,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningCode {
    TimeoutMisaligned,
    MissingFallback,
    UnwrappedClient,
    StaleData,
    FallbackNeverExercised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub severity: Severity,
    pub code: WarningCode,
    pub dependency: DependencyRef,
    pub message: String,
    pub evidence: Vec<Evidence>,
}

impl Warning {
    pub fn evidence_values(&self) -> Vec<f64> {
        self.evidence.iter().map(|e| e.value).collect()
    }
}

fn ev(name: &str, value: f64) -> Evidence {
    Evidence {
        name: name.to_string(),
        value,
    }
}

pub fn detect_warnings(snapshots: &[DependencySnapshot]) -> Vec<Warning> {
    let mut out = Vec::new();
    for s in snapshots {
        let dep = s.reference();
        let mut push = |severity, code, message: String, evidence| {
            out.push(Warning {
                severity,
                code,
                dependency: dep.clone(),
                message,
                evidence,
            })
        };
        if s.is_stale() {
            push(
                Severity::Yellow,
                WarningCode::StaleData,
                format!("{}: no traffic observed in the lookback window", s.name),
                vec![],
            );
        }
        if s.is_command() {
            for c in &s.wraps {
                let max = c.max_computed_timeout_ms();
                if s.timeout_ms < max {
                    push(
                        Severity::Red,
                        WarningCode::TimeoutMisaligned,
                        format!(
                            "Command {} times out after {} ms, but wrapped RPC client {} may run for up to {} ms \
                             ({} ms x {} attempts)",
                            s.name,
                            s.timeout_ms,
                            c.name,
                            max,
                            c.timeout_ms,
                            1 + c.retries
                        ),
                        vec![ev("command_timeout_ms", s.timeout_ms as f64), ev("client_max_timeout_ms", max as f64)],
                    );
                }
            }
            if !s.has_fallback {
                push(
                    Severity::Red,
                    WarningCode::MissingFallback,
                    format!("Command {} has no fallback", s.name),
                    vec![],
                );
            } else if !s.is_stale() && !s.fallback_observed_success {
                push(
                    Severity::Yellow,
                    WarningCode::FallbackNeverExercised,
                    format!(
                        "Fallback of command {} has never been observed to succeed",
                        s.name
                    ),
                    vec![],
                );
            }
        } else if s.wrapped_by.is_empty() {
            push(
                Severity::Red,
                WarningCode::UnwrappedClient,
                format!("RPC client {} is not wrapped by any command", s.name),
                vec![],
            );
        }
    }
    out
}
