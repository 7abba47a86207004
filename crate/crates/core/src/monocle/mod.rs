//! Dependency introspection and automatic experiment planning.
//!
//! [`snapshot`] joins a cluster's declared dependencies with observed
//! traffic; [`detect_warnings`] flags configuration hazards;
//! [`scoring`] ranks candidate experiments and [`schedule`] picks which
//! of them may run.

pub mod schedule;
pub mod scoring;
pub mod warnings;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::InjectionKind;
use crate::mesh::sim::EffectiveConfig;
use crate::mesh::topology::Service;
use crate::mesh::SimTime;
use crate::telemetry::{percentiles, DependencyKey, LatencySummary, Telemetry};

pub use schedule::{schedule, History, HistoryEntry};
pub use scoring::{
    criticality_score, generate, prioritization_score, safety_score, ExpType, GeneratedExperiment,
    SafetyReason, SafetyScore,
};
pub use warnings::{detect_warnings, Severity, Warning, WarningCode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonocleError {
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
    #[error("snapshot of {0} is stale")]
    Stale(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonocleConfig {
    /// Dependencies never to experiment on, by name.
    pub blacklist: Vec<String>,
    pub cooldown_days: u32,
    /// How far back trigger rates and latencies are taken from.
    pub lookback_secs: u64,
    /// How far back the request-rate peak is taken from.
    pub peak_lookback_secs: u64,
    /// Trigger rates are computed over buckets of this many seconds.
    pub trigger_bucket_secs: u64,
}

impl Default for MonocleConfig {
    fn default() -> Self {
        Self {
            blacklist: Vec::new(),
            cooldown_days: 7,
            lookback_secs: 7 * 86_400,
            peak_lookback_secs: 14 * 86_400,
            trigger_bucket_secs: 60,
        }
    }
}

/// The neighbour on the other side of a wrap link, with the settings
/// scoring needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedDependency {
    pub name: String,
    pub timeout_ms: u64,
    /// Zero for commands.
    pub retries: u32,
    pub has_fallback: bool,
}

impl LinkedDependency {
    /// For a client: per-try timeout times attempts.
    pub fn max_computed_timeout_ms(&self) -> u64 {
        self.timeout_ms * (1 + u64::from(self.retries))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencySnapshot {
    pub cluster: String,
    pub kind: InjectionKind,
    pub name: String,
    pub trigger_pct: f64,
    pub latencies: Option<LatencySummary>,
    pub max_rps: f64,
    /// Command timeout, or per-try timeout for a client.
    pub timeout_ms: u64,
    pub retries: Option<u32>,
    pub bulkhead_size: Option<u32>,
    pub observed_active_slots: Option<u32>,
    /// For a client: every wrapping command has a fallback.
    pub has_fallback: bool,
    pub fallback_observed_success: bool,
    pub wrapped_by: Vec<LinkedDependency>,
    pub wraps: Vec<LinkedDependency>,
    pub known_impacts: Vec<String>,
    pub collected_at: Option<SimTime>,
    pub blacklisted: bool,
}

impl DependencySnapshot {
    pub fn is_stale(&self) -> bool {
        self.collected_at.is_none()
    }

    pub fn is_command(&self) -> bool {
        self.kind == InjectionKind::Command
    }

    /// Client only: the longest a call can take across all attempts.
    pub fn max_computed_timeout_ms(&self) -> u64 {
        self.timeout_ms * (1 + u64::from(self.retries.unwrap_or(0)))
    }

    pub fn p99(&self) -> f64 {
        self.latencies.map_or(0.0, |l| l.p99)
    }

    /// For a command: a wrapped client may outlast the command timeout. For
    /// a client: some wrapping command gives up before the client would.
    pub fn timeout_misaligned(&self) -> bool {
        if self.is_command() {
            self.wraps
                .iter()
                .any(|c| self.timeout_ms < c.max_computed_timeout_ms())
        } else {
            let mine = self.max_computed_timeout_ms();
            self.wrapped_by.iter().any(|c| c.timeout_ms < mine)
        }
    }

    pub fn missing_fallback(&self) -> bool {
        if self.is_command() {
            !self.has_fallback
        } else {
            self.wrapped_by.iter().any(|c| !c.has_fallback)
        }
    }

    pub fn reference(&self) -> DependencyRef {
        DependencyRef {
            cluster: self.cluster.clone(),
            kind: self.kind,
            name: self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DependencyRef {
    pub cluster: String,
    pub kind: InjectionKind,
    pub name: String,
}

impl std::fmt::Display for DependencyRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}:{}", self.cluster, self.kind.as_str(), self.name)
    }
}

fn window_counts(counts: &[u32], from: u64, to: u64) -> &[u32] {
    let lo = (from as usize).min(counts.len());
    let hi = (to as usize).min(counts.len());
    &counts[lo..hi]
}

/// Highest bucketed share of inbound requests that also invoked the
/// dependency, in percent.
fn trigger_pct(invocations: &[u32], inbound: &[u32], bucket: usize) -> f64 {
    let bucket = bucket.max(1);
    let mut best: f64 = 0.0;
    for (inv, inb) in invocations.chunks(bucket).zip(inbound.chunks(bucket)) {
        let inv: u64 = inv.iter().map(|&v| u64::from(v)).sum();
        let inb: u64 = inb.iter().map(|&v| u64::from(v)).sum();
        if inb > 0 {
            best = best.max(100.0 * inv as f64 / inb as f64);
        }
    }
    best.min(100.0)
}

/// One snapshot per declared dependency of `cluster`, which runs
/// `service` with the settings in `config`.
pub fn snapshot(
    cluster: &str,
    service: &Service,
    config: &EffectiveConfig,
    telemetry: &Telemetry,
    now: SimTime,
    opts: &MonocleConfig,
) -> Vec<DependencySnapshot> {
    let now_sec = now.second();
    let from = now_sec.saturating_sub(opts.lookback_secs);
    let peak_from = now_sec.saturating_sub(opts.peak_lookback_secs);
    let inbound = telemetry.inbound(cluster);
    let horizon = SimTime::from_secs(from);

    let client_link = |i: usize| LinkedDependency {
        name: service.clients[i].spec.name.clone(),
        timeout_ms: config.client_timeout_ms[i],
        retries: config.client_retries[i],
        has_fallback: false,
    };
    let command_link = |i: usize| LinkedDependency {
        name: service.commands[i].spec.name.clone(),
        timeout_ms: config.command_timeout_ms[i],
        retries: 0,
        has_fallback: service.commands[i].spec.has_fallback,
    };

    let observe = |kind: InjectionKind, name: &str| {
        let key = DependencyKey {
            cluster: cluster.to_string(),
            kind,
            name: name.to_string(),
        };
        let Some(d) = telemetry.dependency(&key) else {
            return (0.0, None, 0.0, 0, 0, None);
        };
        let inv = window_counts(&d.invocations, from, now_sec + 1);
        let inb = window_counts(inbound, from, now_sec + 1);
        let trig = trigger_pct(inv, inb, opts.trigger_bucket_secs as usize);
        let peak = window_counts(&d.invocations, peak_from, now_sec + 1)
            .iter()
            .copied()
            .max()
            .unwrap_or(0);
        let fresh = d.last_seen.filter(|&t| t >= horizon);
        (
            trig,
            percentiles(d.latency_samples()).ok(),
            f64::from(peak),
            d.max_active,
            d.fallback_success,
            fresh,
        )
    };

    let mut out = Vec::new();
    for (i, cmd) in service.commands.iter().enumerate() {
        let (trig, lat, peak, active, fb_ok, fresh) =
            observe(InjectionKind::Command, &cmd.spec.name);
        out.push(DependencySnapshot {
            cluster: cluster.to_string(),
            kind: InjectionKind::Command,
            name: cmd.spec.name.clone(),
            trigger_pct: trig,
            latencies: lat,
            max_rps: peak,
            timeout_ms: config.command_timeout_ms[i],
            retries: None,
            bulkhead_size: Some(cmd.spec.bulkhead_size),
            observed_active_slots: Some(active),
            has_fallback: cmd.spec.has_fallback,
            fallback_observed_success: fb_ok > 0,
            wrapped_by: Vec::new(),
            wraps: cmd.clients.iter().map(|&c| client_link(c)).collect(),
            known_impacts: cmd.spec.known_impacts.clone(),
            collected_at: fresh,
            blacklisted: opts.blacklist.contains(&cmd.spec.name),
        });
    }
    for (i, cl) in service.clients.iter().enumerate() {
        let (trig, lat, peak, _, _, fresh) = observe(InjectionKind::RpcClient, &cl.spec.name);
        let wrapped_by: Vec<LinkedDependency> =
            cl.wrapped_by.iter().map(|&c| command_link(c)).collect();
        let guarded = !wrapped_by.is_empty() && wrapped_by.iter().all(|c| c.has_fallback);
        let fb_seen = cl.wrapped_by.iter().any(|&c| {
            let key = DependencyKey {
                cluster: cluster.to_string(),
                kind: InjectionKind::Command,
                name: service.commands[c].spec.name.clone(),
            };
            telemetry
                .dependency(&key)
                .is_some_and(|d| d.fallback_success > 0)
        });
        out.push(DependencySnapshot {
            cluster: cluster.to_string(),
            kind: InjectionKind::RpcClient,
            name: cl.spec.name.clone(),
            trigger_pct: trig,
            latencies: lat,
            max_rps: peak,
            timeout_ms: config.client_timeout_ms[i],
            retries: Some(config.client_retries[i]),
            bulkhead_size: None,
            observed_active_slots: None,
            has_fallback: guarded,
            fallback_observed_success: fb_seen,
            wrapped_by,
            wraps: Vec::new(),
            known_impacts: cl.spec.known_impacts.clone(),
            collected_at: fresh,
            blacklisted: opts.blacklist.contains(&cl.spec.name),
        });
    }
    out
}
