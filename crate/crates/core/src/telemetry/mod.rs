//! Dual-path metrics.
//!
//! The stream path ([`stream::StreamStore`]) keeps per-second counters for
//! experiment groups and is readable immediately. The aggregate path
//! ([`aggregate::AggregateStore`]) keeps every series but hides the most
//! recent `availability_delay` seconds from queries. Dependency statistics
//! used for introspection live alongside both.

pub mod aggregate;
pub mod stream;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{ExperimentId, Group, GroupRole, InjectionKind, UserId};
use crate::mesh::runtime::SimTime;
use aggregate::SeriesId;
use stream::StreamStore;

pub use aggregate::{
    AggregateSeries, AggregateStore, Reduce, SeriesKey, DEFAULT_AVAILABILITY_DELAY_SECS,
};
pub use stream::{Counts, StreamSample, SPS_CHANNEL};

pub const KPI_SUCCESS: &str = "kpi.success";
pub const KPI_ERROR: &str = "kpi.error";
pub const HEALTH_REQUESTS: &str = "health.requests";
pub const HEALTH_ERRORS: &str = "health.errors";
pub const HEALTH_LATENCY: &str = "health.latency_ms";
pub const HEALTH_CPU: &str = "health.cpu_utilization";
pub const THREAD_POOL_REJECTED: &str = "countThreadPoolRejected";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("unknown experiment {0}")]
    UnknownExperiment(ExperimentId),
    #[error("no samples")]
    Empty,
}

/// Outcome of one user request as reported on a KPI channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KpiEvent {
    pub at: SimTime,
    pub user: UserId,
    pub group: Group,
    pub channel: String,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p90: f64,
    pub p99: f64,
    pub p99_5: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn percentiles(samples: &[f64]) -> Result<LatencySummary, TelemetryError> {
    if samples.is_empty() {
        return Err(TelemetryError::Empty);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencySummary {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p90: nearest_rank(&sorted, 90.0),
        p99: nearest_rank(&sorted, 99.0),
        p99_5: nearest_rank(&sorted, 99.5),
    })
}

/// Per-cluster health over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthMetrics {
    pub cluster: String,
    pub request_rate: f64,
    pub latency: f64,
    pub error_rate: f64,
    pub cpu_utilization: f64,
    pub thread_pool_rejected: BTreeMap<String, f64>,
}

/// Command execution events, named after the counters they feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandEvent {
    Success,
    Failure,
    Timeout,
    ThreadPoolRejected,
    ShortCircuited,
    FallbackSuccess,
    FallbackFailure,
}

impl CommandEvent {
    pub const ALL: [CommandEvent; 7] = [
        CommandEvent::Success,
        CommandEvent::Failure,
        CommandEvent::Timeout,
        CommandEvent::ThreadPoolRejected,
        CommandEvent::ShortCircuited,
        CommandEvent::FallbackSuccess,
        CommandEvent::FallbackFailure,
    ];

    pub fn metric(self) -> &'static str {
        match self {
            CommandEvent::Success => "countSuccess",
            CommandEvent::Failure => "countFailure",
            CommandEvent::Timeout => "countTimeout",
            CommandEvent::ThreadPoolRejected => THREAD_POOL_REJECTED,
            CommandEvent::ShortCircuited => "countShortCircuited",
            CommandEvent::FallbackSuccess => "countFallbackSuccess",
            CommandEvent::FallbackFailure => "countFallbackFailure",
        }
    }
}

/// Series handles for one cluster.
#[derive(Debug, Clone)]
pub struct ClusterSeries {
    pub cluster: String,
    pub requests: SeriesId,
    pub errors: SeriesId,
    pub latency: SeriesId,
    pub cpu: SeriesId,
    /// Indexed by command position in the service, then [`CommandEvent::ALL`] order.
    pub commands: Vec<[SeriesId; 7]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DependencyKey {
    pub cluster: String,
    pub kind: InjectionKind,
    pub name: String,
}

const RESERVOIR_CAP: usize = 50_000;

#[derive(Debug, Clone, Default)]
pub struct DependencyStats {
    /// Invocations per virtual second, from second 0.
    pub invocations: Vec<u32>,
    latencies: Vec<f64>,
    latencies_seen: u64,
    pub max_active: u32,
    pub fallback_success: u64,
    pub fallback_failure: u64,
    pub last_seen: Option<SimTime>,
}

impl DependencyStats {
    pub fn latency_samples(&self) -> &[f64] {
        &self.latencies
    }

    pub fn total_invocations(&self) -> u64 {
        self.invocations.iter().map(|&c| u64::from(c)).sum()
    }
}

fn bump(counts: &mut Vec<u32>, sec: u64) {
    let i = sec as usize;
    if counts.len() <= i {
        counts.resize(i + 1, 0);
    }
    counts[i] += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DependencyId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InboundId(u32);

pub struct Telemetry {
    pub stream: StreamStore,
    pub aggregates: AggregateStore,
    kpi_series: HashMap<(String, Group), (SeriesId, SeriesId)>,
    kpi_log: Option<Vec<KpiEvent>>,
    dep_index: BTreeMap<DependencyKey, DependencyId>,
    deps: Vec<DependencyStats>,
    inbound_index: BTreeMap<String, InboundId>,
    inbound: Vec<Vec<u32>>,
    reservoir_rng: ChaCha8Rng,
}

impl Telemetry {
    pub fn new(availability_delay_secs: u64) -> Self {
        Self {
            stream: StreamStore::default(),
            aggregates: AggregateStore::new(availability_delay_secs),
            kpi_series: HashMap::new(),
            kpi_log: None,
            dep_index: BTreeMap::new(),
            deps: Vec::new(),
            inbound_index: BTreeMap::new(),
            inbound: Vec::new(),
            reservoir_rng: ChaCha8Rng::seed_from_u64(0x5eed_1a7e),
        }
    }

    /// Keeps every KPI event in memory until [`take_kpi_log`](Self::take_kpi_log).
    pub fn enable_kpi_log(&mut self) {
        self.kpi_log.get_or_insert_with(Vec::new);
    }

    pub fn take_kpi_log(&mut self) -> Vec<KpiEvent> {
        self.kpi_log
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn kpi_key(metric: &str, channel: &str, group: &Group) -> SeriesKey {
        let mut tags = vec![("channel", channel), ("group", group.role().as_str())];
        if let Some(exp) = group.experiment() {
            tags.push(("experiment", exp.as_str()));
        }
        SeriesKey::new(metric, tags)
    }

    pub fn record_event(&mut self, event: KpiEvent) {
        let sec = event.at.second();
        if let Some(exp) = event.group.experiment() {
            self.stream
                .record(exp, event.group.role(), &event.channel, event.success, sec);
        }
        let ids = match self
            .kpi_series
            .get(&(event.channel.clone(), event.group.clone()))
        {
            Some(ids) => *ids,
            None => {
                let ok = self.aggregates.series(
                    Self::kpi_key(KPI_SUCCESS, &event.channel, &event.group),
                    Reduce::Sum,
                );
                let err = self.aggregates.series(
                    Self::kpi_key(KPI_ERROR, &event.channel, &event.group),
                    Reduce::Sum,
                );
                self.kpi_series
                    .insert((event.channel.clone(), event.group.clone()), (ok, err));
                (ok, err)
            }
        };
        self.aggregates
            .add_at_second(if event.success { ids.0 } else { ids.1 }, sec, 1.0);
        if let Some(log) = &mut self.kpi_log {
            log.push(event);
        }
    }

    pub fn record_membership(&mut self, group: &Group, user: UserId) {
        if let Some(exp) = group.experiment() {
            self.stream.record_membership(exp, group.role(), user);
        }
    }

    pub fn health_key(metric: &str, cluster: &str, role: GroupRole) -> SeriesKey {
        SeriesKey::new(metric, [("cluster", cluster), ("group", role.as_str())])
    }

    pub fn command_key(metric: &str, cluster: &str, role: GroupRole, command: &str) -> SeriesKey {
        SeriesKey::new(
            metric,
            [
                ("cluster", cluster),
                ("group", role.as_str()),
                ("command", command),
            ],
        )
    }

    pub fn register_cluster(
        &mut self,
        cluster: &str,
        role: GroupRole,
        commands: &[&str],
    ) -> ClusterSeries {
        let mut sid = |metric: &str, reduce| {
            self.aggregates
                .series(Self::health_key(metric, cluster, role), reduce)
        };
        let requests = sid(HEALTH_REQUESTS, Reduce::Sum);
        let errors = sid(HEALTH_ERRORS, Reduce::Sum);
        let latency = sid(HEALTH_LATENCY, Reduce::Mean);
        let cpu = sid(HEALTH_CPU, Reduce::Mean);
        let commands = commands
            .iter()
            .map(|cmd| {
                CommandEvent::ALL.map(|ev| {
                    self.aggregates.series(
                        Self::command_key(ev.metric(), cluster, role, cmd),
                        Reduce::Sum,
                    )
                })
            })
            .collect();
        ClusterSeries {
            cluster: cluster.to_string(),
            requests,
            errors,
            latency,
            cpu,
            commands,
        }
    }

    pub fn record_request(
        &mut self,
        series: &ClusterSeries,
        at: SimTime,
        latency_ms: f64,
        failed: bool,
    ) {
        self.aggregates.add(series.requests, at, 1.0);
        self.aggregates
            .add(series.errors, at, if failed { 1.0 } else { 0.0 });
        self.aggregates.add(series.latency, at, latency_ms);
    }

    pub fn record_command_event(
        &mut self,
        series: &ClusterSeries,
        command: usize,
        event: CommandEvent,
        at: SimTime,
    ) {
        let idx = CommandEvent::ALL
            .iter()
            .position(|&e| e == event)
            .expect("event listed");
        self.aggregates.add(series.commands[command][idx], at, 1.0);
    }

    pub fn record_cpu(&mut self, series: &ClusterSeries, sec: u64, value: f64) {
        self.aggregates.add_at_second(series.cpu, sec, value);
    }

    pub fn register_inbound(&mut self, cluster: &str) -> InboundId {
        if let Some(&id) = self.inbound_index.get(cluster) {
            return id;
        }
        let id = InboundId(self.inbound.len() as u32);
        self.inbound.push(Vec::new());
        self.inbound_index.insert(cluster.to_string(), id);
        id
    }

    pub fn record_inbound(&mut self, id: InboundId, at: SimTime) {
        bump(&mut self.inbound[id.0 as usize], at.second());
    }

    pub fn register_dependency(&mut self, key: DependencyKey) -> DependencyId {
        if let Some(&id) = self.dep_index.get(&key) {
            return id;
        }
        let id = DependencyId(self.deps.len() as u32);
        self.deps.push(DependencyStats::default());
        self.dep_index.insert(key, id);
        id
    }

    pub fn record_invocation(&mut self, id: DependencyId, at: SimTime) {
        let d = &mut self.deps[id.0 as usize];
        bump(&mut d.invocations, at.second());
        d.last_seen = Some(at);
    }

    pub fn record_dependency_latency(&mut self, id: DependencyId, latency_ms: f64) {
        let d = &mut self.deps[id.0 as usize];
        d.latencies_seen += 1;
        if d.latencies.len() < RESERVOIR_CAP {
            d.latencies.push(latency_ms);
        } else {
            let j = self.reservoir_rng.random_range(0..d.latencies_seen) as usize;
            if j < RESERVOIR_CAP {
                d.latencies[j] = latency_ms;
            }
        }
    }

    pub fn record_active_slots(&mut self, id: DependencyId, active: u32) {
        let d = &mut self.deps[id.0 as usize];
        d.max_active = d.max_active.max(active);
    }

    pub fn record_fallback(&mut self, id: DependencyId, succeeded: bool) {
        let d = &mut self.deps[id.0 as usize];
        if succeeded {
            d.fallback_success += 1;
        } else {
            d.fallback_failure += 1;
        }
    }

    pub fn dependency(&self, key: &DependencyKey) -> Option<&DependencyStats> {
        self.dep_index.get(key).map(|id| &self.deps[id.0 as usize])
    }

    /// Requests served by a cluster per virtual second, from second 0.
    pub fn inbound(&self, cluster: &str) -> &[u32] {
        self.inbound_index
            .get(cluster)
            .map(|id| self.inbound[id.0 as usize].as_slice())
            .unwrap_or(&[])
    }

    /// Current health of a cluster over `[from_sec, to_sec)`, read without
    /// the aggregate delay.
    pub fn health(
        &self,
        cluster: &str,
        role: GroupRole,
        commands: &[&str],
        from_sec: u64,
        to_sec: u64,
    ) -> HealthMetrics {
        let read = |metric: &str| {
            self.aggregates
                .read(&Self::health_key(metric, cluster, role), from_sec, to_sec)
                .map(|s| s.values())
        };
        let span = to_sec.saturating_sub(from_sec).max(1) as f64;
        let requests: f64 = read(HEALTH_REQUESTS).map_or(0.0, |v| v.iter().sum());
        let errors: f64 = read(HEALTH_ERRORS).map_or(0.0, |v| v.iter().sum());
        let mean = |v: Option<Vec<f64>>| match v {
            Some(v) if !v.is_empty() => v.iter().sum::<f64>() / v.len() as f64,
            _ => 0.0,
        };
        let thread_pool_rejected = commands
            .iter()
            .map(|cmd| {
                let total = self
                    .aggregates
                    .read(
                        &Self::command_key(THREAD_POOL_REJECTED, cluster, role, cmd),
                        from_sec,
                        to_sec,
                    )
                    .map_or(0.0, |s| s.values().iter().sum());
                (cmd.to_string(), total)
            })
            .collect();
        HealthMetrics {
            cluster: cluster.to_string(),
            request_rate: requests / span,
            latency: mean(read(HEALTH_LATENCY)),
            error_rate: if requests > 0.0 {
                errors / requests
            } else {
                0.0
            },
            cpu_utilization: mean(read(HEALTH_CPU)),
            thread_pool_rejected,
        }
    }
}

/// Synthetic CPU utilisation (percent) of an instance serving `rps`
/// requests per second: `100 * (1 - exp(-rps / capacity_rps))`.
pub fn synthetic_cpu(rps: f64, capacity_rps: f64) -> f64 {
    if capacity_rps <= 0.0 {
        return 100.0;
    }
    100.0 * (1.0 - (-rps / capacity_rps).exp())
}
