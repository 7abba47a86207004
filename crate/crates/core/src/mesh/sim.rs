//! The simulated world: instances, resilience state and the request path.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use futures::channel::oneshot;
use futures::future::{select, Either, LocalBoxFuture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::registry::{resolve_vip, ClusterInstance, Registry};
use super::resilience::{Admission, Bulkhead, CircuitBreaker};
use super::runtime::{Gate, Runtime, SimTime};
use super::topology::{LatencySpec, Service, StepTarget, Topology};
use crate::edge::{EdgeError, EdgeFilter, ExperimentEvent};
use crate::fit::{
    propagate, should_inject, ExperimentId, FaultAction, GroupRole, InjectionKind, RequestContext,
    UserId,
};
use crate::telemetry::{
    synthetic_cpu, ClusterSeries, CommandEvent, DependencyId, DependencyKey, InboundId, KpiEvent,
    Telemetry, DEFAULT_AVAILABILITY_DELAY_SECS, SPS_CHANNEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub users: u64,
    /// Total user requests per virtual second.
    pub request_rate: f64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            users: 10_000,
            request_rate: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub availability_delay_secs: u64,
    pub max_sampling_pct: f64,
    pub workload: Workload,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            availability_delay_secs: DEFAULT_AVAILABILITY_DELAY_SECS,
            max_sampling_pct: 50.0,
            workload: Workload::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Success,
    FallbackServed,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallDetail {
    None,
    Timeout,
    InjectedFailure,
    BulkheadRejected,
    ShortCircuited,
    DownstreamError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallOutcome {
    pub status: CallStatus,
    pub latency_ms: f64,
    pub detail: CallDetail,
}

/// Per-command counters, summed over the instances of a cluster.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandCounters {
    pub submissions: u64,
    pub success: u64,
    pub fallback_served: u64,
    pub error: u64,
    pub thread_pool_rejected: u64,
    pub short_circuited: u64,
    pub timeouts: u64,
    pub max_active: u32,
}

impl CommandCounters {
    fn merge(&mut self, o: &CommandCounters) {
        self.submissions += o.submissions;
        self.success += o.success;
        self.fallback_served += o.fallback_served;
        self.error += o.error;
        self.thread_pool_rejected += o.thread_pool_rejected;
        self.short_circuited += o.short_circuited;
        self.timeouts += o.timeouts;
        self.max_active = self.max_active.max(o.max_active);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
    #[error("cluster {0} is already running")]
    ClusterExists(String),
    #[error("vip {0} is already advertised")]
    VipInUse(String),
    #[error("unknown {kind} {name} in service {service}")]
    UnknownDependency {
        service: String,
        kind: &'static str,
        name: String,
    },
    #[error(transparent)]
    Edge(#[from] EdgeError),
}

/// Timeouts and retries an instance actually runs with, after dynamic
/// property overrides. Indexed like the service's commands and clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub command_timeout_ms: Vec<u64>,
    pub client_timeout_ms: Vec<u64>,
    pub client_retries: Vec<u32>,
}

impl EffectiveConfig {
    /// Recognised keys: `command.<name>.timeout_ms`,
    /// `client.<name>.timeout_ms` and `client.<name>.retries`. Values that
    /// fail to parse are ignored.
    pub fn resolve(service: &Service, props: &BTreeMap<String, String>) -> Self {
        fn get<T: std::str::FromStr>(props: &BTreeMap<String, String>, key: String) -> Option<T> {
            props.get(&key).and_then(|v| v.trim().parse().ok())
        }
        Self {
            command_timeout_ms: service
                .commands
                .iter()
                .map(|c| {
                    get(props, format!("command.{}.timeout_ms", c.spec.name))
                        .filter(|&v: &u64| v > 0)
                        .unwrap_or(c.spec.timeout_ms)
                })
                .collect(),
            client_timeout_ms: service
                .clients
                .iter()
                .map(|c| {
                    get(props, format!("client.{}.timeout_ms", c.spec.name))
                        .filter(|&v: &u64| v > 0)
                        .unwrap_or(c.spec.per_try_timeout_ms)
                })
                .collect(),
            client_retries: service
                .clients
                .iter()
                .map(|c| {
                    get(props, format!("client.{}.retries", c.spec.name)).unwrap_or(c.spec.retries)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub name: String,
    pub service: String,
    pub vip: String,
    pub role: GroupRole,
    pub experiment: Option<ExperimentId>,
    pub instances: Vec<usize>,
    pub live: bool,
}

/// Request for a new cluster of an existing service.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionSpec {
    pub service: String,
    pub cluster: String,
    pub vip: String,
    pub size: u32,
    pub role: GroupRole,
    pub experiment: Option<ExperimentId>,
    pub properties: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
enum Latency {
    Const(f64),
    LogNormal(LogNormal<f64>),
}

impl Latency {
    fn new(spec: &LatencySpec) -> Self {
        if spec.median_ms <= 0.0 || spec.sigma <= 0.0 {
            return Latency::Const(spec.median_ms.max(0.0));
        }
        LogNormal::new(spec.median_ms.ln(), spec.sigma)
            .map_or(Latency::Const(spec.median_ms), Latency::LogNormal)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Latency::Const(v) => *v,
            Latency::LogNormal(d) => d.sample(rng),
        }
    }
}

struct InstanceState {
    cluster: usize,
    service: usize,
    config: EffectiveConfig,
    bulkheads: Vec<Bulkhead>,
    breakers: Vec<CircuitBreaker>,
    counters: Vec<CommandCounters>,
    first_request: Option<BTreeMap<String, String>>,
}

struct ClusterState {
    info: ClusterInfo,
    service: usize,
    series: ClusterSeries,
    inbound: InboundId,
    command_deps: Vec<DependencyId>,
    client_deps: Vec<DependencyId>,
}

struct World {
    registry: Registry,
    instances: Vec<InstanceState>,
    clusters: Vec<ClusterState>,
    cluster_index: HashMap<String, usize>,
    edge: EdgeFilter,
    telemetry: Telemetry,
    rng: ChaCha8Rng,
    in_flight: HashMap<ExperimentId, u64>,
}

impl World {
    fn pick(&mut self, vip: &str, ctx: &RequestContext) -> Option<usize> {
        let healthy = resolve_vip(vip, &ctx.routing_overrides, &self.registry);
        match healthy.len() {
            0 => None,
            1 => Some(healthy[0]),
            n => Some(healthy[self.rng.random_range(0..n)]),
        }
    }
}

struct Core {
    rt: Runtime,
    topo: Rc<Topology>,
    world: RefCell<World>,
    base_latency: Vec<Latency>,
    work_latency: Vec<Vec<Option<Latency>>>,
    traffic_gate: Gate,
    traffic_enabled: Cell<bool>,
    workload: Cell<Workload>,
    traffic_rng: RefCell<ChaCha8Rng>,
}

/// A deterministic simulated mesh. Everything runs on one thread in
/// virtual time; two simulations built from the same topology and config
/// produce identical event streams.
pub struct Simulation {
    core: Rc<Core>,
}

impl Drop for Simulation {
    fn drop(&mut self) {
        self.core.rt.shutdown();
    }
}

impl Simulation {
    pub fn new(topology: Topology, config: SimConfig) -> Self {
        let topo = Rc::new(topology);
        let base_latency = topo
            .services
            .iter()
            .map(|s| Latency::new(&s.spec.base_latency))
            .collect();
        let work_latency = topo
            .services
            .iter()
            .map(|s| {
                s.commands
                    .iter()
                    .map(|c| c.spec.work_latency.as_ref().map(Latency::new))
                    .collect()
            })
            .collect();
        let world = World {
            registry: Registry::default(),
            instances: Vec::new(),
            clusters: Vec::new(),
            cluster_index: HashMap::new(),
            edge: EdgeFilter::new(config.max_sampling_pct),
            telemetry: Telemetry::new(config.availability_delay_secs),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            in_flight: HashMap::new(),
        };
        let core = Rc::new(Core {
            rt: Runtime::new(),
            topo: topo.clone(),
            world: RefCell::new(world),
            base_latency,
            work_latency,
            traffic_gate: Gate::new(false),
            traffic_enabled: Cell::new(true),
            workload: Cell::new(config.workload),
            traffic_rng: RefCell::new(ChaCha8Rng::seed_from_u64(
                config.seed ^ 0x7a5f_9c3e_11d4_b6a1,
            )),
        });
        let sim = Self { core };
        for s in &topo.services {
            sim.provision_cluster(ProvisionSpec {
                service: s.spec.name.clone(),
                cluster: s.spec.name.clone(),
                vip: s.spec.vip.clone(),
                size: s.spec.cluster_size,
                role: GroupRole::None,
                experiment: None,
                properties: s.spec.properties.clone(),
            })
            .expect("validated topology provisions cleanly");
        }
        sim.refresh_gate();
        sim.core.rt.spawn(traffic_loop(sim.core.clone()));
        sim
    }

    pub fn topology(&self) -> &Topology {
        &self.core.topo
    }

    pub fn runtime(&self) -> &Runtime {
        &self.core.rt
    }

    pub fn now(&self) -> SimTime {
        self.core.rt.now()
    }

    pub fn telemetry(&self) -> Ref<'_, Telemetry> {
        Ref::map(self.core.world.borrow(), |w| &w.telemetry)
    }

    pub fn with_telemetry_mut<R>(&self, f: impl FnOnce(&mut Telemetry) -> R) -> R {
        f(&mut self.core.world.borrow_mut().telemetry)
    }

    pub fn registry(&self) -> Ref<'_, Registry> {
        Ref::map(self.core.world.borrow(), |w| &w.registry)
    }

    pub fn edge(&self) -> Ref<'_, EdgeFilter> {
        Ref::map(self.core.world.borrow(), |w| &w.edge)
    }

    pub fn workload(&self) -> Workload {
        self.core.workload.get()
    }

    pub fn set_workload(&self, workload: Workload) {
        self.core.workload.set(workload);
        self.refresh_gate();
    }

    /// Pauses or resumes user traffic. Requests already in flight finish.
    pub fn set_traffic(&self, enabled: bool) {
        self.core.traffic_enabled.set(enabled);
        self.refresh_gate();
    }

    pub fn traffic_enabled(&self) -> bool {
        self.core.traffic_enabled.get()
    }

    fn refresh_gate(&self) {
        let w = self.core.workload.get();
        if self.core.traffic_enabled.get() && w.request_rate > 0.0 && w.users > 0 {
            self.core.traffic_gate.open();
        } else {
            self.core.traffic_gate.close();
        }
    }

    /// Runs through the end of the current second and flushes per-second
    /// derived metrics for it. Returns the second now starting.
    pub fn step_second(&self) -> u64 {
        let sec = self.now().second();
        self.core.rt.run_until(SimTime::from_secs(sec + 1));
        self.flush_second(sec);
        sec + 1
    }

    pub fn run_for_secs(&self, secs: u64) {
        for _ in 0..secs {
            self.step_second();
        }
    }

    /// Steps whole seconds until the clock reaches `sec`.
    pub fn run_until_second(&self, sec: u64) {
        while self.now() < SimTime::from_secs(sec) {
            self.step_second();
        }
    }

    fn flush_second(&self, sec: u64) {
        let topo = &self.core.topo;
        let mut w = self.core.world.borrow_mut();
        let w = &mut *w;
        for c in &w.clusters {
            if !c.info.live {
                continue;
            }
            let healthy = w.registry.healthy(&c.info.vip).len().max(1) as f64;
            let requests = w
                .telemetry
                .aggregates
                .value_at(c.series.requests, sec)
                .unwrap_or(0.0);
            let cpu = synthetic_cpu(
                requests / healthy,
                topo.services[c.service].spec.cpu_capacity_rps,
            );
            w.telemetry.record_cpu(&c.series, sec, cpu);
        }
    }

    /// Removes every KPI event recorded so far from the log and returns
    /// them. Logging starts on the first call to
    /// [`enable_kpi_log`](Self::enable_kpi_log).
    pub fn enable_kpi_log(&self) {
        self.core.world.borrow_mut().telemetry.enable_kpi_log();
    }

    pub fn take_kpi_log(&self) -> Vec<KpiEvent> {
        self.core.world.borrow_mut().telemetry.take_kpi_log()
    }

    pub fn publish(&self, event: ExperimentEvent) -> Result<(), SimError> {
        Ok(self.core.world.borrow_mut().edge.publish(event)?)
    }

    pub fn unpublish(&self, experiment: &ExperimentId) -> Option<ExperimentEvent> {
        self.core.world.borrow_mut().edge.unpublish(experiment)
    }

    /// User requests of `experiment` that entered the edge and have not
    /// completed yet.
    pub fn in_flight(&self, experiment: &ExperimentId) -> u64 {
        self.core
            .world
            .borrow()
            .in_flight
            .get(experiment)
            .copied()
            .unwrap_or(0)
    }

    /// Properties are attached before the instances register, so the first
    /// request any of them serves already sees them.
    pub fn provision_cluster(&self, spec: ProvisionSpec) -> Result<ClusterInfo, SimError> {
        let topo = self.core.topo.clone();
        let svc_idx = topo
            .service_by_name(&spec.service)
            .ok_or_else(|| SimError::UnknownService(spec.service.clone()))?;
        let service = &topo.services[svc_idx];
        let mut w = self.core.world.borrow_mut();
        let w = &mut *w;
        if let Some(&i) = w.cluster_index.get(&spec.cluster) {
            if w.clusters[i].info.live {
                return Err(SimError::ClusterExists(spec.cluster));
            }
        }
        if !w.registry.healthy(&spec.vip).is_empty() {
            return Err(SimError::VipInUse(spec.vip));
        }
        let cluster_idx = w.clusters.len();
        let commands: Vec<&str> = service
            .commands
            .iter()
            .map(|c| c.spec.name.as_str())
            .collect();
        let series = w
            .telemetry
            .register_cluster(&spec.cluster, spec.role, &commands);
        let inbound = w.telemetry.register_inbound(&spec.cluster);
        let dep = |t: &mut Telemetry, kind, name: &str| {
            t.register_dependency(DependencyKey {
                cluster: spec.cluster.clone(),
                kind,
                name: name.to_string(),
            })
        };
        let command_deps = service
            .commands
            .iter()
            .map(|c| dep(&mut w.telemetry, InjectionKind::Command, &c.spec.name))
            .collect();
        let client_deps = service
            .clients
            .iter()
            .map(|c| dep(&mut w.telemetry, InjectionKind::RpcClient, &c.spec.name))
            .collect();
        let config = EffectiveConfig::resolve(service, &spec.properties);
        let mut ids = Vec::with_capacity(spec.size as usize);
        for n in 1..=spec.size.max(1) {
            let idx = w.registry.register(ClusterInstance {
                instance_id: format!("{}-{:04}", spec.cluster, n),
                cluster: spec.cluster.clone(),
                vip: spec.vip.clone(),
                healthy: true,
                properties: spec.properties.clone(),
                group: spec.role,
                experiment: spec.experiment.clone(),
            });
            debug_assert_eq!(idx, w.instances.len());
            w.instances.push(InstanceState {
                cluster: cluster_idx,
                service: svc_idx,
                config: config.clone(),
                bulkheads: service
                    .commands
                    .iter()
                    .map(|c| Bulkhead::new(c.spec.bulkhead_size))
                    .collect(),
                breakers: service
                    .commands
                    .iter()
                    .map(|c| CircuitBreaker::new(c.spec.circuit_breaker))
                    .collect(),
                counters: vec![CommandCounters::default(); service.commands.len()],
                first_request: None,
            });
            ids.push(idx);
        }
        let info = ClusterInfo {
            name: spec.cluster.clone(),
            service: spec.service,
            vip: spec.vip,
            role: spec.role,
            experiment: spec.experiment,
            instances: ids,
            live: true,
        };
        w.clusters.push(ClusterState {
            info: info.clone(),
            service: svc_idx,
            series,
            inbound,
            command_deps,
            client_deps,
        });
        w.cluster_index.insert(spec.cluster, cluster_idx);
        Ok(info)
    }

    /// Deregisters every instance of the cluster. Work already running on
    /// them completes.
    pub fn teardown_cluster(&self, name: &str) -> Result<(), SimError> {
        let mut w = self.core.world.borrow_mut();
        let w = &mut *w;
        let idx = *w
            .cluster_index
            .get(name)
            .ok_or_else(|| SimError::UnknownCluster(name.to_string()))?;
        let c = &mut w.clusters[idx];
        for &i in &c.info.instances {
            w.registry.deregister(i);
        }
        c.info.live = false;
        Ok(())
    }

    pub fn cluster(&self, name: &str) -> Option<ClusterInfo> {
        let w = self.core.world.borrow();
        w.cluster_index
            .get(name)
            .map(|&i| w.clusters[i].info.clone())
    }

    pub fn clusters(&self) -> Vec<ClusterInfo> {
        self.core
            .world
            .borrow()
            .clusters
            .iter()
            .map(|c| c.info.clone())
            .collect()
    }

    pub fn instance(&self, idx: usize) -> ClusterInstance {
        self.core.world.borrow().registry.get(idx).clone()
    }

    /// VIPs with at least one healthy instance.
    pub fn live_vips(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .core
            .world
            .borrow()
            .registry
            .live_vips()
            .map(str::to_string)
            .collect();
        v.sort();
        v
    }

    /// Properties of the cluster's first instance.
    pub fn cluster_properties(&self, name: &str) -> Option<BTreeMap<String, String>> {
        let w = self.core.world.borrow();
        let c = &w.clusters[*w.cluster_index.get(name)?];
        c.info
            .instances
            .first()
            .map(|&i| w.registry.get(i).properties.clone())
    }

    pub fn effective_config(&self, cluster: &str) -> Option<EffectiveConfig> {
        let w = self.core.world.borrow();
        let c = &w.clusters[*w.cluster_index.get(cluster)?];
        c.info
            .instances
            .first()
            .map(|&i| w.instances[i].config.clone())
    }

    /// Updates a dynamic property on every instance of a cluster.
    pub fn set_cluster_property(
        &self,
        cluster: &str,
        key: &str,
        value: &str,
    ) -> Result<(), SimError> {
        let topo = self.core.topo.clone();
        let mut w = self.core.world.borrow_mut();
        let w = &mut *w;
        let idx = *w
            .cluster_index
            .get(cluster)
            .ok_or_else(|| SimError::UnknownCluster(cluster.to_string()))?;
        let service = &topo.services[w.clusters[idx].service];
        for &i in &w.clusters[idx].info.instances {
            let inst = w.registry.get_mut(i);
            inst.properties.insert(key.to_string(), value.to_string());
            w.instances[i].config = EffectiveConfig::resolve(service, &inst.properties);
        }
        Ok(())
    }

    /// Properties an instance held when it served its first request.
    pub fn first_request_properties(&self, idx: usize) -> Option<BTreeMap<String, String>> {
        self.core
            .world
            .borrow()
            .instances
            .get(idx)?
            .first_request
            .clone()
    }

    /// Counters of `command` summed over all instances of `cluster`.
    pub fn command_counters(&self, cluster: &str, command: &str) -> Option<CommandCounters> {
        let w = self.core.world.borrow();
        let c = &w.clusters[*w.cluster_index.get(cluster)?];
        let cmd = self.core.topo.services[c.service].command(command)?;
        let mut total = CommandCounters::default();
        for &i in &c.info.instances {
            total.merge(&w.instances[i].counters[cmd]);
        }
        Some(total)
    }

    fn locate(&self, instance: usize, kind: InjectionKind, name: &str) -> Result<usize, SimError> {
        let svc_idx = self.core.world.borrow().instances[instance].service;
        let service = &self.core.topo.services[svc_idx];
        let found = match kind {
            InjectionKind::Command => service.command(name),
            InjectionKind::RpcClient => service.client(name),
        };
        found.ok_or_else(|| SimError::UnknownDependency {
            service: service.spec.name.clone(),
            kind: kind.as_str(),
            name: name.to_string(),
        })
    }

    /// Executes one guarded command on `instance`, driving the simulation
    /// (including any background traffic) until it returns.
    pub fn call_command(
        &self,
        ctx: RequestContext,
        instance: usize,
        command: &str,
    ) -> Result<CallOutcome, SimError> {
        let cmd = self.locate(instance, InjectionKind::Command, command)?;
        let core = self.core.clone();
        Ok(self
            .core
            .rt
            .block_on(async move { execute_command(&core, instance, cmd, &ctx).await }))
    }

    /// Executes one RPC client call from `instance`.
    pub fn call_rpc(
        &self,
        ctx: RequestContext,
        instance: usize,
        client: &str,
    ) -> Result<CallOutcome, SimError> {
        let cl = self.locate(instance, InjectionKind::RpcClient, client)?;
        let core = self.core.clone();
        Ok(self
            .core
            .rt
            .block_on(async move { execute_rpc(&core, instance, cl, &ctx).await }))
    }

    /// Starts a command without waiting for it; the receiver resolves once
    /// the simulation has been run past its completion.
    pub fn submit_command(
        &self,
        ctx: RequestContext,
        instance: usize,
        command: &str,
    ) -> Result<oneshot::Receiver<CallOutcome>, SimError> {
        let cmd = self.locate(instance, InjectionKind::Command, command)?;
        let core = self.core.clone();
        Ok(self
            .core
            .rt
            .spawn_with_handle(async move { execute_command(&core, instance, cmd, &ctx).await }))
    }

    /// Sends one user request through the edge and returns whether it
    /// succeeded.
    pub fn call_edge(&self, user: UserId) -> bool {
        let core = self.core.clone();
        self.core.rt.block_on(user_request(core, user))
    }
}

/// Runs `workload` against a fresh simulation for `duration_secs` and
/// returns every KPI event in completion order.
pub fn drive_traffic(
    topology: Topology,
    workload: Workload,
    duration_secs: u64,
    seed: u64,
) -> Vec<KpiEvent> {
    let sim = Simulation::new(
        topology,
        SimConfig {
            seed,
            workload,
            ..SimConfig::default()
        },
    );
    sim.enable_kpi_log();
    sim.run_for_secs(duration_secs);
    sim.take_kpi_log()
}

async fn traffic_loop(core: Rc<Core>) {
    loop {
        if !core.traffic_gate.is_open() {
            core.traffic_gate.wait().await;
            continue;
        }
        let w = core.workload.get();
        let gap_ms = {
            let mut rng = core.traffic_rng.borrow_mut();
            Exp::new(w.request_rate / 1000.0).map_or(f64::INFINITY, |d| d.sample(&mut *rng))
        };
        core.rt.sleep(SimTime::from_ms_f64(gap_ms)).await;
        if !core.traffic_gate.is_open() {
            continue;
        }
        let user = UserId(
            core.traffic_rng
                .borrow_mut()
                .random_range(0..w.users.max(1)),
        );
        let c = core.clone();
        core.rt.spawn(async move {
            user_request(c, user).await;
        });
    }
}

async fn user_request(core: Rc<Core>, user: UserId) -> bool {
    let topo = core.topo.clone();
    let edge = &topo.services[topo.edge_service];
    let (ctx, target, handler) = {
        let mut w = core.world.borrow_mut();
        let w = &mut *w;
        let ctx = w.edge.filter_request(user, &mut w.telemetry);
        if let Some(exp) = ctx.group.experiment() {
            *w.in_flight.entry(exp.clone()).or_insert(0) += 1;
        }
        let total: f64 = edge.handlers.iter().map(|h| h.spec.weight.max(0.0)).sum();
        let mut draw = w.rng.random::<f64>() * total;
        let handler = edge
            .handlers
            .iter()
            .position(|h| {
                draw -= h.spec.weight.max(0.0);
                draw < 0.0
            })
            .unwrap_or(edge.handlers.len() - 1);
        let target = w.pick(&edge.spec.vip, &ctx);
        (ctx, target, handler)
    };
    let group = ctx.group.clone();
    let ok = match target {
        Some(inst) => {
            serve(
                core.clone(),
                inst,
                handler,
                ctx.with_hop(edge.spec.name.clone()),
            )
            .await
        }
        None => false,
    };
    let mut w = core.world.borrow_mut();
    let at = core.rt.now();
    if let Some(exp) = group.experiment() {
        if let Some(n) = w.in_flight.get_mut(exp) {
            *n = n.saturating_sub(1);
        }
    }
    let channel = edge.handlers[handler]
        .spec
        .kpi
        .clone()
        .unwrap_or_else(|| SPS_CHANNEL.to_string());
    w.telemetry.record_event(KpiEvent {
        at,
        user,
        group,
        channel,
        success: ok,
    });
    ok
}

fn serve(
    core: Rc<Core>,
    inst: usize,
    handler: usize,
    ctx: RequestContext,
) -> LocalBoxFuture<'static, bool> {
    Box::pin(async move {
        let topo = core.topo.clone();
        let start = core.rt.now();
        let (svc_idx, base) = {
            let mut w = core.world.borrow_mut();
            let w = &mut *w;
            let st = &mut w.instances[inst];
            if st.first_request.is_none() {
                st.first_request = Some(w.registry.get(inst).properties.clone());
            }
            let svc = st.service;
            w.telemetry
                .record_inbound(w.clusters[st.cluster].inbound, start);
            (svc, core.base_latency[svc].sample(&mut w.rng))
        };
        core.rt.sleep(SimTime::from_ms_f64(base)).await;
        let h = &topo.services[svc_idx].handlers[handler];
        let mut ok = true;
        for step in &h.steps {
            if step.probability < 1.0
                && core.world.borrow_mut().rng.random::<f64>() >= step.probability
            {
                continue;
            }
            let outcome = match step.target {
                StepTarget::Command(c) => execute_command(&core, inst, c, &ctx).await,
                StepTarget::Client(c) => execute_rpc(&core, inst, c, &ctx).await,
            };
            if outcome.status == CallStatus::Error && step.required {
                ok = false;
                break;
            }
        }
        let mut w = core.world.borrow_mut();
        let w = &mut *w;
        if ok
            && h.spec.background_error_rate > 0.0
            && w.rng.random::<f64>() < h.spec.background_error_rate
        {
            ok = false;
        }
        let now = core.rt.now();
        let cluster = w.instances[inst].cluster;
        w.telemetry.record_request(
            &w.clusters[cluster].series,
            now,
            (now - start).as_ms_f64(),
            !ok,
        );
        ok
    })
}

enum Gatekeeping {
    Admitted(Admission),
    Rejected(CallDetail),
}

async fn execute_command(
    core: &Rc<Core>,
    inst: usize,
    cmd: usize,
    ctx: &RequestContext,
) -> CallOutcome {
    let topo = core.topo.clone();
    let start = core.rt.now();
    let (svc_idx, cluster) = {
        let w = core.world.borrow();
        (w.instances[inst].service, w.instances[inst].cluster)
    };
    let spec = &topo.services[svc_idx].commands[cmd].spec;
    let injection = should_inject(ctx, InjectionKind::Command, &spec.name);

    let gate = {
        let mut w = core.world.borrow_mut();
        let w = &mut *w;
        let dep = w.clusters[cluster].command_deps[cmd];
        w.telemetry.record_invocation(dep, start);
        let st = &mut w.instances[inst];
        st.counters[cmd].submissions += 1;
        match st.breakers[cmd].admit(start) {
            Admission::ShortCircuited => Gatekeeping::Rejected(CallDetail::ShortCircuited),
            admission if st.bulkheads[cmd].try_acquire() => {
                let active = st.bulkheads[cmd].active();
                st.counters[cmd].max_active = st.counters[cmd].max_active.max(active);
                w.telemetry.record_active_slots(dep, active);
                Gatekeeping::Admitted(admission)
            }
            admission => {
                st.breakers[cmd].record(start, false, admission);
                Gatekeeping::Rejected(CallDetail::BulkheadRejected)
            }
        }
    };
    let admission = match gate {
        Gatekeeping::Rejected(detail) => {
            return finish_command(core, inst, cmd, start, Err(detail))
        }
        Gatekeeping::Admitted(a) => a,
    };

    let extra_ms = match injection {
        Some(FaultAction::Fail) => {
            {
                let mut w = core.world.borrow_mut();
                let st = &mut w.instances[inst];
                st.bulkheads[cmd].release();
                st.breakers[cmd].record(start, false, admission);
            }
            return finish_command(core, inst, cmd, start, Err(CallDetail::InjectedFailure));
        }
        Some(FaultAction::AddLatency { ms }) => ms as f64,
        None => 0.0,
    };
    let own_ms = match &core.work_latency[svc_idx][cmd] {
        Some(d) => d.sample(&mut core.world.borrow_mut().rng),
        None => 0.0,
    };
    let timeout = SimTime::from_ms(
        core.world.borrow().instances[inst]
            .config
            .command_timeout_ms[cmd],
    );

    let work = {
        let core = core.clone();
        let ctx = ctx.clone();
        let clients = topo.services[svc_idx].commands[cmd].clients.clone();
        async move {
            let work_ms = extra_ms + own_ms;
            if work_ms > 0.0 {
                core.rt.sleep(SimTime::from_ms_f64(work_ms)).await;
            }
            let mut ok = true;
            for client in clients {
                if execute_rpc(&core, inst, client, &ctx).await.status == CallStatus::Error {
                    ok = false;
                    break;
                }
            }
            core.world.borrow_mut().instances[inst].bulkheads[cmd].release();
            ok
        }
    };
    let rx = core.rt.spawn_with_handle(work);
    let result = match select(rx, core.rt.sleep(timeout)).await {
        Either::Left((Ok(true), _)) => Ok(()),
        Either::Left((_, _)) => Err(CallDetail::DownstreamError),
        Either::Right(_) => Err(CallDetail::Timeout),
    };
    core.world.borrow_mut().instances[inst].breakers[cmd].record(
        core.rt.now(),
        result.is_ok(),
        admission,
    );
    finish_command(core, inst, cmd, start, result)
}

/// Applies the fallback policy and records counters for a finished command.
fn finish_command(
    core: &Core,
    inst: usize,
    cmd: usize,
    start: SimTime,
    result: Result<(), CallDetail>,
) -> CallOutcome {
    let now = core.rt.now();
    let latency_ms = (now - start).as_ms_f64();
    let mut w = core.world.borrow_mut();
    let w = &mut *w;
    let cluster = w.instances[inst].cluster;
    let spec = &core.topo.services[w.instances[inst].service].commands[cmd].spec;
    let c = &w.clusters[cluster];
    let dep = c.command_deps[cmd];
    let counters = &mut w.instances[inst].counters[cmd];
    w.telemetry.record_dependency_latency(dep, latency_ms);
    let outcome = match result {
        Ok(()) => {
            counters.success += 1;
            w.telemetry
                .record_command_event(&c.series, cmd, CommandEvent::Success, now);
            CallOutcome {
                status: CallStatus::Success,
                latency_ms,
                detail: CallDetail::None,
            }
        }
        Err(detail) => {
            let event = match detail {
                CallDetail::Timeout => {
                    counters.timeouts += 1;
                    CommandEvent::Timeout
                }
                CallDetail::BulkheadRejected => {
                    counters.thread_pool_rejected += 1;
                    CommandEvent::ThreadPoolRejected
                }
                CallDetail::ShortCircuited => {
                    counters.short_circuited += 1;
                    CommandEvent::ShortCircuited
                }
                _ => CommandEvent::Failure,
            };
            w.telemetry.record_command_event(&c.series, cmd, event, now);
            let status = if spec.has_fallback {
                w.telemetry.record_fallback(dep, spec.fallback_succeeds);
                let ev = if spec.fallback_succeeds {
                    CommandEvent::FallbackSuccess
                } else {
                    CommandEvent::FallbackFailure
                };
                w.telemetry.record_command_event(&c.series, cmd, ev, now);
                if spec.fallback_succeeds {
                    CallStatus::FallbackServed
                } else {
                    CallStatus::Error
                }
            } else {
                CallStatus::Error
            };
            match status {
                CallStatus::FallbackServed => counters.fallback_served += 1,
                _ => counters.error += 1,
            }
            CallOutcome {
                status,
                latency_ms,
                detail,
            }
        }
    };
    outcome
}

async fn execute_rpc(
    core: &Rc<Core>,
    inst: usize,
    client: usize,
    ctx: &RequestContext,
) -> CallOutcome {
    let topo = core.topo.clone();
    let start = core.rt.now();
    let (svc_idx, dep, per_try, retries) = {
        let mut w = core.world.borrow_mut();
        let w = &mut *w;
        let st = &w.instances[inst];
        let dep = w.clusters[st.cluster].client_deps[client];
        w.telemetry.record_invocation(dep, start);
        (
            st.service,
            dep,
            st.config.client_timeout_ms[client],
            st.config.client_retries[client],
        )
    };
    let spec = &topo.services[svc_idx].clients[client];
    let per_try = SimTime::from_ms(per_try);
    let mut detail = CallDetail::DownstreamError;
    let mut success = false;
    for _ in 0..=retries {
        let extra = match should_inject(ctx, InjectionKind::RpcClient, &spec.spec.name) {
            Some(FaultAction::Fail) => {
                detail = CallDetail::InjectedFailure;
                continue;
            }
            Some(FaultAction::AddLatency { ms }) => SimTime::from_ms(ms),
            None => SimTime::ZERO,
        };
        if extra >= per_try {
            core.rt.sleep(per_try).await;
            detail = CallDetail::Timeout;
            continue;
        }
        if extra > SimTime::ZERO {
            core.rt.sleep(extra).await;
        }
        let Some(target) = core.world.borrow_mut().pick(&spec.spec.target_vip, ctx) else {
            detail = CallDetail::DownstreamError;
            continue;
        };
        let child = propagate(ctx, &spec.spec.name);
        let rx = core
            .rt
            .spawn_with_handle(serve(core.clone(), target, spec.target_handler, child));
        match select(rx, core.rt.sleep(per_try - extra)).await {
            Either::Left((Ok(true), _)) => {
                success = true;
                break;
            }
            Either::Left(_) => detail = CallDetail::DownstreamError,
            Either::Right(_) => detail = CallDetail::Timeout,
        }
    }
    let latency_ms = (core.rt.now() - start).as_ms_f64();
    core.world
        .borrow_mut()
        .telemetry
        .record_dependency_latency(dep, latency_ms);
    if success {
        CallOutcome {
            status: CallStatus::Success,
            latency_ms,
            detail: CallDetail::None,
        }
    } else {
        CallOutcome {
            status: CallStatus::Error,
            latency_ms,
            detail,
        }
    }
}
