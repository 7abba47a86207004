//! The control plane bound to one simulated world.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::experiment::{
    AbortReason, AuditKind, ClusterPair, Experiment, ExperimentDefinition, ExperimentState,
};
use super::OrchestratorError;
use crate::analysis::{
    collect_metrics, judge, CanaryVerdict, DirectionOfHarm, ExperimentSeries, MetricClass,
    MetricInput, Overall,
};
use crate::config::PlatformConfig;
use crate::edge::ExperimentEvent;
use crate::fit::{ExperimentId, GroupRole};
use crate::mesh::{ProvisionSpec, Simulation, Topology};
use crate::monocle::{self, DependencySnapshot, GeneratedExperiment, History, Warning};
use crate::safety::{monitor_impact, ImpactDecision, Regions, WallClock};
use crate::telemetry::{Counts, StreamSample};

type Result<T> = std::result::Result<T, OrchestratorError>;

/// Canary and baseline size for a cluster of `size` at `pct` percent.
pub fn canary_size(size: u32, pct: f64) -> u32 {
    ((f64::from(size) * pct / 100.0).ceil() as u32).clamp(1, size.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlatformEvent {
    /// Counts for one completed second of a running experiment.
    Stream {
        experiment_id: ExperimentId,
        second: u64,
        baseline: Counts,
        canary: Counts,
    },
    State {
        experiment_id: ExperimentId,
        state: ExperimentState,
        at: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSkip {
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRun {
    pub started: Vec<ExperimentId>,
    pub skipped: Vec<ScheduleSkip>,
}

pub struct Platform {
    sim: Simulation,
    config: PlatformConfig,
    clock: Arc<dyn WallClock>,
    regions: Regions,
    experiments: BTreeMap<ExperimentId, Experiment>,
    next_id: u64,
    history: History,
    dirty: BTreeSet<ExperimentId>,
    history_dirty: bool,
    events: Vec<PlatformEvent>,
    paused_traffic: bool,
}

fn experiment_id(n: u64) -> ExperimentId {
    ExperimentId::new(format!("exp-{n:06}"))
}

fn id_number(id: &ExperimentId) -> Option<u64> {
    id.as_str().strip_prefix("exp-")?.parse().ok()
}

impl Platform {
    pub fn new(config: PlatformConfig, clock: Arc<dyn WallClock>) -> Result<Self> {
        let topology = config.topology()?;
        Self::with_topology(config, topology, clock)
    }

    pub fn with_topology(
        config: PlatformConfig,
        topology: Topology,
        clock: Arc<dyn WallClock>,
    ) -> Result<Self> {
        config.validate()?;
        let sim = Simulation::new(topology, config.sim_config());
        Ok(Self {
            sim,
            regions: Regions::new(config.regions.iter().cloned()),
            config,
            clock,
            experiments: BTreeMap::new(),
            next_id: 1,
            history: History::default(),
            dirty: BTreeSet::new(),
            history_dirty: false,
            events: Vec::new(),
            paused_traffic: false,
        })
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now_sec(&self) -> u64 {
        self.sim.now().second()
    }

    pub fn wall_clock(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn experiments(&self) -> impl Iterator<Item = &Experiment> {
        self.experiments.values()
    }

    pub fn experiment(&self, id: &ExperimentId) -> Option<&Experiment> {
        self.experiments.get(id)
    }

    pub fn regions(&self) -> &Regions {
        &self.regions
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn set_history(&mut self, history: History) {
        self.history = history;
    }

    /// Experiments changed since the last call.
    pub fn take_dirty(&mut self) -> Vec<Experiment> {
        std::mem::take(&mut self.dirty)
            .into_iter()
            .filter_map(|id| self.experiments.get(&id).cloned())
            .collect()
    }

    pub fn take_history_dirty(&mut self) -> bool {
        std::mem::take(&mut self.history_dirty)
    }

    pub fn take_events(&mut self) -> Vec<PlatformEvent> {
        std::mem::take(&mut self.events)
    }

    /// Whether any experiment still needs ticks to progress.
    pub fn is_settled(&self) -> bool {
        self.experiments
            .values()
            .all(|e| e.state.is_terminal() || e.state == ExperimentState::Created)
    }

    fn get(&self, id: &ExperimentId) -> Result<&Experiment> {
        self.experiments
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownExperiment(id.clone()))
    }

    fn get_mut(&mut self, id: &ExperimentId) -> Result<&mut Experiment> {
        self.experiments
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::UnknownExperiment(id.clone()))
    }

    fn set_state(&mut self, id: &ExperimentId, to: ExperimentState) -> Result<()> {
        let at = self.now_sec();
        let wall = self.clock.now();
        self.get_mut(id)?.transition(to, at, wall)?;
        log::info!("{id}: {to}");
        self.dirty.insert(id.clone());
        self.events.push(PlatformEvent::State {
            experiment_id: id.clone(),
            state: to,
            at,
        });
        Ok(())
    }

    fn note(&mut self, id: &ExperimentId, kind: AuditKind) {
        let at = self.now_sec();
        let wall = self.clock.now();
        if let Some(e) = self.experiments.get_mut(id) {
            e.note(at, wall, kind);
            self.dirty.insert(id.clone());
        }
    }

    pub fn validate_definition(&self, def: &ExperimentDefinition) -> Vec<String> {
        let mut problems = Vec::new();
        let topo = self.sim.topology();
        if topo.service_by_name(&def.observed_cluster).is_none() {
            problems.push(format!(
                "observed_cluster: unknown cluster {}",
                def.observed_cluster
            ));
        }
        if let Err(e) = def.fault.validate() {
            problems.push(format!("fault: {e}"));
        } else if !topo.has_injection_point(&def.fault.injection_point) {
            problems.push(format!(
                "fault: unknown injection point {}",
                def.fault.injection_point
            ));
        }
        let max = self.config.orchestrator.max_sampling_pct;
        if !(def.sampling_pct > 0.0 && def.sampling_pct <= max) {
            problems.push(format!(
                "sampling_pct: {} outside (0, {max}]",
                def.sampling_pct
            ));
        }
        if def.duration_secs == 0 {
            problems.push("duration_secs: must be positive".into());
        }
        if let Some(r) = &def.region {
            if self.regions.get(r).is_none() {
                problems.push(format!("region: unknown region {r}"));
            }
        }
        problems
    }

    pub fn create(&mut self, def: ExperimentDefinition) -> Result<ExperimentId> {
        let problems = self.validate_definition(&def);
        if !problems.is_empty() {
            return Err(OrchestratorError::Validation(problems));
        }
        let id = experiment_id(self.next_id);
        self.next_id += 1;
        let region = def
            .region
            .clone()
            .unwrap_or_else(|| self.config.region.clone());
        let exp = Experiment::new(id.clone(), def, region, self.now_sec());
        self.experiments.insert(id.clone(), exp);
        self.dirty.insert(id.clone());
        self.events.push(PlatformEvent::State {
            experiment_id: id.clone(),
            state: ExperimentState::Created,
            at: self.now_sec(),
        });
        Ok(id)
    }

    /// Admission, provisioning and publication, all within the current
    /// virtual instant.
    pub fn start(&mut self, id: &ExperimentId) -> Result<()> {
        let exp = self.get(id)?;
        if exp.state != ExperimentState::Created {
            return Err(OrchestratorError::Conflict(format!(
                "{id} is {}, not Created",
                exp.state
            )));
        }
        let def = exp.definition.clone();
        let region = exp.region.clone();
        if let Some(other) = self.experiments.values().find(|e| {
            &e.id != id
                && e.definition.observed_cluster == def.observed_cluster
                && !e.state.is_terminal()
                && e.state != ExperimentState::Created
        }) {
            return Err(OrchestratorError::Conflict(format!(
                "cluster {} already has experiment {} in progress",
                def.observed_cluster, other.id
            )));
        }
        let wall = self.clock.now();
        if let Err(reason) =
            self.regions
                .admit(&region, id, def.sampling_pct, wall, &self.config.safety)
        {
            log::warn!("{id}: rejected ({})", reason.code());
            self.note(id, AuditKind::SafetyRejected { reason });
            return Err(OrchestratorError::Safety(reason));
        }
        self.set_state(id, ExperimentState::Provisioning)?;
        match self.provision(id, &def) {
            Ok(pair) => {
                let now = self.now_sec();
                let event = ExperimentEvent {
                    experiment_id: id.clone(),
                    sampling_pct: def.sampling_pct,
                    fault: def.fault.clone(),
                    vip_original: self.original_vip(&def.observed_cluster),
                    vip_baseline: pair.baseline_vip.clone(),
                    vip_canary: pair.canary_vip.clone(),
                };
                self.get_mut(id)?.clusters = Some(pair);
                self.sim.with_telemetry_mut(|t| t.stream.start_job(id, now));
                if let Err(e) = self.sim.publish(event) {
                    self.fail(id, format!("publishing: {e}"));
                    return Err(e.into());
                }
                self.get_mut(id)?.started_at = Some(now);
                self.set_state(id, ExperimentState::Running)
            }
            Err(e) => {
                self.fail(id, format!("provisioning: {e}"));
                Err(e)
            }
        }
    }

    fn original_vip(&self, cluster: &str) -> String {
        self.sim.cluster(cluster).map(|c| c.vip).unwrap_or_default()
    }

    fn provision(&mut self, id: &ExperimentId, def: &ExperimentDefinition) -> Result<ClusterPair> {
        let original = self
            .sim
            .cluster(&def.observed_cluster)
            .ok_or_else(|| crate::mesh::SimError::UnknownCluster(def.observed_cluster.clone()))?;
        let properties = self
            .sim
            .cluster_properties(&original.name)
            .unwrap_or_default();
        let size = canary_size(original.instances.len() as u32, def.sampling_pct);
        let pair = ClusterPair {
            baseline: format!("{}-chap-baseline", original.name),
            canary: format!("{}-chap-canary", original.name),
            baseline_vip: format!("{}-chap-baseline", original.vip),
            canary_vip: format!("{}-chap-canary", original.vip),
            size,
        };
        for (cluster, vip, role) in [
            (&pair.baseline, &pair.baseline_vip, GroupRole::Baseline),
            (&pair.canary, &pair.canary_vip, GroupRole::Canary),
        ] {
            let spec = ProvisionSpec {
                service: original.service.clone(),
                cluster: cluster.clone(),
                vip: vip.clone(),
                size,
                role,
                experiment: Some(id.clone()),
                properties: properties.clone(),
            };
            if let Err(e) = self.sim.provision_cluster(spec) {
                // keep whatever was created so fail() can reap it
                self.get_mut(id)?.clusters = Some(pair.clone());
                return Err(e.into());
            }
        }
        Ok(pair)
    }

    /// Releases everything the experiment holds. Safe to repeat.
    fn release_resources(&mut self, id: &ExperimentId) {
        self.sim.unpublish(id);
        let now = self.now_sec();
        if let Some(exp) = self.experiments.get(id) {
            if let Some(pair) = &exp.clusters {
                for name in [&pair.baseline, &pair.canary] {
                    let owned = self
                        .sim
                        .cluster(name)
                        .is_some_and(|c| c.live && c.experiment.as_ref() == Some(id));
                    if owned {
                        let _ = self.sim.teardown_cluster(name);
                    }
                }
            }
            let region = exp.region.clone();
            self.regions.release(&region, id);
        }
        self.sim.with_telemetry_mut(|t| t.stream.stop_job(id, now));
    }

    fn fail(&mut self, id: &ExperimentId, message: String) {
        log::error!("{id}: {message}");
        self.release_resources(id);
        let now = self.now_sec();
        if let Some(e) = self.experiments.get_mut(id) {
            e.failure = Some(message);
            e.ended_at.get_or_insert(now);
        }
        let _ = self.set_state(id, ExperimentState::Failed);
        self.finish_history(id);
    }

    pub fn abort(&mut self, id: &ExperimentId, reason: AbortReason) -> Result<()> {
        let state = self.get(id)?.state;
        if state != ExperimentState::Running {
            return Err(OrchestratorError::Conflict(format!(
                "{id} is {state}; only running experiments can be aborted"
            )));
        }
        self.begin_stop(id, Some(reason))
    }

    /// Marks a live experiment failed and releases what it holds.
    pub fn fail_experiment(&mut self, id: &ExperimentId, message: &str) -> Result<()> {
        let state = self.get(id)?.state;
        if state.is_terminal() || state == ExperimentState::Created {
            return Err(OrchestratorError::Conflict(format!("{id} is {state}")));
        }
        self.fail(id, message.to_string());
        Ok(())
    }

    fn begin_stop(&mut self, id: &ExperimentId, reason: Option<AbortReason>) -> Result<()> {
        let now = self.now_sec();
        let exp = self.get_mut(id)?;
        exp.abort_reason = reason;
        exp.ended_at = Some(now);
        self.set_state(id, ExperimentState::Stopping)?;
        self.sim.unpublish(id);
        Ok(())
    }

    /// Marks a failover and aborts every running experiment in the region.
    pub fn set_failover(&mut self, region: &str, in_progress: bool) -> Result<Vec<ExperimentId>> {
        self.regions
            .set_failover(region, in_progress)
            .map_err(|_| {
                OrchestratorError::Validation(vec![format!("region: unknown region {region}")])
            })?;
        let mut aborted = Vec::new();
        if in_progress {
            let ids: Vec<ExperimentId> = self
                .experiments
                .values()
                .filter(|e| e.region == region && e.state == ExperimentState::Running)
                .map(|e| e.id.clone())
                .collect();
            for id in ids {
                self.note(
                    &id,
                    AuditKind::Note {
                        message: format!("failover started in {region}"),
                    },
                );
                self.begin_stop(&id, Some(AbortReason::SafetyViolation))?;
                aborted.push(id);
            }
        }
        Ok(aborted)
    }

    pub fn set_property(&mut self, cluster: &str, key: &str, value: &str) -> Result<()> {
        Ok(self.sim.set_cluster_property(cluster, key, value)?)
    }

    fn update_traffic_pause(&mut self) {
        use ExperimentState::*;
        let waiting = self.experiments.values().any(|e| e.state == Analyzing);
        let active = self
            .experiments
            .values()
            .any(|e| matches!(e.state, Provisioning | Running | Stopping));
        let pause = self.config.orchestrator.pause_traffic_when_idle && waiting && !active;
        if pause != self.paused_traffic {
            self.sim.set_traffic(!pause);
            self.paused_traffic = pause;
        }
    }

    /// Advances the world by one virtual second and moves every experiment
    /// along.
    pub fn tick(&mut self) {
        self.update_traffic_pause();
        let sec = self.sim.step_second();
        let ids: Vec<ExperimentId> = self
            .experiments
            .values()
            .filter(|e| !e.state.is_terminal() && e.state != ExperimentState::Created)
            .map(|e| e.id.clone())
            .collect();
        for id in ids {
            if let Err(e) = self.advance(&id, sec) {
                self.fail(&id, e.to_string());
            }
        }
    }

    pub fn run_for(&mut self, secs: u64) {
        for _ in 0..secs {
            self.tick();
        }
    }

    /// Ticks until no experiment is in flight, or `max_secs` have passed.
    pub fn run_until_settled(&mut self, max_secs: u64) -> bool {
        for _ in 0..max_secs {
            if self.is_settled() {
                return true;
            }
            self.tick();
        }
        self.is_settled()
    }

    fn advance(&mut self, id: &ExperimentId, sec: u64) -> Result<()> {
        let exp = self.get(id)?;
        match exp.state {
            ExperimentState::Running => {
                let started = exp.started_at.unwrap_or(sec);
                let duration = exp.definition.duration_secs;
                let window = self.config.safety.auto_stop.window_secs;
                let samples = self.sim.telemetry().stream.query(id, window, sec);
                let samples = match samples {
                    Ok(s) => s,
                    Err(e) => {
                        self.note(
                            id,
                            AuditKind::Note {
                                message: format!("stream monitoring unavailable: {e}"),
                            },
                        );
                        return self.begin_stop(id, Some(AbortReason::SafetyViolation));
                    }
                };
                self.emit_frame(id, &samples);
                if let ImpactDecision::Stop(reason) =
                    monitor_impact(&samples, &self.config.safety.auto_stop)
                {
                    log::warn!("{id}: auto-stop {reason:?}");
                    self.get_mut(id)?.stop_detail = Some(reason);
                    return self.begin_stop(id, Some(AbortReason::AutoStop));
                }
                if sec >= started + duration {
                    return self.begin_stop(id, None);
                }
                Ok(())
            }
            ExperimentState::Stopping => {
                let ended = exp.ended_at.unwrap_or(sec);
                let aborted = exp.abort_reason.is_some();
                let drained = self.sim.in_flight(id) == 0;
                if !drained && sec < ended + self.config.orchestrator.drain_timeout_secs {
                    return Ok(());
                }
                if !drained {
                    self.note(
                        id,
                        AuditKind::Note {
                            message: "drain timed out".into(),
                        },
                    );
                }
                self.release_resources(id);
                if aborted {
                    let verdict = self.partial_verdict(id)?;
                    self.get_mut(id)?.verdict = Some(verdict);
                    self.set_state(id, ExperimentState::Aborted)?;
                    self.finish_history(id);
                    Ok(())
                } else {
                    self.set_state(id, ExperimentState::Analyzing)
                }
            }
            ExperimentState::Analyzing => {
                let ended = exp.ended_at.unwrap_or(sec);
                if sec < ended + self.sim.telemetry().aggregates.availability_delay() {
                    return Ok(());
                }
                let verdict = self.verdict(id)?;
                self.get_mut(id)?.verdict = Some(verdict);
                self.set_state(id, ExperimentState::Completed)?;
                self.finish_history(id);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn emit_frame(&mut self, id: &ExperimentId, samples: &[StreamSample]) {
        let Some(last) = samples.last().map(|s| s.timestamp) else {
            return;
        };
        let mut baseline = Counts::default();
        let mut canary = Counts::default();
        for s in samples.iter().filter(|s| s.timestamp == last) {
            match s.group {
                GroupRole::Baseline => baseline.merge(&s.sps()),
                GroupRole::Canary => canary.merge(&s.sps()),
                GroupRole::None => {}
            }
        }
        self.events.push(PlatformEvent::Stream {
            experiment_id: id.clone(),
            second: last,
            baseline,
            canary,
        });
    }

    fn series_window(exp: &Experiment) -> (u64, u64) {
        let from = exp.started_at.unwrap_or(0);
        (from, exp.ended_at.unwrap_or(from).max(from))
    }

    /// Full comparison from the aggregate store.
    fn verdict(&self, id: &ExperimentId) -> Result<CanaryVerdict> {
        let exp = self.get(id)?;
        let pair = exp
            .clusters
            .as_ref()
            .ok_or_else(|| OrchestratorError::Conflict(format!("{id} has no clusters")))?;
        let topo = self.sim.topology();
        let svc = topo
            .service_by_name(&exp.definition.observed_cluster)
            .map(|i| topo.service(i));
        let commands: Vec<String> = svc
            .map(|s| s.commands.iter().map(|c| c.spec.name.clone()).collect())
            .unwrap_or_default();
        let (from_sec, to_sec) = Self::series_window(exp);
        let series = ExperimentSeries {
            experiment: id,
            baseline_cluster: &pair.baseline,
            canary_cluster: &pair.canary,
            commands: &commands,
            from_sec,
            to_sec,
        };
        let telemetry = self.sim.telemetry();
        let metrics = collect_metrics(&telemetry.aggregates, &series, self.sim.now());
        Ok(judge(&metrics, self.config.analysis.alpha))
    }

    /// Best-effort comparison from stream counters for a run cut short:
    /// Inconclusive unless the divergence is already conclusive.
    fn partial_verdict(&self, id: &ExperimentId) -> Result<CanaryVerdict> {
        let exp = self.get(id)?;
        let (from, to) = Self::series_window(exp);
        let samples = self
            .sim
            .telemetry()
            .stream
            .query(id, to - from, to)
            .unwrap_or_default();
        let mut rates: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for s in &samples {
            let i = match s.group {
                GroupRole::Baseline => 0,
                GroupRole::Canary => 1,
                GroupRole::None => continue,
            };
            let total = s.sps_success + s.sps_error;
            if total > 0 {
                rates[i].0.push(s.sps_success as f64 / total as f64);
                rates[i].1.push(s.sps_error as f64 / total as f64);
            }
        }
        let opt = |v: &Vec<f64>| (!v.is_empty()).then(|| v.clone());
        let metrics = [
            MetricInput {
                name: "sps_success_rate".into(),
                class: MetricClass::Kpi,
                direction_of_harm: DirectionOfHarm::LowIsBad,
                baseline: opt(&rates[0].0),
                canary: opt(&rates[1].0),
            },
            MetricInput {
                name: "sps_error_rate".into(),
                class: MetricClass::Kpi,
                direction_of_harm: DirectionOfHarm::HighIsBad,
                baseline: opt(&rates[0].1),
                canary: opt(&rates[1].1),
            },
        ];
        let mut v = judge(&metrics, self.config.analysis.alpha);
        if v.overall != Overall::Fail {
            v.overall = Overall::Inconclusive;
        }
        v.partial = true;
        Ok(v)
    }

    fn finish_history(&mut self, id: &ExperimentId) {
        let Some(exp) = self.experiments.get(id) else {
            return;
        };
        let Some(key) = exp.plan_key.clone() else {
            return;
        };
        let failed = exp.state == ExperimentState::Failed
            || exp
                .verdict
                .as_ref()
                .is_some_and(|v| v.overall == Overall::Fail);
        let h = self.history.entry(&key);
        h.running = false;
        h.failed_unreviewed |= failed;
        self.history_dirty = true;
    }

    /// Reinstates persisted experiments. Any that were mid-flight when the
    /// previous process stopped are failed and whatever they held in this
    /// world is reaped. Returns the ids failed this way.
    pub fn restore(&mut self, records: Vec<Experiment>) -> Vec<ExperimentId> {
        let mut failed = Vec::new();
        for exp in records {
            if let Some(n) = id_number(&exp.id) {
                self.next_id = self.next_id.max(n + 1);
            }
            let id = exp.id.clone();
            let interrupted = !exp.state.is_terminal() && exp.state != ExperimentState::Created;
            self.experiments.insert(id.clone(), exp);
            if interrupted {
                self.fail(&id, "interrupted by a platform restart".into());
                failed.push(id);
            }
        }
        for entry in self.history.entries.values_mut() {
            entry.running = false;
        }
        failed
    }

    pub fn observed_clusters(&self) -> Vec<String> {
        self.sim
            .topology()
            .services
            .iter()
            .map(|s| s.spec.name.clone())
            .collect()
    }

    pub fn snapshot(&self, cluster: &str) -> Result<Vec<DependencySnapshot>> {
        let topo = self.sim.topology();
        let info = self
            .sim
            .cluster(cluster)
            .filter(|c| c.role == GroupRole::None)
            .ok_or_else(|| monocle::MonocleError::UnknownCluster(cluster.to_string()))?;
        let svc = topo.service(
            topo.service_by_name(&info.service)
                .expect("cluster runs a known service"),
        );
        let config = self
            .sim
            .effective_config(cluster)
            .expect("live cluster has a config");
        let telemetry = self.sim.telemetry();
        Ok(monocle::snapshot(
            cluster,
            svc,
            &config,
            &telemetry,
            self.sim.now(),
            &self.config.monocle,
        ))
    }

    pub fn warnings(&self, cluster: &str) -> Result<Vec<Warning>> {
        Ok(monocle::detect_warnings(&self.snapshot(cluster)?))
    }

    pub fn plan(&self, cluster: &str) -> Result<Vec<GeneratedExperiment>> {
        Ok(monocle::generate(&self.snapshot(cluster)?))
    }

    /// Runnable generated experiments, best first, for one cluster or all.
    pub fn schedule(&self, cluster: Option<&str>) -> Result<Vec<GeneratedExperiment>> {
        let clusters = match cluster {
            Some(c) => vec![c.to_string()],
            None => self.observed_clusters(),
        };
        let mut plans = Vec::new();
        for c in &clusters {
            plans.extend(self.plan(c)?);
        }
        Ok(monocle::schedule(
            &plans,
            &self.history,
            self.config.monocle.cooldown_days,
            self.clock.now(),
        ))
    }

    /// Starts scheduled experiments, best first, at most one per cluster
    /// and `limit` in total.
    pub fn run_schedule(
        &mut self,
        cluster: Option<&str>,
        limit: usize,
        duration_secs: Option<u64>,
    ) -> Result<ScheduleRun> {
        let queue = self.schedule(cluster)?;
        let mut run = ScheduleRun::default();
        let mut busy: BTreeSet<String> = self
            .experiments
            .values()
            .filter(|e| !e.state.is_terminal() && e.state != ExperimentState::Created)
            .map(|e| e.definition.observed_cluster.clone())
            .collect();
        for plan in queue {
            let key = plan.key();
            if run.started.len() >= limit {
                run.skipped.push(ScheduleSkip {
                    key,
                    reason: "limit reached".into(),
                });
                continue;
            }
            if busy.contains(&plan.dependency.cluster) {
                run.skipped.push(ScheduleSkip {
                    key,
                    reason: "cluster busy".into(),
                });
                continue;
            }
            let def = ExperimentDefinition {
                fault: plan.fault(),
                observed_cluster: plan.dependency.cluster.clone(),
                sampling_pct: self.config.orchestrator.default_sampling_pct,
                duration_secs: duration_secs
                    .unwrap_or(self.config.orchestrator.default_duration_secs),
                region: None,
            };
            let id = self.create(def)?;
            self.get_mut(&id)?.plan_key = Some(key.clone());
            match self.start(&id) {
                Ok(()) => {
                    let wall = self.clock.now();
                    let h = self.history.entry(&key);
                    h.running = true;
                    h.last_run = Some(wall);
                    self.history_dirty = true;
                    busy.insert(plan.dependency.cluster.clone());
                    run.started.push(id);
                }
                Err(e) => {
                    run.skipped.push(ScheduleSkip {
                        key,
                        reason: e.to_string(),
                    });
                    if let OrchestratorError::Safety(_) = e {
                        // leave the rejected record in Created for the audit trail
                        continue;
                    }
                }
            }
        }
        Ok(run)
    }

    /// Clears the failed-unreviewed flag of a generated experiment.
    pub fn review(&mut self, key: &str) -> Result<()> {
        match self.history.entries.get_mut(key) {
            Some(h) => {
                h.failed_unreviewed = false;
                self.history_dirty = true;
                Ok(())
            }
            None => Err(OrchestratorError::Validation(vec![format!(
                "no history for {key}"
            )])),
        }
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.sim.runtime().shutdown();
    }
}
