//! Declarative topology schema and its validated, index-resolved form.
//!
//! ```toml
//! edge_service = "api"
//!
//! [[services]]
//! name = "api"
//! vip = "api"
//! cluster_size = 180
//! base_latency = { median_ms = 8.0, sigma = 0.3 }
//! properties = { "timeout.ms" = "350" }
//!
//! [[services.clients]]
//! name = "bookmarks"
//! target_vip = "bookmarks"
//! per_try_timeout_ms = 250
//! retries = 1
//! criticality_of_result = "optional"
//!
//! [[services.commands]]
//! name = "GetBookmarks"
//! timeout_ms = 1000
//! bulkhead_size = 10
//! has_fallback = true
//! wrapped_clients = ["bookmarks"]
//!
//! [[services.handlers]]
//! name = "start_play"
//! kpi = "sps"
//! steps = [{ command = "GetBookmarks" }, { client = "playback", probability = 0.5 }]
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("reading topology {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing topology: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> TopologyError {
    TopologyError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub median_ms: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.25
}

impl Default for LatencySpec {
    fn default() -> Self {
        Self {
            median_ms: 5.0,
            sigma: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Required,
    #[default]
    Optional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcClientSpec {
    pub name: String,
    pub target_vip: String,
    pub per_try_timeout_ms: u64,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub criticality_of_result: Criticality,
    /// Handler invoked on the target service; defaults to its first handler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub known_impacts: Vec<String>,
}

impl RpcClientSpec {
    /// Longest a call can take with every attempt timing out.
    pub fn max_computed_timeout_ms(&self) -> u64 {
        self.per_try_timeout_ms * (1 + u64::from(self.retries))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitBreakerSpec {
    #[serde(default = "default_error_threshold")]
    pub error_threshold_pct: f64,
    #[serde(default = "default_cb_window")]
    pub window_ms: u64,
    #[serde(default = "default_cb_cooldown")]
    pub cooldown_ms: u64,
    /// Minimum completions in the window before the breaker may trip.
    #[serde(default = "default_volume")]
    pub request_volume_threshold: u32,
}

fn default_error_threshold() -> f64 {
    50.0
}
fn default_cb_window() -> u64 {
    10_000
}
fn default_cb_cooldown() -> u64 {
    5_000
}
fn default_volume() -> u32 {
    20
}

impl Default for CircuitBreakerSpec {
    fn default() -> Self {
        Self {
            error_threshold_pct: default_error_threshold(),
            window_ms: default_cb_window(),
            cooldown_ms: default_cb_cooldown(),
            request_volume_threshold: default_volume(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub name: String,
    pub timeout_ms: u64,
    #[serde(default = "default_bulkhead")]
    pub bulkhead_size: u32,
    #[serde(default)]
    pub has_fallback: bool,
    #[serde(default = "default_true")]
    pub fallback_succeeds: bool,
    #[serde(default)]
    pub wrapped_clients: Vec<String>,
    #[serde(default)]
    pub circuit_breaker: CircuitBreakerSpec,
    /// In-process work done before the wrapped clients are called.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_latency: Option<LatencySpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub known_impacts: Vec<String>,
}

fn default_bulkhead() -> u32 {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    #[serde(default = "default_probability")]
    pub probability: f64,
}

fn default_probability() -> f64 {
    1.0
}

impl StepSpec {
    pub fn command(name: impl Into<String>) -> Self {
        Self {
            command: Some(name.into()),
            client: None,
            probability: 1.0,
        }
    }

    pub fn client(name: impl Into<String>) -> Self {
        Self {
            command: None,
            client: Some(name.into()),
            probability: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandlerSpec {
    pub name: String,
    #[serde(default)]
    pub steps: Vec<StepSpec>,
    /// KPI channel this handler's outcome is reported on when it serves a
    /// user request directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kpi: Option<String>,
    /// Share of edge traffic routed to this handler.
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default = "default_background_error_rate")]
    pub background_error_rate: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// 0.01 %.
pub fn default_background_error_rate() -> f64 {
    0.0001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub vip: String,
    pub cluster_size: u32,
    #[serde(default)]
    pub base_latency: LatencySpec,
    #[serde(default)]
    pub handlers: Vec<HandlerSpec>,
    #[serde(default)]
    pub clients: Vec<RpcClientSpec>,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
    /// Dynamic properties every instance of the cluster boots with.
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
    /// Per-instance request rate at which synthetic CPU reaches ~63 %.
    #[serde(default = "default_cpu_capacity")]
    pub cpu_capacity_rps: f64,
}

fn default_cpu_capacity() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub edge_service: String,
    pub services: Vec<ServiceSpec>,
}

impl TopologySpec {
    pub fn from_toml_str(s: &str) -> Result<Self, TopologyError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn service_mut(&mut self, name: &str) -> Option<&mut ServiceSpec> {
        self.services.iter_mut().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTarget {
    Command(usize),
    Client(usize),
}

#[derive(Debug, Clone)]
pub struct Step {
    pub target: StepTarget,
    pub probability: f64,
    /// Whether an error from this step fails the handler.
    pub required: bool,
}

#[derive(Debug, Clone)]
pub struct Handler {
    pub spec: HandlerSpec,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct Client {
    pub spec: RpcClientSpec,
    pub target_service: usize,
    pub target_handler: usize,
    /// Commands of the same service wrapping this client.
    pub wrapped_by: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Command {
    pub spec: CommandSpec,
    pub clients: Vec<usize>,
    /// A command error fails its handler when any wrapped client is
    /// required, or when it wraps nothing.
    pub required: bool,
}

#[derive(Debug, Clone)]
pub struct Service {
    pub spec: ServiceSpec,
    pub handlers: Vec<Handler>,
    pub clients: Vec<Client>,
    pub commands: Vec<Command>,
    client_index: HashMap<String, usize>,
    command_index: HashMap<String, usize>,
    handler_index: HashMap<String, usize>,
}

impl Service {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn client(&self, name: &str) -> Option<usize> {
        self.client_index.get(name).copied()
    }

    pub fn command(&self, name: &str) -> Option<usize> {
        self.command_index.get(name).copied()
    }

    pub fn handler(&self, name: &str) -> Option<usize> {
        self.handler_index.get(name).copied()
    }
}

/// Validated topology with every name resolved to an index.
#[derive(Debug, Clone)]
pub struct Topology {
    pub spec: TopologySpec,
    pub services: Vec<Service>,
    pub edge_service: usize,
    service_index: HashMap<String, usize>,
    vip_index: HashMap<String, usize>,
}

impl Topology {
    pub fn new(spec: TopologySpec) -> Result<Self, TopologyError> {
        let mut service_index = HashMap::new();
        let mut vip_index = HashMap::new();
        for (i, s) in spec.services.iter().enumerate() {
            if s.name.is_empty() || s.vip.is_empty() {
                return Err(invalid("service names and vips must be non-empty"));
            }
            if s.name.contains("-chap-") || s.vip.contains("-chap-") {
                return Err(invalid(format!(
                    "service {}: '-chap-' is reserved for experiment clusters",
                    s.name
                )));
            }
            if s.cluster_size < 1 {
                return Err(invalid(format!(
                    "service {}: cluster_size must be at least 1",
                    s.name
                )));
            }
            if !(s.base_latency.median_ms >= 0.0 && s.base_latency.sigma >= 0.0) {
                return Err(invalid(format!(
                    "service {}: latency parameters must be non-negative",
                    s.name
                )));
            }
            if service_index.insert(s.name.clone(), i).is_some() {
                return Err(invalid(format!("duplicate service {}", s.name)));
            }
            if vip_index.insert(s.vip.clone(), i).is_some() {
                return Err(invalid(format!(
                    "vip {} advertised by more than one cluster",
                    s.vip
                )));
            }
        }
        let edge_service = *service_index.get(&spec.edge_service).ok_or_else(|| {
            invalid(format!(
                "edge service {} is not declared",
                spec.edge_service
            ))
        })?;

        let mut services = Vec::with_capacity(spec.services.len());
        for s in &spec.services {
            services.push(compile_service(s, &vip_index, &spec)?);
        }
        let topo = Self {
            spec,
            services,
            edge_service,
            service_index,
            vip_index,
        };
        topo.check_acyclic()?;
        let edge = &topo.services[topo.edge_service];
        if edge.handlers.is_empty() {
            return Err(invalid("edge service needs at least one handler"));
        }
        if edge.handlers.iter().all(|h| h.spec.weight <= 0.0) {
            return Err(invalid("edge service handlers need a positive weight"));
        }
        Ok(topo)
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TopologyError> {
        Self::new(TopologySpec::from_toml_str(s)?)
    }

    pub fn service_by_name(&self, name: &str) -> Option<usize> {
        self.service_index.get(name).copied()
    }

    pub fn service_by_vip(&self, vip: &str) -> Option<usize> {
        self.vip_index.get(vip).copied()
    }

    pub fn service(&self, idx: usize) -> &Service {
        &self.services[idx]
    }

    pub fn has_injection_point(&self, point: &crate::fit::InjectionPoint) -> bool {
        use crate::fit::InjectionKind;
        self.services.iter().any(|s| match point.kind {
            InjectionKind::RpcClient => s.client(&point.name).is_some(),
            InjectionKind::Command => s.command(&point.name).is_some(),
        })
    }

    fn check_acyclic(&self) -> Result<(), TopologyError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        fn visit(t: &Topology, i: usize, marks: &mut [Mark]) -> Result<(), TopologyError> {
            match marks[i] {
                Mark::Done => return Ok(()),
                Mark::Active => {
                    return Err(invalid(format!(
                        "dependency cycle through service {}",
                        t.services[i].name()
                    )))
                }
                Mark::New => {}
            }
            marks[i] = Mark::Active;
            for c in &t.services[i].clients {
                visit(t, c.target_service, marks)?;
            }
            marks[i] = Mark::Done;
            Ok(())
        }
        let mut marks = vec![Mark::New; self.services.len()];
        for i in 0..self.services.len() {
            visit(self, i, &mut marks)?;
        }
        Ok(())
    }
}

fn compile_service(
    s: &ServiceSpec,
    vip_index: &HashMap<String, usize>,
    spec: &TopologySpec,
) -> Result<Service, TopologyError> {
    let ctx = |msg: String| invalid(format!("service {}: {msg}", s.name));

    let mut client_index = HashMap::new();
    let mut clients = Vec::new();
    for (i, c) in s.clients.iter().enumerate() {
        if client_index.insert(c.name.clone(), i).is_some() {
            return Err(ctx(format!("duplicate client {}", c.name)));
        }
        if c.per_try_timeout_ms == 0 {
            return Err(ctx(format!(
                "client {}: per_try_timeout_ms must be positive",
                c.name
            )));
        }
        let target_service = *vip_index.get(&c.target_vip).ok_or_else(|| {
            ctx(format!(
                "client {} targets unknown vip {}",
                c.name, c.target_vip
            ))
        })?;
        let target_spec = &spec.services[target_service];
        let target_handler = match &c.endpoint {
            Some(ep) => target_spec
                .handlers
                .iter()
                .position(|h| &h.name == ep)
                .ok_or_else(|| {
                    ctx(format!(
                        "client {}: no handler {ep} on {}",
                        c.name, target_spec.name
                    ))
                })?,
            None if target_spec.handlers.is_empty() => {
                return Err(ctx(format!(
                    "client {}: target {} has no handlers",
                    c.name, target_spec.name
                )))
            }
            None => 0,
        };
        clients.push(Client {
            spec: c.clone(),
            target_service,
            target_handler,
            wrapped_by: Vec::new(),
        });
    }

    let mut command_index = HashMap::new();
    let mut commands = Vec::new();
    for (i, c) in s.commands.iter().enumerate() {
        if command_index.insert(c.name.clone(), i).is_some() {
            return Err(ctx(format!("duplicate command {}", c.name)));
        }
        if c.bulkhead_size < 1 {
            return Err(ctx(format!(
                "command {}: bulkhead_size must be at least 1",
                c.name
            )));
        }
        if c.timeout_ms == 0 {
            return Err(ctx(format!(
                "command {}: timeout_ms must be positive",
                c.name
            )));
        }
        let cb = &c.circuit_breaker;
        if !(0.0..=100.0).contains(&cb.error_threshold_pct) || cb.window_ms == 0 {
            return Err(ctx(format!("command {}: invalid circuit breaker", c.name)));
        }
        let mut wrapped = Vec::new();
        for name in &c.wrapped_clients {
            let ci = *client_index
                .get(name)
                .ok_or_else(|| ctx(format!("command {} wraps undeclared client {name}", c.name)))?;
            if wrapped.contains(&ci) {
                return Err(ctx(format!("command {} wraps {name} twice", c.name)));
            }
            clients[ci].wrapped_by.push(i);
            wrapped.push(ci);
        }
        let required = wrapped.is_empty()
            || wrapped
                .iter()
                .any(|&ci| clients[ci].spec.criticality_of_result == Criticality::Required);
        commands.push(Command {
            spec: c.clone(),
            clients: wrapped,
            required,
        });
    }

    let mut handler_index = HashMap::new();
    let mut handlers = Vec::new();
    for (i, h) in s.handlers.iter().enumerate() {
        if handler_index.insert(h.name.clone(), i).is_some() {
            return Err(ctx(format!("duplicate handler {}", h.name)));
        }
        if !(0.0..=1.0).contains(&h.background_error_rate) {
            return Err(ctx(format!(
                "handler {}: background_error_rate must be in [0, 1]",
                h.name
            )));
        }
        let mut steps = Vec::new();
        for st in &h.steps {
            if !(0.0..=1.0).contains(&st.probability) {
                return Err(ctx(format!(
                    "handler {}: step probability must be in [0, 1]",
                    h.name
                )));
            }
            let (target, required) = match (&st.command, &st.client) {
                (Some(cmd), None) => {
                    let ci = *command_index.get(cmd).ok_or_else(|| {
                        ctx(format!("handler {} calls undeclared command {cmd}", h.name))
                    })?;
                    (StepTarget::Command(ci), commands[ci].required)
                }
                (None, Some(cl)) => {
                    let ci = *client_index.get(cl).ok_or_else(|| {
                        ctx(format!("handler {} calls undeclared client {cl}", h.name))
                    })?;
                    (
                        StepTarget::Client(ci),
                        clients[ci].spec.criticality_of_result == Criticality::Required,
                    )
                }
                _ => {
                    return Err(ctx(format!(
                        "handler {}: each step names exactly one command or client",
                        h.name
                    )))
                }
            };
            steps.push(Step {
                target,
                probability: st.probability,
                required,
            });
        }
        handlers.push(Handler {
            spec: h.clone(),
            steps,
        });
    }

    Ok(Service {
        spec: s.clone(),
        handlers,
        clients,
        commands,
        client_index,
        command_index,
        handler_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_TIER: &str = r#"
        edge_service = "api"

        [[services]]
        name = "api"
        vip = "api"
        cluster_size = 4

        [[services.clients]]
        name = "bookmarks"
        target_vip = "bookmarks"
        per_try_timeout_ms = 1000
        retries = 3
        criticality_of_result = "required"

        [[services.commands]]
        name = "GetBookmarks"
        timeout_ms = 1000
        wrapped_clients = ["bookmarks"]

        [[services.handlers]]
        name = "play"
        kpi = "sps"
        steps = [{ command = "GetBookmarks" }]

        [[services]]
        name = "bookmarks"
        vip = "bookmarks"
        cluster_size = 2

        [[services.handlers]]
        name = "get"
    "#;

    #[test]
    fn parses_and_links() {
        let t = Topology::from_toml_str(TWO_TIER).unwrap();
        let api = t.service(t.edge_service);
        let cmd = &api.commands[0];
        assert_eq!(cmd.spec.bulkhead_size, 10);
        assert!(cmd.required);
        assert_eq!(api.clients[0].wrapped_by, vec![0]);
        assert_eq!(api.clients[0].spec.max_computed_timeout_ms(), 4000);
        assert_eq!(api.handlers[0].spec.background_error_rate, 0.0001);
    }

    #[test]
    fn rejects_cycle() {
        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[1].clients.push(RpcClientSpec {
            name: "back".into(),
            target_vip: "api".into(),
            per_try_timeout_ms: 10,
            retries: 0,
            criticality_of_result: Criticality::Optional,
            endpoint: None,
            known_impacts: vec![],
        });
        let err = Topology::new(spec).unwrap_err().to_string();
        assert!(err.contains("cycle"), "{err}");
    }

    #[test]
    fn rejects_bad_references() {
        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[0].commands[0]
            .wrapped_clients
            .push("nosuch".into());
        assert!(Topology::new(spec)
            .unwrap_err()
            .to_string()
            .contains("nosuch"));

        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[1].vip = "api".into();
        assert!(Topology::new(spec).is_err());

        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.edge_service = "zuul".into();
        assert!(Topology::new(spec).is_err());

        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[0].commands[0].bulkhead_size = 0;
        assert!(Topology::new(spec).is_err());

        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[0].clients[0].per_try_timeout_ms = 0;
        assert!(Topology::new(spec).is_err());

        let mut spec = TopologySpec::from_toml_str(TWO_TIER).unwrap();
        spec.services[1].cluster_size = 0;
        assert!(Topology::new(spec).is_err());
    }
}
