//! Fault-injection rules and request-context metadata.
//!
//! Requests are annotated once at the edge with routing overrides and fault
//! rules; every downstream call receives the caller's context unchanged
//! (apart from the trace breadcrumb), and each instrumented call site asks
//! [`should_inject`] whether it should fail or delay.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque end-user identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentId(pub String);

impl ExperimentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Experiment group a user (and all of that user's requests) belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "group", content = "experiment")]
pub enum Group {
    #[default]
    None,
    Baseline(ExperimentId),
    Canary(ExperimentId),
}

impl Group {
    pub fn experiment(&self) -> Option<&ExperimentId> {
        match self {
            Group::None => None,
            Group::Baseline(id) | Group::Canary(id) => Some(id),
        }
    }

    pub fn role(&self) -> GroupRole {
        match self {
            Group::None => GroupRole::None,
            Group::Baseline(_) => GroupRole::Baseline,
            Group::Canary(_) => GroupRole::Canary,
        }
    }
}

/// Group without the experiment it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    None,
    Baseline,
    Canary,
}

impl GroupRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupRole::None => "none",
            GroupRole::Baseline => "baseline",
            GroupRole::Canary => "canary",
        }
    }
}

impl fmt::Display for GroupRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    RpcClient,
    Command,
}

impl InjectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionKind::RpcClient => "rpc_client",
            InjectionKind::Command => "command",
        }
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub kind: InjectionKind,
    pub name: String,
}

impl InjectionPoint {
    pub fn rpc_client(name: impl Into<String>) -> Self {
        Self {
            kind: InjectionKind::RpcClient,
            name: name.into(),
        }
    }

    pub fn command(name: impl Into<String>) -> Self {
        Self {
            kind: InjectionKind::Command,
            name: name.into(),
        }
    }

    fn matches(&self, kind: InjectionKind, name: &str) -> bool {
        self.kind == kind && self.name == name
    }
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FaultAction {
    /// Return an error instead of executing the call.
    Fail,
    /// Delay the call by `ms` before executing it.
    AddLatency { ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultRule {
    pub injection_point: InjectionPoint,
    pub action: FaultAction,
}

impl FaultRule {
    pub fn fail(point: InjectionPoint) -> Self {
        Self {
            injection_point: point,
            action: FaultAction::Fail,
        }
    }

    pub fn latency(point: InjectionPoint, ms: u64) -> Self {
        Self {
            injection_point: point,
            action: FaultAction::AddLatency { ms },
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.injection_point.name.is_empty() {
            return Err(FitError::EmptyName);
        }
        if let FaultAction::AddLatency { ms: 0 } = self.action {
            return Err(FitError::ZeroLatency(self.injection_point.clone()));
        }
        Ok(())
    }
}

impl fmt::Display for FaultRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            FaultAction::Fail => write!(f, "{}=fail", self.injection_point),
            FaultAction::AddLatency { ms } => write!(f, "{}=latency:{}", self.injection_point, ms),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FitError {
    #[error("fault rule has an empty injection point name")]
    EmptyName,
    #[error("latency fault on {0} must add a positive amount")]
    ZeroLatency(InjectionPoint),
    #[error("more than one fault rule targets {0}")]
    DuplicatePoint(InjectionPoint),
    #[error("baseline requests may not carry fault rules")]
    BaselineWithFaults,
    #[error("requests outside any experiment may not carry fault rules or routing overrides")]
    UngroupedWithMetadata,
    #[error("malformed context header {header}: {reason}")]
    MalformedHeader { header: String, reason: String },
}

/// Rejects rule lists that would fire more than one action at a call site.
pub fn validate_rules(rules: &[FaultRule]) -> Result<(), FitError> {
    for (i, rule) in rules.iter().enumerate() {
        rule.validate()?;
        if rules[..i]
            .iter()
            .any(|r| r.injection_point == rule.injection_point)
        {
            return Err(FitError::DuplicatePoint(rule.injection_point.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub user_id: UserId,
    pub group: Group,
    pub routing_overrides: Arc<BTreeMap<String, String>>,
    pub fault_rules: Arc<Vec<FaultRule>>,
    pub trace: Vec<String>,
}

impl RequestContext {
    /// Context for a request that belongs to no experiment.
    pub fn plain(user_id: UserId) -> Self {
        Self {
            user_id,
            group: Group::None,
            routing_overrides: Arc::default(),
            fault_rules: Arc::default(),
            trace: Vec::new(),
        }
    }

    pub fn new(
        user_id: UserId,
        group: Group,
        routing_overrides: BTreeMap<String, String>,
        fault_rules: Vec<FaultRule>,
    ) -> Result<Self, FitError> {
        let ctx = Self {
            user_id,
            group,
            routing_overrides: Arc::new(routing_overrides),
            fault_rules: Arc::new(fault_rules),
            trace: Vec::new(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        validate_rules(&self.fault_rules)?;
        match self.group {
            Group::None if !self.fault_rules.is_empty() || !self.routing_overrides.is_empty() => {
                Err(FitError::UngroupedWithMetadata)
            }
            Group::Baseline(_) if !self.fault_rules.is_empty() => Err(FitError::BaselineWithFaults),
            _ => Ok(()),
        }
    }

    /// Resolves the VIP a call should actually target.
    pub fn route<'a>(&'a self, vip: &'a str) -> &'a str {
        self.routing_overrides
            .get(vip)
            .map(String::as_str)
            .unwrap_or(vip)
    }

    pub fn with_hop(mut self, hop: impl Into<String>) -> Self {
        self.trace.push(hop.into());
        self
    }

    pub const HEADER_USER: &'static str = "x-chap-user";
    pub const HEADER_GROUP: &'static str = "x-chap-group";
    pub const HEADER_ROUTE: &'static str = "x-chap-route";
    pub const HEADER_FAULT: &'static str = "x-chap-fault";
    pub const HEADER_TRACE: &'static str = "x-chap-trace";

    /// Compact header encoding.
    ///
    /// ```text
    /// x-chap-user:  42
    /// x-chap-group: none | baseline:<experiment> | canary:<experiment>
    /// x-chap-route: api=api-chap-canary;other=other-vip
    /// x-chap-fault: rpc_client:bookmarks=fail;command:GetRecs=latency:900
    /// x-chap-trace: api>bookmarks
    /// ```
    ///
    /// `route`, `fault` and `trace` are omitted when empty.
    pub fn to_headers(&self) -> Vec<(String, String)> {
        let mut headers = vec![
            (Self::HEADER_USER.to_string(), self.user_id.to_string()),
            (
                Self::HEADER_GROUP.to_string(),
                match &self.group {
                    Group::None => "none".to_string(),
                    Group::Baseline(id) => format!("baseline:{id}"),
                    Group::Canary(id) => format!("canary:{id}"),
                },
            ),
        ];
        if !self.routing_overrides.is_empty() {
            let route = self
                .routing_overrides
                .iter()
                .map(|(from, to)| format!("{from}={to}"))
                .collect::<Vec<_>>()
                .join(";");
            headers.push((Self::HEADER_ROUTE.to_string(), route));
        }
        if !self.fault_rules.is_empty() {
            let faults = self
                .fault_rules
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            headers.push((Self::HEADER_FAULT.to_string(), faults));
        }
        if !self.trace.is_empty() {
            headers.push((Self::HEADER_TRACE.to_string(), self.trace.join(">")));
        }
        headers
    }

    pub fn from_headers<'a, I>(headers: I) -> Result<Self, FitError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let malformed = |header: &str, reason: &str| FitError::MalformedHeader {
            header: header.to_string(),
            reason: reason.to_string(),
        };
        let mut user = None;
        let mut group = Group::None;
        let mut overrides = BTreeMap::new();
        let mut rules = Vec::new();
        let mut trace = Vec::new();
        for (name, value) in headers {
            match name {
                Self::HEADER_USER => {
                    user = Some(UserId(
                        value
                            .parse()
                            .map_err(|_| malformed(name, "user id is not an integer"))?,
                    ));
                }
                Self::HEADER_GROUP => {
                    group = match value.split_once(':') {
                        None if value == "none" => Group::None,
                        Some(("baseline", id)) if !id.is_empty() => {
                            Group::Baseline(ExperimentId::new(id))
                        }
                        Some(("canary", id)) if !id.is_empty() => {
                            Group::Canary(ExperimentId::new(id))
                        }
                        _ => return Err(malformed(name, "unknown group")),
                    };
                }
                Self::HEADER_ROUTE => {
                    for pair in value.split(';') {
                        let (from, to) = pair
                            .split_once('=')
                            .ok_or_else(|| malformed(name, "expected vip=vip"))?;
                        if from.is_empty() || to.is_empty() {
                            return Err(malformed(name, "empty vip"));
                        }
                        overrides.insert(from.to_string(), to.to_string());
                    }
                }
                Self::HEADER_FAULT => {
                    for item in value.split(';') {
                        rules.push(
                            parse_rule(item)
                                .ok_or_else(|| malformed(name, "expected kind:name=action"))?,
                        );
                    }
                }
                Self::HEADER_TRACE => {
                    trace = value.split('>').map(str::to_string).collect();
                }
                _ => {}
            }
        }
        let user = user.ok_or_else(|| malformed(Self::HEADER_USER, "missing"))?;
        let mut ctx = Self::new(user, group, overrides, rules)?;
        ctx.trace = trace;
        Ok(ctx)
    }
}

fn parse_rule(item: &str) -> Option<FaultRule> {
    let (point, action) = item.split_once('=')?;
    let (kind, name) = point.split_once(':')?;
    let kind = match kind {
        "rpc_client" => InjectionKind::RpcClient,
        "command" => InjectionKind::Command,
        _ => return None,
    };
    let action = match action {
        "fail" => FaultAction::Fail,
        other => FaultAction::AddLatency {
            ms: other.strip_prefix("latency:")?.parse().ok()?,
        },
    };
    if name.is_empty() {
        return None;
    }
    Some(FaultRule {
        injection_point: InjectionPoint {
            kind,
            name: name.to_string(),
        },
        action,
    })
}

/// Returns the action of the first rule whose injection point equals
/// `(kind, name)`.
pub fn should_inject(ctx: &RequestContext, kind: InjectionKind, name: &str) -> Option<FaultAction> {
    ctx.fault_rules
        .iter()
        .find(|r| r.injection_point.matches(kind, name))
        .map(|r| r.action)
}

/// Context handed to a downstream call: identical to the parent's apart from
/// one more trace hop.
pub fn propagate(parent: &RequestContext, child_call: &str) -> RequestContext {
    parent.clone().with_hop(child_call)
}
