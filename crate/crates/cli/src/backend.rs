//! The same operations against an in-process platform or a remote server.

use std::time::Duration;

use chap_core::api::{ExperimentRecord, PlatformService, ServiceError};
use chap_core::fit::ExperimentId;
use chap_core::monocle::{GeneratedExperiment, Warning};
use chap_core::orchestrator::{
    AbortReason, Experiment, ExperimentDefinition, OrchestratorError, Platform, ScheduleRun,
};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

use crate::{Failure, Outcome, EXIT_CONFLICT, EXIT_INVALID, EXIT_RUNTIME, EXIT_SAFETY};

/// Longest the simulation may run past an experiment's planned duration
/// while waiting for it to settle.
const SETTLE_SLACK_SECS: u64 = 3_600;
const POLL: Duration = Duration::from_millis(200);

pub enum Backend {
    Local(PlatformService),
    Remote { client: Client, base: String },
}

fn orchestrator_failure(e: OrchestratorError) -> Failure {
    let code = match &e {
        OrchestratorError::Validation(_) => EXIT_INVALID,
        OrchestratorError::Safety(_) => EXIT_SAFETY,
        OrchestratorError::UnknownExperiment(_)
        | OrchestratorError::Conflict(_)
        | OrchestratorError::Transition(_)
        | OrchestratorError::Monocle(chap_core::monocle::MonocleError::UnknownCluster(_)) => {
            EXIT_CONFLICT
        }
        _ => EXIT_RUNTIME,
    };
    Failure::new(code, e.to_string())
}

fn gone(e: ServiceError) -> Failure {
    Failure::new(EXIT_RUNTIME, e.to_string())
}

fn found(p: &Platform, id: &ExperimentId) -> Result<Experiment, OrchestratorError> {
    p.experiment(id)
        .cloned()
        .ok_or_else(|| OrchestratorError::UnknownExperiment(id.clone()))
}

impl Backend {
    pub fn remote(url: &str) -> Self {
        Backend::Remote {
            client: Client::new(),
            base: url.trim_end_matches('/').to_string(),
        }
    }

    fn local<R, F>(&self, f: F) -> Outcome<R>
    where
        R: Send + 'static,
        F: FnOnce(&mut Platform) -> Result<R, OrchestratorError> + Send + 'static,
    {
        let Backend::Local(svc) = self else {
            unreachable!("local call on a remote backend")
        };
        svc.handle()
            .call_blocking(f)
            .map_err(gone)?
            .map_err(orchestrator_failure)
    }

    pub fn create(&self, def: ExperimentDefinition, start: bool) -> Outcome<Experiment> {
        match self {
            Backend::Local(_) => {
                let (exp, started) = self.local(move |p| {
                    let id = p.create(def)?;
                    let started = if start { p.start(&id) } else { Ok(()) };
                    Ok((found(p, &id)?, started))
                })?;
                started.map_err(|e| {
                    let mut f = orchestrator_failure(e);
                    f.message = format!("{} ({} was created but not started)", f.message, exp.id);
                    f
                })?;
                Ok(exp)
            }
            Backend::Remote { client, base } => {
                let mut body = serde_json::to_value(&def).expect("serializable");
                body["start"] = json!(start);
                let rec: ExperimentRecord =
                    send(client.post(format!("{base}/v1/experiments")).json(&body))?;
                Ok(rec.experiment)
            }
        }
    }

    pub fn start(&self, id: &ExperimentId) -> Outcome<Experiment> {
        match self {
            Backend::Local(_) => {
                let id = id.clone();
                self.local(move |p| {
                    p.start(&id)?;
                    found(p, &id)
                })
            }
            Backend::Remote { client, base } => {
                let rec: ExperimentRecord =
                    send(client.post(format!("{base}/v1/experiments/{id}/start")))?;
                Ok(rec.experiment)
            }
        }
    }

    pub fn abort(&self, id: &ExperimentId) -> Outcome<Experiment> {
        match self {
            Backend::Local(_) => {
                let id = id.clone();
                self.local(move |p| {
                    p.abort(&id, AbortReason::Manual)?;
                    p.run_until_settled(SETTLE_SLACK_SECS);
                    found(p, &id)
                })
            }
            Backend::Remote { client, base } => {
                let rec: ExperimentRecord =
                    send(client.post(format!("{base}/v1/experiments/{id}/abort")))?;
                Ok(rec.experiment)
            }
        }
    }

    pub fn get(&self, id: &ExperimentId) -> Outcome<Experiment> {
        match self {
            Backend::Local(svc) => svc
                .handle()
                .snapshot()
                .experiments
                .get(id)
                .cloned()
                .ok_or_else(|| Failure::new(EXIT_CONFLICT, format!("unknown experiment {id}"))),
            Backend::Remote { client, base } => {
                let rec: ExperimentRecord =
                    send(client.get(format!("{base}/v1/experiments/{id}")))?;
                Ok(rec.experiment)
            }
        }
    }

    pub fn list(&self) -> Outcome<Vec<Experiment>> {
        match self {
            Backend::Local(svc) => Ok(svc
                .handle()
                .snapshot()
                .experiments
                .values()
                .cloned()
                .collect()),
            Backend::Remote { client, base } => {
                let v: Value = send(client.get(format!("{base}/v1/experiments")))?;
                field(v, "experiments")
            }
        }
    }

    /// Blocks until the experiment reaches a terminal state. Locally this
    /// advances virtual time as fast as it can.
    pub fn wait(&self, id: &ExperimentId) -> Outcome<Experiment> {
        match self {
            Backend::Local(_) => {
                let id = id.clone();
                let exp = self.local(move |p| {
                    let budget = found(p, &id)?.definition.duration_secs + SETTLE_SLACK_SECS;
                    let started = p.now_sec();
                    let done =
                        |p: &Platform| p.experiment(&id).is_none_or(|e| e.state.is_terminal());
                    while !done(p) && p.now_sec() - started < budget {
                        p.tick();
                    }
                    found(p, &id)
                })?;
                if !exp.state.is_terminal() {
                    return Err(Failure::new(
                        EXIT_RUNTIME,
                        format!(
                            "{} is still {} after {SETTLE_SLACK_SECS}s of slack",
                            exp.id, exp.state
                        ),
                    ));
                }
                Ok(exp)
            }
            Backend::Remote { .. } => loop {
                let exp = self.get(id)?;
                if exp.state.is_terminal() {
                    return Ok(exp);
                }
                std::thread::sleep(POLL);
            },
        }
    }

    pub fn clusters(&self) -> Outcome<Vec<String>> {
        match self {
            Backend::Local(svc) => Ok(svc.handle().snapshot().clusters.clone()),
            Backend::Remote { client, base } => {
                field(send(client.get(format!("{base}/v1/clusters")))?, "clusters")
            }
        }
    }

    pub fn plan(&self, cluster: &str) -> Outcome<(Vec<GeneratedExperiment>, Vec<Warning>)> {
        match self {
            Backend::Local(_) => {
                let c = cluster.to_string();
                self.local(move |p| Ok((p.plan(&c)?, p.warnings(&c)?)))
            }
            Backend::Remote { client, base } => {
                let plan: Value = send(client.get(format!("{base}/v1/monocle/{cluster}/plan")))?;
                let warnings: Value =
                    send(client.get(format!("{base}/v1/monocle/{cluster}/warnings")))?;
                Ok((rows(plan, "experiments")?, field(warnings, "warnings")?))
            }
        }
    }

    pub fn schedule(&self, cluster: Option<&str>) -> Outcome<Vec<GeneratedExperiment>> {
        match self {
            Backend::Local(_) => {
                let c = cluster.map(str::to_string);
                self.local(move |p| p.schedule(c.as_deref()))
            }
            Backend::Remote { client, base } => {
                let mut req = client.get(format!("{base}/v1/monocle/schedule"));
                if let Some(c) = cluster {
                    req = req.query(&[("cluster", c)]);
                }
                rows(send(req)?, "queue")
            }
        }
    }

    pub fn run_schedule(
        &self,
        cluster: Option<&str>,
        limit: usize,
        duration_secs: Option<u64>,
    ) -> Outcome<ScheduleRun> {
        match self {
            Backend::Local(_) => {
                let c = cluster.map(str::to_string);
                self.local(move |p| p.run_schedule(c.as_deref(), limit, duration_secs))
            }
            Backend::Remote { client, base } => {
                let body =
                    json!({ "cluster": cluster, "limit": limit, "duration_secs": duration_secs });
                send(
                    client
                        .post(format!("{base}/v1/monocle/schedule/run"))
                        .json(&body),
                )
            }
        }
    }
}

fn send<T: serde::de::DeserializeOwned>(req: RequestBuilder) -> Outcome<T> {
    let resp = req
        .send()
        .map_err(|e| Failure::new(EXIT_RUNTIME, format!("request failed: {e}")))?;
    let status = resp.status();
    let body: Value = resp
        .json()
        .map_err(|e| Failure::new(EXIT_RUNTIME, format!("reading response: {e}")))?;
    if status.is_success() {
        return serde_json::from_value(body)
            .map_err(|e| Failure::new(EXIT_RUNTIME, format!("unexpected response: {e}")));
    }
    let code = match status.as_u16() {
        400 => EXIT_INVALID,
        403 => EXIT_SAFETY,
        404 | 409 => EXIT_CONFLICT,
        _ => EXIT_RUNTIME,
    };
    let err = &body["error"];
    let mut message = err["message"]
        .as_str()
        .unwrap_or("request failed")
        .to_string();
    if let Some(details) = err["details"].as_array() {
        for d in details.iter().filter_map(Value::as_str) {
            message.push_str("; ");
            message.push_str(d);
        }
    }
    Err(Failure::new(code, format!("{status}: {message}")))
}

fn field<T: serde::de::DeserializeOwned>(mut v: Value, name: &str) -> Outcome<T> {
    serde_json::from_value(v[name].take())
        .map_err(|e| Failure::new(EXIT_RUNTIME, format!("unexpected {name}: {e}")))
}

/// Unwraps `[{"key", "experiment"}]` rows.
fn rows(v: Value, name: &str) -> Outcome<Vec<GeneratedExperiment>> {
    let rows: Vec<Value> = field(v, name)?;
    rows.into_iter().map(|r| field(r, "experiment")).collect()
}
