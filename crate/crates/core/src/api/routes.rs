//! `/v1` HTTP endpoints.

use std::collections::BTreeMap;
use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::service::{PlatformHandle, ServiceError};
use super::store::{ExperimentRecord, SCHEMA_VERSION};
use crate::fit::ExperimentId;
use crate::monocle::MonocleError;
use crate::orchestrator::{AbortReason, ExperimentDefinition, OrchestratorError, PlatformEvent};
use crate::telemetry::aggregate::SeriesKey;

/// Structured error body: `{"error": {"code", "message", "details"}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            details: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let message = e.to_string();
        match e {
            OrchestratorError::Validation(details) => ApiError {
                details,
                ..ApiError::new(StatusCode::BAD_REQUEST, "validation", message)
            },
            OrchestratorError::UnknownExperiment(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
            }
            OrchestratorError::Monocle(MonocleError::UnknownCluster(_)) => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
            }
            OrchestratorError::Conflict(_) | OrchestratorError::Transition(_) => {
                ApiError::new(StatusCode::CONFLICT, "conflict", message)
            }
            OrchestratorError::Safety(reason) => {
                ApiError::new(StatusCode::FORBIDDEN, reason.code(), message)
            }
            OrchestratorError::Monocle(_) => {
                ApiError::new(StatusCode::CONFLICT, "stale_data", message)
            }
            OrchestratorError::Sim(_) | OrchestratorError::Config(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
            }
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "unavailable",
            e.to_string(),
        )
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

fn record(e: crate::orchestrator::Experiment) -> ExperimentRecord {
    ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        experiment: e,
    }
}

pub fn router(handle: PlatformHandle) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/clock", get(clock))
        .route("/v1/clock/advance", post(advance))
        .route("/v1/clusters", get(clusters))
        .route("/v1/clusters/{cluster}/properties", post(set_property))
        .route("/v1/experiments", get(list).post(create))
        .route("/v1/experiments/{id}", get(fetch))
        .route("/v1/experiments/{id}/start", post(start))
        .route("/v1/experiments/{id}/abort", post(abort))
        .route("/v1/experiments/{id}/stream", get(stream_frames))
        .route("/v1/monocle/{cluster}/snapshot", get(snapshot))
        .route("/v1/monocle/{cluster}/warnings", get(warnings))
        .route("/v1/monocle/{cluster}/plan", get(plan))
        .route("/v1/monocle/schedule", get(schedule))
        .route("/v1/monocle/schedule/run", post(run_schedule))
        .route("/v1/monocle/review", post(review))
        .route("/v1/metrics/query", get(metrics_query))
        .route("/v1/regions", get(regions))
        .route("/v1/regions/{region}/failover", post(failover))
        .fallback(|| async {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
        })
        .with_state(handle)
}

async fn health(State(h): State<PlatformHandle>) -> Json<serde_json::Value> {
    let s = h.snapshot();
    Json(
        json!({ "status": "ok", "schema_version": SCHEMA_VERSION, "virtual_second": s.virtual_second }),
    )
}

async fn clock(State(h): State<PlatformHandle>) -> Json<serde_json::Value> {
    let s = h.snapshot();
    Json(json!({ "virtual_second": s.virtual_second, "wall_clock": s.wall_clock }))
}

#[derive(Deserialize)]
struct AdvanceRequest {
    secs: u64,
}

const MAX_ADVANCE_SECS: u64 = 86_400;

async fn advance(
    State(h): State<PlatformHandle>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: AdvanceRequest = parse(&body)?;
    if req.secs > MAX_ADVANCE_SECS {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "validation",
            format!("secs must be at most {MAX_ADVANCE_SECS}"),
        ));
    }
    let now = h
        .call(move |p| {
            p.run_for(req.secs);
            p.now_sec()
        })
        .await?;
    Ok(Json(json!({ "virtual_second": now })))
}

async fn clusters(State(h): State<PlatformHandle>) -> Json<serde_json::Value> {
    Json(json!({ "clusters": h.snapshot().clusters }))
}

#[derive(Deserialize)]
struct PropertyRequest {
    key: String,
    value: String,
}

async fn set_property(
    State(h): State<PlatformHandle>,
    Path(cluster): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: PropertyRequest = parse(&body)?;
    let c = cluster.clone();
    h.call(move |p| p.set_property(&c, &req.key, &req.value))
        .await?
        .map_err(|e| match e {
            OrchestratorError::Sim(crate::mesh::SimError::UnknownCluster(_)) => ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("unknown cluster {cluster}"),
            ),
            other => other.into(),
        })?;
    Ok(Json(json!({ "cluster": cluster, "updated": true })))
}

async fn list(State(h): State<PlatformHandle>) -> Json<serde_json::Value> {
    let s = h.snapshot();
    let experiments: Vec<_> = s.experiments.values().collect();
    Json(json!({ "schema_version": SCHEMA_VERSION, "experiments": experiments }))
}

#[derive(Deserialize)]
struct CreateRequest {
    #[serde(flatten)]
    definition: ExperimentDefinition,
    #[serde(default = "yes")]
    start: bool,
}

fn yes() -> bool {
    true
}

async fn create(State(h): State<PlatformHandle>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse(&body)?;
    let result = h
        .call(move |p| {
            let id = p.create(req.definition)?;
            let started = if req.start { p.start(&id) } else { Ok(()) };
            let exp = p.experiment(&id).cloned().expect("just created");
            Ok::<_, OrchestratorError>((exp, started))
        })
        .await??;
    let (exp, started) = result;
    if let Err(e) = started {
        let mut err = ApiError::from(e);
        err.details
            .push(format!("experiment {} was created but not started", exp.id));
        return Err(err);
    }
    Ok((StatusCode::CREATED, Json(record(exp))).into_response())
}

async fn fetch(
    State(h): State<PlatformHandle>,
    Path(id): Path<String>,
) -> ApiResult<Json<ExperimentRecord>> {
    let s = h.snapshot();
    s.experiments
        .get(&ExperimentId::new(id.clone()))
        .cloned()
        .map(|e| Json(record(e)))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("unknown experiment {id}"),
            )
        })
}

async fn start(
    State(h): State<PlatformHandle>,
    Path(id): Path<String>,
) -> ApiResult<Json<ExperimentRecord>> {
    let id = ExperimentId::new(id);
    let exp = h
        .call(move |p| {
            p.start(&id)?;
            Ok::<_, OrchestratorError>(p.experiment(&id).cloned().expect("known"))
        })
        .await??;
    Ok(Json(record(exp)))
}

async fn abort(State(h): State<PlatformHandle>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = ExperimentId::new(id);
    let exp = h
        .call(move |p| {
            p.abort(&id, AbortReason::Manual)?;
            Ok::<_, OrchestratorError>(p.experiment(&id).cloned().expect("known"))
        })
        .await??;
    Ok((StatusCode::ACCEPTED, Json(record(exp))).into_response())
}

/// Server-sent events: one `frame` per virtual second while the experiment
/// runs, `state` on every transition, ending after a terminal state.
async fn stream_frames(
    State(h): State<PlatformHandle>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let id = ExperimentId::new(id);
    let rx = h.subscribe();
    let current = h.snapshot().experiments.get(&id).cloned().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown experiment {id}"),
        )
    })?;
    let first = Event::default()
        .event("state")
        .json_data(PlatformEvent::State {
            experiment_id: id.clone(),
            state: current.state,
            at: current.created_at,
        })
        .expect("serializable");
    let done = current.state.is_terminal();
    let tail = stream::unfold((rx, id, done), |(mut rx, id, done)| async move {
        if done {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let (mine, kind, terminal) = match &ev {
                        PlatformEvent::Stream { experiment_id, .. } => {
                            (experiment_id == &id, "frame", false)
                        }
                        PlatformEvent::State {
                            experiment_id,
                            state,
                            ..
                        } => (experiment_id == &id, "state", state.is_terminal()),
                    };
                    if !mine {
                        continue;
                    }
                    let event = Event::default()
                        .event(kind)
                        .json_data(&ev)
                        .expect("serializable");
                    return Some((Ok(event), (rx, id, terminal)));
                }
                Err(RecvError::Lagged(n)) => {
                    let event = Event::default().event("gap").data(n.to_string());
                    return Some((Ok(event), (rx, id, false)));
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    let s = futures::StreamExt::chain(stream::once(async move { Ok(first) }), tail);
    Ok(Sse::new(s).keep_alive(KeepAlive::default()))
}

async fn snapshot(
    State(h): State<PlatformHandle>,
    Path(cluster): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let c = cluster.clone();
    let snaps = h.call(move |p| p.snapshot(&c)).await??;
    Ok(Json(json!({ "cluster": cluster, "dependencies": snaps })))
}

async fn warnings(
    State(h): State<PlatformHandle>,
    Path(cluster): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let c = cluster.clone();
    let w = h.call(move |p| p.warnings(&c)).await??;
    Ok(Json(json!({ "cluster": cluster, "warnings": w })))
}

async fn plan(
    State(h): State<PlatformHandle>,
    Path(cluster): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let c = cluster.clone();
    let plans = h.call(move |p| p.plan(&c)).await??;
    let rows: Vec<_> = plans
        .iter()
        .map(|g| json!({ "key": g.key(), "experiment": g }))
        .collect();
    Ok(Json(json!({ "cluster": cluster, "experiments": rows })))
}

#[derive(Deserialize, Default)]
struct ScheduleQuery {
    cluster: Option<String>,
}

async fn schedule(
    State(h): State<PlatformHandle>,
    Query(q): Query<ScheduleQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let queue = h.call(move |p| p.schedule(q.cluster.as_deref())).await??;
    let rows: Vec<_> = queue
        .iter()
        .map(|g| json!({ "key": g.key(), "experiment": g }))
        .collect();
    Ok(Json(json!({ "queue": rows })))
}

#[derive(Deserialize)]
struct RunScheduleRequest {
    cluster: Option<String>,
    #[serde(default = "one")]
    limit: usize,
    duration_secs: Option<u64>,
}

fn one() -> usize {
    1
}

async fn run_schedule(
    State(h): State<PlatformHandle>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: RunScheduleRequest = parse(&body)?;
    let run = h
        .call(move |p| p.run_schedule(req.cluster.as_deref(), req.limit, req.duration_secs))
        .await??;
    Ok(Json(serde_json::to_value(run).expect("serializable")))
}

#[derive(Deserialize)]
struct ReviewRequest {
    key: String,
}

async fn review(
    State(h): State<PlatformHandle>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: ReviewRequest = parse(&body)?;
    let key = req.key.clone();
    h.call(move |p| p.review(&req.key))
        .await?
        .map_err(|e| match e {
            OrchestratorError::Validation(_) => ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("no history for {key}"),
            ),
            other => other.into(),
        })?;
    Ok(Json(json!({ "key": key, "reviewed": true })))
}

/// `metric` names the series; `from`/`to` bound it in virtual seconds; every
/// other parameter is a tag.
async fn metrics_query(
    State(h): State<PlatformHandle>,
    Query(mut params): Query<BTreeMap<String, String>>,
) -> ApiResult<Json<serde_json::Value>> {
    let bad = |m: &str| ApiError::new(StatusCode::BAD_REQUEST, "validation", m.to_string());
    let metric = params
        .remove("metric")
        .ok_or_else(|| bad("metric is required"))?;
    let num = |v: Option<String>| v.map(|s| s.parse::<u64>()).transpose();
    let from = num(params.remove("from")).map_err(|_| bad("from must be an integer"))?;
    let to = num(params.remove("to")).map_err(|_| bad("to must be an integer"))?;
    let key = SeriesKey {
        metric,
        tags: params,
    };
    let k = key.clone();
    let series = h
        .call(move |p| {
            let now = p.sim().now();
            let to = to.unwrap_or(now.second() + 1);
            p.sim()
                .telemetry()
                .aggregates
                .query(&k, from.unwrap_or(0), to, now)
        })
        .await?;
    match series {
        Some(s) => Ok(Json(serde_json::to_value(s).expect("serializable"))),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no series {} {:?}", key.metric, key.tags),
        )),
    }
}

async fn regions(State(h): State<PlatformHandle>) -> Json<serde_json::Value> {
    Json(json!({ "regions": h.snapshot().regions.regions }))
}

#[derive(Deserialize)]
struct FailoverRequest {
    in_progress: bool,
}

async fn failover(
    State(h): State<PlatformHandle>,
    Path(region): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: FailoverRequest = parse(&body)?;
    let r = region.clone();
    let aborted = h
        .call(move |p| p.set_failover(&r, req.in_progress))
        .await?
        .map_err(|e| match e {
            OrchestratorError::Validation(_) => ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("unknown region {region}"),
            ),
            other => other.into(),
        })?;
    Ok(Json(
        json!({ "region": region, "failover_in_progress": req.in_progress, "aborted": aborted }),
    ))
}
