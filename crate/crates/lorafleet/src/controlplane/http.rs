//! JSON-over-HTTP front end for [`ControlPlane`].

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ControlError, ControlPlane, ErrorBody, OpKind, WorkerDescriptor};
use crate::lifecycle::ServiceError;
use lorafleet_core::lifecycle::LifecycleError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub kind: OpKind,
    #[serde(default)]
    pub payload: Value,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn schema(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { code: "schema_invalid".into(), message: message.into(), retryable: false },
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        let status = match &e {
            ControlError::SchemaInvalid { .. } => StatusCode::BAD_REQUEST,
            ControlError::UnknownOp(_) | ControlError::UnknownWorker(_) | ControlError::UnknownPolicy(_) => {
                StatusCode::NOT_FOUND
            }
            ControlError::Service(ServiceError::Lifecycle(
                LifecycleError::UnknownPolicy(_) | LifecycleError::UnknownRevision(_),
            )) => StatusCode::NOT_FOUND,
            ControlError::IdempotencyConflict { .. } | ControlError::NoCompatibleWorkerClass { .. } => StatusCode::CONFLICT,
            _ if e.retryable() => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, body: e.body() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type Shared = Arc<ControlPlane>;

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::schema(e.to_string()))
}

async fn submit(State(cp): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: SubmitRequest = parse(&body)?;
    let op_id = cp.submit(req.kind, req.payload, req.idempotency_key)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "op_id": op_id }))))
}

async fn poll(State(cp): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(cp.poll(&id)?))
}

async fn register(State(cp): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let desc: WorkerDescriptor = parse(&body)?;
    Ok((StatusCode::CREATED, Json(cp.register_worker(desc)?)))
}

async fn evict(State(cp): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let reg = cp.remove_worker(&id)?;
    Ok(Json(json!({ "evicted": reg.worker_id })))
}

async fn policy(State(cp): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    cp.policies().view(&id).map(Json).ok_or_else(|| ControlError::UnknownPolicy(id).into())
}

async fn metrics(State(cp): State<Shared>) -> impl IntoResponse {
    Json(cp.metrics())
}

pub fn router(cp: Shared) -> Router {
    Router::new()
        .route("/v1/ops", post(submit))
        .route("/v1/ops/{*id}", get(poll))
        .route("/v1/workers", post(register))
        .route("/v1/workers/{id}", delete(evict))
        .route("/v1/policies/{*id}", get(policy))
        .route("/v1/metrics", get(metrics))
        .with_state(cp)
}

/// Drives `tick` and idle eviction on an interval until the task is dropped.
pub async fn scheduler_loop(cp: Shared, tick: Duration) {
    let mut interval = tokio::time::interval(tick);
    loop {
        interval.tick().await;
        let cp = cp.clone();
        let _ = tokio::task::spawn_blocking(move || {
            let _ = cp.tick();
            cp.evict_idle(cp.config().idle_threshold_ms);
        })
        .await;
    }
}
