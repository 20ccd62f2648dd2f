//! HTTP front end of the referral queue.
//!
//! | route | |
//! |---|---|
//! | `GET /queue?limit=k` | pending items, most uncertain first |
//! | `GET /samples/{id}` | one item in any state |
//! | `POST /labels` | submit a [`LabelSubmission`] |
//! | `GET /status` | loop progress |

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mcref_core::queue::{LabelSubmission, QueueError, ReferralQueue};
use mcref_core::SampleId;
use serde::Deserialize;
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        let (status, kind) = match e {
            QueueError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            QueueError::NotPending(_) => (StatusCode::CONFLICT, "not_pending"),
            QueueError::InvalidLabel { .. } => (StatusCode::BAD_REQUEST, "invalid_label"),
            QueueError::BatchInProgress | QueueError::EmptyBatch => (StatusCode::CONFLICT, "batch"),
        };
        Self::new(status, kind, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueueParams {
    limit: Option<usize>,
}

async fn list_queue(
    State(queue): State<Arc<ReferralQueue>>,
    params: Result<Query<QueueParams>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(params) = params.map_err(|e| ApiError::bad_request(e.body_text()))?;
    Ok(Json(queue.pending(params.limit)).into_response())
}

async fn get_sample(
    State(queue): State<Arc<ReferralQueue>>,
    id: Result<Path<u64>, PathRejection>,
) -> Result<Response, ApiError> {
    let Path(id) = id.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let item = queue
        .get(SampleId(id))
        .ok_or(QueueError::NotFound(SampleId(id)))?;
    Ok(Json(item).into_response())
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

async fn post_label(
    State(queue): State<Arc<ReferralQueue>>,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(mut sub) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    sub.submitted_at.get_or_insert_with(now_millis);
    let item = queue.submit(sub)?;
    Ok(Json(item).into_response())
}

async fn get_status(State(queue): State<Arc<ReferralQueue>>) -> Response {
    Json(queue.status()).into_response()
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(queue: Arc<ReferralQueue>) -> Router {
    Router::new()
        .route("/queue", get(list_queue))
        .route("/samples/{id}", get(get_sample))
        .route("/labels", post(post_label))
        .route("/status", get(get_status))
        .fallback(not_found)
        .with_state(queue)
}
