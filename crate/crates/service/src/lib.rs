//! HTTP review service: analysts claim queued cases, see the model's fraud
//! score and concept explanations, and submit decisions with concepts that
//! feed the tuning loop.

mod state;

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

pub use state::{
    Agreement, ArchSummary, CasePrediction, CaseRecord, CaseStatus, Clock, EventPayload, LoopMetrics, ManualClock,
    ModelInfo, ReviewAck, ReviewRequest, ReviewService, ScoredConcept, ServiceConfig, ServiceError, SystemClock,
    Thresholds, TuneReport, DEFAULT_BAND, DEFAULT_CLAIM_TTL_SECS,
};

pub const EXPERT_HEADER: &str = "x-expert-id";
pub const ADMIN_HEADER: &str = "x-admin-token";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownExpert(_) | ServiceError::MissingExpert => StatusCode::UNAUTHORIZED,
            ServiceError::UnknownCase(_) => StatusCode::NOT_FOUND,
            ServiceError::NotClaimed(_) => StatusCode::CONFLICT,
            ServiceError::InvalidConcepts(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Forbidden => StatusCode::FORBIDDEN,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type Shared = Arc<ReviewService>;

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn expert(headers: &HeaderMap) -> Result<String, ServiceError> {
    header(headers, EXPERT_HEADER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .ok_or(ServiceError::MissingExpert)
}

/// Runs `f` off the async workers; reviews may tune inline.
async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&ReviewService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn next_case(State(svc): State<Shared>, headers: HeaderMap) -> Result<Response, ServiceError> {
    let id = expert(&headers)?;
    Ok(match blocking(svc, move |s| s.next_case(&id)).await? {
        Some(case) => Json(case).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn review(
    State(svc): State<Shared>,
    Path(case_id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<ReviewRequest>,
) -> Result<Json<ReviewAck>, ServiceError> {
    let id = expert(&headers)?;
    blocking(svc, move |s| s.review(&case_id, &id, req)).await.map(Json)
}

async fn model(State(svc): State<Shared>) -> Json<ModelInfo> {
    Json(svc.model_info())
}

async fn taxonomy(State(svc): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(svc.taxonomy()).expect("taxonomy serializes"))
}

async fn metrics(State(svc): State<Shared>) -> Json<LoopMetrics> {
    Json(svc.metrics())
}

async fn tune(State(svc): State<Shared>, headers: HeaderMap) -> Result<Json<TuneReport>, ServiceError> {
    let token = header(&headers, ADMIN_HEADER).map(String::from);
    blocking(svc, move |s| s.force_tune(token.as_deref())).await.map(Json)
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/api/cases/next", get(next_case))
        .route("/api/cases/{id}/review", post(review))
        .route("/api/model", get(model))
        .route("/api/taxonomy", get(taxonomy))
        .route("/api/metrics", get(metrics))
        .route("/api/model/tune", post(tune))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Shared, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}
