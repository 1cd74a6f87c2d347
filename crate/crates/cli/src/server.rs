//! Read-only HTTP service over a loaded knowledge base.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use planeval::orchestrator::ChatBackend;
use planeval::{Embedder, Error, IndexedKb, PlanRecord, ProtocolSpec, RetrievalConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service;

pub struct AppState {
    pub ikb: IndexedKb,
    pub embedder: Arc<dyn Embedder>,
    pub backend: Arc<dyn ChatBackend>,
    pub retrieval: RetrievalConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub plan: PlanRecord,
    /// Overrides the knowledge-base protocol for score and check.
    #[serde(default)]
    pub protocol: Option<ProtocolSpec>,
    /// Overrides the service's default retrieval config.
    #[serde(default)]
    pub config: Option<RetrievalConfig>,
}

pub struct ApiError {
    status: StatusCode,
    category: String,
    message: String,
}

impl ApiError {
    fn request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            category: "request".into(),
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownProtocol { .. } => StatusCode::NOT_FOUND,
            Error::EmbeddingProvider(_) | Error::Backend(_) => StatusCode::BAD_GATEWAY,
            Error::Io { .. } | Error::SingularKernel(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => match e.category() {
                "validation" | "retrieval" | "scoring" => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        };
        Self {
            status,
            category: e.category().into(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "category": self.category, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::request(format!("invalid request body: {e}")))
}

/// Runs CPU-bound or blocking work off the async executor.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&AppState) -> Result<T, Error> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            category: "internal".into(),
            message: e.to_string(),
        })?
        .map(Json)
        .map_err(ApiError::from)
}

fn protocol_for(state: &AppState, req: &PlanRequest) -> Result<ProtocolSpec, Error> {
    match &req.protocol {
        Some(p) => Ok(p.clone()),
        None => service::kb_protocol(&state.ikb.kb, &req.plan).cloned(),
    }
}

fn retrieval_for(state: &AppState, req: &PlanRequest) -> Result<RetrievalConfig, Error> {
    req.config.unwrap_or(state.retrieval).validated()
}

async fn score(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<service::ScoreResult> {
    let req: PlanRequest = parse(&body)?;
    blocking(state, move |s| {
        let spec = protocol_for(s, &req)?;
        service::score(&req.plan, &spec, Some(&s.ikb.kb))
    })
    .await
}

async fn retrieve(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<planeval::PredictionResult> {
    let req: PlanRequest = parse(&body)?;
    blocking(state, move |s| {
        let config = retrieval_for(s, &req)?;
        planeval::predict(&req.plan, &s.ikb, &config, s.embedder.as_ref())
    })
    .await
}

async fn check(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<planeval::ViolationReport> {
    let req: PlanRequest = parse(&body)?;
    blocking(state, move |s| {
        let spec = protocol_for(s, &req)?;
        service::check(&req.plan, &spec)
    })
    .await
}

async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<service::ExplainResult> {
    let req: PlanRequest = parse(&body)?;
    blocking(state, move |s| {
        let config = retrieval_for(s, &req)?;
        service::explain(&req.plan, &s.ikb, &config, s.embedder.as_ref(), s.backend.as_ref())
    })
    .await
}

async fn kb_stats(State(state): State<Arc<AppState>>) -> Json<service::KbStats> {
    Json(service::kb_stats(&state.ikb.kb))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        category: "request".into(),
        message: "no such endpoint".into(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/check", post(check))
        .route("/v1/explain", post(explain))
        .route("/v1/kb/stats", get(kb_stats))
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
