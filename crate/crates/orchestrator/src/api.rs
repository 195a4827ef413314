//! JSON API under `/api/v1` for the review front end.
//!
//! Mutating endpoints call the same [`Orchestrator`] methods as the CLI, so
//! the human gates are enforced in one place. Every error body has the shape
//! `{"error": <kind>, "message": <text>}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tokio::sync::Mutex;

use crate::config::{ConfigError, RunConfig};
use crate::runner::{Orchestrator, PromptEditRequest, RunError};
use crate::state::Stage;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port already in use: {0}")]
    PortInUse(SocketAddr),
    #[error("another process holds the lock on the run directory")]
    LockHeld,
    #[error("run directory {0} does not exist")]
    MissingRunDir(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(RunError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub struct ApiError(RunError);

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            RunError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            RunError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            RunError::HumanGatePending { .. } => (StatusCode::CONFLICT, "gate_pending"),
            RunError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            RunError::LockHeld => (StatusCode::LOCKED, "lock_held"),
            RunError::StageFailed { .. } => (StatusCode::BAD_GATEWAY, "stage_failed"),
            RunError::Interrupted { .. } | RunError::Config(_) | RunError::Store(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        let mut body = json!({"error": kind, "message": self.0.to_string()});
        if let RunError::HumanGatePending { stage, action } = &self.0 {
            body["stage"] = json!(stage);
            body["action"] = json!(action);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: serde::Serialize>(v: T) -> ApiResult {
    Ok(Json(v).into_response())
}

#[derive(Clone)]
struct AppState {
    orch: Arc<Mutex<Orchestrator>>,
    token: Option<Arc<str>>,
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token) {
            return (
                StatusCode::UNAUTHORIZED,
                Json(json!({"error": "unauthorized", "message": "missing or wrong bearer token"})),
            )
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
    actor: String,
    #[serde(default)]
    expected_version: Option<u64>,
}

#[derive(Deserialize)]
struct BulkLabel {
    record_id: String,
    label: String,
}

/// Several labels at once, optionally sealing the pool afterwards.
#[derive(Deserialize)]
struct BulkBody {
    actor: String,
    #[serde(default)]
    labels: Vec<BulkLabel>,
    #[serde(default)]
    expected_version: Option<u64>,
    #[serde(default)]
    seal: bool,
}

#[derive(Deserialize)]
struct EditBody {
    actor: String,
    #[serde(flatten)]
    edit: PromptEditRequest,
}

#[derive(Deserialize)]
struct ApproveBody {
    actor: String,
    #[serde(default)]
    expected_version: Option<u64>,
}

#[derive(Deserialize)]
struct OverrideBody {
    label: String,
    actor: String,
}

#[derive(Deserialize)]
struct StageBody {
    target: Stage,
}

async fn run_state(State(s): State<AppState>) -> ApiResult {
    ok(s.orch.lock().await.state()?)
}

/// Stage futures borrow across awaits in ways the compiler cannot prove
/// `Send`, so they are driven on a blocking thread instead of a task.
async fn run_stage(State(s): State<AppState>, Json(b): Json<StageBody>) -> ApiResult {
    let handle = tokio::runtime::Handle::current();
    let result = tokio::task::spawn_blocking(move || {
        let mut orch = s.orch.blocking_lock();
        handle.block_on(orch.run_stage(b.target))
    })
    .await
    .map_err(|e| RunError::Invalid(format!("stage task failed: {e}")))?;
    ok(result?)
}

async fn pool_items(State(s): State<AppState>) -> ApiResult {
    ok(s.orch.lock().await.pool_view()?)
}

async fn pool_bulk(State(s): State<AppState>, Json(b): Json<BulkBody>) -> ApiResult {
    let orch = s.orch.lock().await;
    let mut expected = b.expected_version;
    for l in &b.labels {
        let view = orch.label_pool_item(&l.record_id, &l.label, &b.actor, expected)?;
        expected = expected.map(|_| view.version);
    }
    if b.seal {
        orch.seal_pool(&b.actor)?;
    }
    ok(orch.pool_view()?)
}

async fn pool_label(State(s): State<AppState>, Path(id): Path<String>, Json(b): Json<LabelBody>) -> ApiResult {
    ok(s.orch.lock().await.label_pool_item(&id, &b.label, &b.actor, b.expected_version)?)
}

async fn pool_seal(State(s): State<AppState>, Json(b): Json<ApproveBody>) -> ApiResult {
    ok(s.orch.lock().await.seal_pool(&b.actor)?)
}

async fn prompt(State(s): State<AppState>) -> ApiResult {
    ok(s.orch.lock().await.prompt()?)
}

async fn prompt_edit(State(s): State<AppState>, Json(b): Json<EditBody>) -> ApiResult {
    ok(s.orch.lock().await.edit_prompt(&b.edit, &b.actor)?)
}

async fn prompt_approve(State(s): State<AppState>, Json(b): Json<ApproveBody>) -> ApiResult {
    ok(s.orch.lock().await.approve_prompt(&b.actor, b.expected_version)?)
}

async fn mismatches(State(s): State<AppState>) -> ApiResult {
    ok(s.orch.lock().await.mismatches()?)
}

async fn mismatch_override(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<OverrideBody>,
) -> ApiResult {
    ok(s.orch.lock().await.override_mismatch(&id, &b.label, &b.actor)?)
}

async fn report(State(s): State<AppState>) -> ApiResult {
    let orch = s.orch.lock().await;
    let report = orch
        .report()?
        .ok_or_else(|| RunError::NotFound("the run has not been finalized".into()))?;
    let flagged = orch.flagged()?;
    ok(json!({"report": report, "flagged": flagged}))
}

pub fn router(orch: Orchestrator, token: Option<String>) -> Router {
    let state = AppState {
        orch: Arc::new(Mutex::new(orch)),
        token: token.map(Arc::from),
    };
    let api = Router::new()
        .route("/run/state", get(run_state))
        .route("/run/stage", post(run_stage))
        .route("/pool/items", get(pool_items).post(pool_bulk))
        .route("/pool/items/:id/label", post(pool_label))
        .route("/pool/seal", post(pool_seal))
        .route("/prompt", get(prompt))
        .route("/prompt/edits", post(prompt_edit))
        .route("/prompt/approve", post(prompt_approve))
        .route("/mismatches", get(mismatches))
        .route("/mismatches/:id/override", post(mismatch_override))
        .route("/report", get(report))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    Router::new().nest("/api/v1", api)
}

/// Binds `addr` and checks the run directory is usable. The returned
/// listener is ready for [`axum::serve`].
pub async fn bind(config: RunConfig, addr: SocketAddr) -> Result<(tokio::net::TcpListener, Router), ServeError> {
    if !config.run_dir.is_dir() {
        return Err(ServeError::MissingRunDir(config.run_dir.display().to_string()));
    }
    let token = config.api_token()?;
    let orch = Orchestrator::open(config).map_err(ServeError::Run)?;
    // Probe the lock so a running CLI stage is reported up front.
    match orch.store().lock() {
        Ok(lock) => drop(lock),
        Err(labelkit_core::store::StoreError::LockHeld(_)) => return Err(ServeError::LockHeld),
        Err(e) => return Err(ServeError::Run(e.into())),
    }
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(addr)
        } else {
            ServeError::Io(e)
        }
    })?;
    Ok((listener, router(orch, token)))
}

pub async fn serve(config: RunConfig, addr: SocketAddr) -> Result<(), ServeError> {
    let (listener, app) = bind(config, addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, app).await?;
    Ok(())
}
