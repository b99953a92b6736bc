//! HTTP+JSON API under `/v1`.
//!
//! | method | path | |
//! |---|---|---|
//! | GET  | `/v1/health` | liveness, no token needed |
//! | POST | `/v1/sessions` | create a session |
//! | GET  | `/v1/sessions` | list sessions |
//! | GET  | `/v1/sessions/{id}` | session view |
//! | POST | `/v1/sessions/{id}/step` | advance one step, or `{"mode":"run"}` |
//! | POST | `/v1/sessions/{id}/feedback` | submit a verdict for the pending abstention |
//! | POST | `/v1/sessions/{id}/resume` | new refinement budget after an interruption |
//! | GET  | `/v1/sessions/{id}/plan` | exported plan |
//! | GET  | `/v1/sessions/{id}/events` | event log as JSON lines |
//! | GET  | `/v1/feedback-queue` | sessions awaiting feedback |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conplan_core::{DecisionKind, Gamma, Score};
use conplan_planner::backend::Script;
use conplan_planner::events::to_json_lines;
use conplan_planner::gateway::Candidate;
use conplan_planner::session::PendingFeedback;
use conplan_planner::{
    Action, BackendDescriptor, BackendKind, Criterion, FeedbackRecord, GatewayError, IncidentRecord,
    PlanError, ProviderKind, SessionStatus, StepOutcome,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::EngineConfig;
use crate::store::{
    Advance, CreateSession, FeedbackSubmission, PlanArtifact, QueueEntry, SessionStore, Snapshot, StoreError,
};

pub struct AppState {
    pub store: Arc<SessionStore>,
    pub config: EngineConfig,
}

impl AppState {
    pub fn new(store: Arc<SessionStore>, config: EngineConfig) -> Arc<Self> {
        Arc::new(Self { store, config })
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::AlreadyExists(_) => StatusCode::CONFLICT,
            StoreError::InvalidId(_) | StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Backend(_) => StatusCode::BAD_GATEWAY,
            StoreError::Plan(p) => match p {
                PlanError::Stale { .. } | PlanError::InvalidStatus(_) => StatusCode::CONFLICT,
                PlanError::Feedback(_) | PlanError::Settings(_) => StatusCode::UNPROCESSABLE_ENTITY,
                PlanError::Gateway(GatewayError::CompletionUnparseable(_)) | PlanError::Gateway(_) => {
                    StatusCode::BAD_GATEWAY
                }
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            StoreError::Io { .. } | StoreError::Log(_) | StoreError::Json { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = match self.status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNAUTHORIZED => "unauthorized",
            StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY => "invalid",
            StatusCode::BAD_GATEWAY => "backend",
            _ => "internal",
        };
        (self.status, Json(json!({ "error": kind, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, StoreError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

/// Parses a JSON body, treating an empty body as the default value.
fn body_or_default<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub incident: IncidentRecord,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_provider")]
    pub provider: ProviderKind,
    /// Replies for a scripted backend. Without one the configured backend
    /// is used.
    #[serde(default)]
    pub script: Option<Script>,
}

fn default_provider() -> ProviderKind {
    ProviderKind::Human
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(default)]
    pub mode: Advance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRequestBody {
    #[serde(flatten)]
    pub submission: FeedbackSubmission,
    /// Keep running after the verdict is applied until the session parks
    /// or finishes.
    #[serde(default = "default_true")]
    pub advance: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateView {
    pub index: usize,
    pub action: Action,
    pub predicted_remaining_steps: Option<f64>,
    pub prediction_imputed: bool,
    /// The candidate the policy selects, or would have selected without
    /// the gate.
    pub highlighted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSetView {
    pub stage: usize,
    pub icl_iteration: usize,
    pub candidates: Vec<CandidateView>,
    pub consistency: Option<Score>,
    pub threshold: Gamma,
    pub decision: Option<DecisionKind>,
    pub constraint_violation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionView {
    pub criterion: Criterion,
    pub objective: String,
    pub satisfied: bool,
}

/// The payload the operator console renders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub status: SessionStatus,
    pub stage: usize,
    pub icl_iteration: usize,
    pub threshold: Gamma,
    pub provider: ProviderKind,
    pub backend: BackendKind,
    pub current: Option<CandidateSetView>,
    pub pending_feedback: Option<PendingFeedback>,
    pub feedback_history: Vec<FeedbackRecord>,
    pub accepted_actions: Vec<Action>,
    pub criteria: Vec<CriterionView>,
    pub events: usize,
}

impl SessionView {
    pub fn of(snap: &Snapshot) -> Self {
        let s = &snap.session;
        let current = s.current().map(|entry| {
            let highlighted = entry.decision.map(|d| d.selected_index.unwrap_or(d.argmin_index));
            CandidateSetView {
                stage: entry.candidates.stage,
                icl_iteration: entry.candidates.icl_iteration,
                candidates: entry
                    .candidates
                    .members
                    .iter()
                    .map(|c: &Candidate| CandidateView {
                        index: c.index,
                        action: c.action.clone(),
                        predicted_remaining_steps: c.prediction.map(|p| p.remaining_steps),
                        prediction_imputed: c.prediction_imputed,
                        highlighted: highlighted == Some(c.index),
                    })
                    .collect(),
                consistency: entry.score,
                threshold: s.settings.threshold,
                decision: entry.decision.map(|d| d.kind),
                constraint_violation: entry.constraint_violation.clone(),
            }
        });
        Self {
            session_id: s.session_id.clone(),
            incident_id: s.incident_id.clone(),
            status: s.status,
            stage: s.stage,
            icl_iteration: s.icl_iteration,
            threshold: s.settings.threshold,
            provider: snap.meta.provider,
            backend: snap.meta.backend.kind,
            current,
            pending_feedback: s.pending_feedback.clone(),
            feedback_history: s.feedback_records().cloned().collect(),
            accepted_actions: s.accepted_actions.clone(),
            criteria: Criterion::ALL
                .into_iter()
                .map(|c| CriterionView {
                    criterion: c,
                    objective: c.objective().to_string(),
                    satisfied: s.state.get(c),
                })
                .collect(),
            events: snap.events.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub incident_id: Option<String>,
    pub status: SessionStatus,
    pub stage: usize,
    pub icl_iteration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResponse {
    pub outcome: String,
    pub session: SessionView,
}

fn outcome_name(outcome: &StepOutcome) -> String {
    match outcome {
        StepOutcome::Selected(_) => "selected".into(),
        StepOutcome::AwaitingFeedback => "awaiting_feedback".into(),
        StepOutcome::Interrupted => "interrupted".into(),
        StepOutcome::Completed => "completed".into(),
        StepOutcome::Failed => "failed".into(),
        StepOutcome::Idle(status) => format!("idle_{status}"),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let backend = if req.script.is_some() {
        BackendDescriptor::scripted()
    } else {
        app.config.backend.clone()
    };
    let settings = app
        .config
        .settings_for(backend.kind)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let spec = CreateSession {
        session_id: req.session_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
        record: req.incident,
        settings,
        seed: req.seed.unwrap_or(app.config.seed),
        provider: req.provider,
        backend,
        script: req.script,
    };
    let store = app.store.clone();
    let snap = blocking(move || store.create(spec)).await?;
    Ok((StatusCode::CREATED, Json(SessionView::of(&snap))))
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    Json(
        app.store
            .list()
            .iter()
            .map(|snap| SessionSummary {
                session_id: snap.session.session_id.clone(),
                incident_id: snap.session.incident_id.clone(),
                status: snap.session.status,
                stage: snap.session.stage,
                icl_iteration: snap.session.icl_iteration,
            })
            .collect(),
    )
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let snap = app.store.get(&id)?;
    Ok(Json(SessionView::of(&snap)))
}

async fn step_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<StepResponse>> {
    let req: StepRequest = body_or_default(&body)?;
    let store = app.store.clone();
    let (outcome, snap) = blocking(move || store.advance(&id, req.mode)).await?;
    Ok(Json(StepResponse {
        outcome: outcome_name(&outcome),
        session: SessionView::of(&snap),
    }))
}

async fn submit_feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: FeedbackRequestBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let store = app.store.clone();
    let snap = blocking(move || {
        let snap = store.submit_feedback(&id, req.submission)?;
        if req.advance && snap.session.status == SessionStatus::Running {
            Ok(store.advance(&id, Advance::Run)?.1)
        } else {
            Ok(snap)
        }
    })
    .await?;
    Ok(Json(SessionView::of(&snap)))
}

async fn resume_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let store = app.store.clone();
    let snap = blocking(move || store.resume(&id)).await?;
    Ok(Json(SessionView::of(&snap)))
}

async fn export_plan(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<PlanArtifact>> {
    Ok(Json(app.store.get(&id)?.plan()))
}

async fn export_events(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = app.store.get(&id)?;
    Ok((
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        to_json_lines(&snap.events),
    )
        .into_response())
}

async fn feedback_queue(State(app): State<Arc<AppState>>) -> Json<Vec<QueueEntry>> {
    Json(app.store.awaiting_feedback())
}

async fn require_token(State(app): State<Arc<AppState>>, headers: HeaderMap, request: Request, next: Next) -> Response {
    if let Some(expected) = &app.config.server.api_token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

pub fn router(app: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/resume", post(resume_session))
        .route("/sessions/{id}/plan", get(export_plan))
        .route("/sessions/{id}/events", get(export_events))
        .route("/feedback-queue", get(feedback_queue))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    let v1 = Router::new().route("/health", get(health)).merge(protected);
    Router::new().nest("/v1", v1).with_state(app)
}
