//! JSON API over a humaneval [`Service`].
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/session` | [`CreateSession`] | `Session`, 201 |
//! | POST | `/session/{id}/consent` | | `Session` |
//! | GET | `/session/{id}/next` | | `Next` |
//! | POST | `/session/{id}/answer` | [`Answer`] | `ResponseRecord` |
//! | GET | `/session/{id}/score` | | `SessionScore` |
//! | GET | `/summary?require_attention=true` | | accuracy per RE source |
//!
//! Errors come back as `{"error": <code>, "message": <text>}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use regrank::humaneval::{summarize, HumanEvalError, ReSource, Service};

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub participant_id: String,
    pub dialogue_id: String,
    pub re_source: ReSource,
    /// Drawn at random when absent; echoed back in the session either way.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Answer {
    pub question_index: usize,
    pub choice: String,
}

#[derive(Debug, Deserialize)]
struct SummaryQuery {
    #[serde(default)]
    require_attention: bool,
}

pub struct ApiError(pub HumanEvalError);

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str) {
        use HumanEvalError::*;
        match self.0 {
            UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            UnknownDialogue(_) => (StatusCode::NOT_FOUND, "unknown_dialogue"),
            NoMaterial(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_material"),
            ConsentRequired => (StatusCode::FORBIDDEN, "consent_required"),
            EligibilityViolation { .. } => (StatusCode::CONFLICT, "eligibility_violation"),
            SessionComplete => (StatusCode::CONFLICT, "session_complete"),
            DuplicateAnswer(_) => (StatusCode::CONFLICT, "duplicate_answer"),
            OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            IncompleteSession { .. } => (StatusCode::CONFLICT, "incomplete_session"),
            InvalidChoice { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_choice"),
            Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "log"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.parts();
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": code, "message": self.0.to_string() }))).into_response()
    }
}

impl From<HumanEvalError> for ApiError {
    fn from(e: HumanEvalError) -> Self {
        ApiError(e)
    }
}

type Shared = State<Arc<Service>>;

async fn create(State(svc): Shared, Json(req): Json<CreateSession>) -> Result<impl IntoResponse, ApiError> {
    let seed = req.seed.unwrap_or_else(rand::random);
    let session = svc.create_session(&req.participant_id, &req.dialogue_id, req.re_source, seed)?;
    log::info!("{} created for {} on {}", session.session_id, session.participant_id, session.dialogue_id);
    Ok((StatusCode::CREATED, Json(session)))
}

async fn consent(State(svc): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.give_consent(&id)?))
}

async fn next(State(svc): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.next_question(&id)?))
}

async fn answer(State(svc): Shared, Path(id): Path<String>, Json(req): Json<Answer>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.submit_answer(&id, req.question_index, &req.choice)?))
}

async fn score(State(svc): Shared, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.session_score(&id)?))
}

async fn summary(State(svc): Shared, Query(q): Query<SummaryQuery>) -> impl IntoResponse {
    Json(summarize(&svc.completed(), q.require_attention))
}

/// The API routes, plus `images_dir` served under `/images` when given.
pub fn router(service: Arc<Service>, images_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/session", post(create))
        .route("/session/{id}/consent", post(consent))
        .route("/session/{id}/next", get(next))
        .route("/session/{id}/answer", post(answer))
        .route("/session/{id}/score", get(score))
        .route("/summary", get(summary))
        .with_state(service);
    match images_dir {
        Some(dir) => api.nest_service("/images", ServeDir::new(dir)),
        None => api,
    }
}
