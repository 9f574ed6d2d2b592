//! HTTP front end for interactive sessions. Every session starts from the
//! same pristine state; turns of one session run one at a time.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use kmpadapt::io::{snapshot, SessionSnapshot};
use kmpadapt::kmp::KmpError;
use kmpadapt::llm::Backend;
use kmpadapt::session::{run_turn, SessionState};

/// Trace events included in a snapshot.
pub const TRACE_TAIL: usize = 5;

struct Slot {
    state: SessionState,
    snapshot: SessionSnapshot,
}

pub struct AppState {
    pristine: SessionState,
    pristine_snapshot: SessionSnapshot,
    backend: Arc<dyn Backend>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Slot>>>>,
}

impl AppState {
    pub fn new(pristine: SessionState, backend: Arc<dyn Backend>) -> Result<Self, KmpError> {
        let pristine_snapshot = snapshot("", &pristine, TRACE_TAIL)?;
        Ok(Self { pristine, pristine_snapshot, backend, sessions: Mutex::new(HashMap::new()) })
    }

    fn fresh(&self, id: &str) -> Slot {
        Slot {
            state: self.pristine.clone(),
            snapshot: SessionSnapshot { session_id: id.to_string(), ..self.pristine_snapshot.clone() },
        }
    }

    fn slot(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Slot>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn unknown(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown session '{id}'"))
}

async fn health(State(app): State<Shared>) -> Response {
    let sessions = app.sessions.lock().unwrap().len();
    Json(json!({ "status": "ok", "sessions": sessions })).into_response()
}

async fn create(State(app): State<Shared>) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    let slot = app.fresh(&id);
    let snapshot = slot.snapshot.clone();
    app.sessions.lock().unwrap().insert(id.clone(), Arc::new(tokio::sync::Mutex::new(slot)));
    (StatusCode::CREATED, Json(json!({ "id": id, "snapshot": snapshot }))).into_response()
}

async fn get_session(State(app): State<Shared>, Path(id): Path<String>) -> Response {
    let Some(slot) = app.slot(&id) else { return unknown(&id) };
    let slot = slot.lock().await;
    Json(&slot.snapshot).into_response()
}

async fn trace(State(app): State<Shared>, Path(id): Path<String>) -> Response {
    let Some(slot) = app.slot(&id) else { return unknown(&id) };
    let slot = slot.lock().await;
    Json(&slot.state.trace).into_response()
}

async fn reset(State(app): State<Shared>, Path(id): Path<String>) -> Response {
    let Some(slot) = app.slot(&id) else { return unknown(&id) };
    let mut slot = slot.lock().await;
    *slot = app.fresh(&id);
    Json(&slot.snapshot).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Instruction {
    text: String,
}

async fn instruct(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(slot) = app.slot(&id) else { return unknown(&id) };
    let text = match serde_json::from_slice::<Instruction>(&body) {
        Ok(i) if !i.text.trim().is_empty() => i.text,
        Ok(_) => return error(StatusCode::BAD_REQUEST, "text must not be empty"),
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("expected {{\"text\": ...}}: {e}")),
    };
    let mut slot = slot.lock().await;
    let state = slot.state.clone();
    let backend = app.backend.clone();
    let session = id.clone();
    let turn = tokio::task::spawn_blocking(move || {
        let (next, outcome) = run_turn(&state, &text, backend.as_ref()).map_err(|e| e.to_string())?;
        let snap = snapshot(&session, &next, TRACE_TAIL).map_err(|e| e.to_string())?;
        Ok::<_, String>((next, outcome, snap))
    })
    .await;
    match turn {
        Ok(Ok((next, outcome, snap))) => {
            slot.state = next;
            slot.snapshot = snap;
            Json(json!({
                "ok": outcome.ok,
                "feedback": outcome.feedback,
                "multi_tool": outcome.multi_tool,
                "snapshot": slot.snapshot,
            }))
            .into_response()
        }
        Ok(Err(message)) => {
            Json(json!({ "ok": false, "feedback": message, "multi_tool": false, "snapshot": slot.snapshot }))
                .into_response()
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/instruct", post(instruct))
        .route("/session/{id}/reset", post(reset))
        .route("/session/{id}/trace", get(trace))
        .with_state(app)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
