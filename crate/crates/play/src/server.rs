//! HTTP routes and the server-sent-events live channel.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use qfrog_core::env::{Action, EnvConfig, DEFAULT_MAX_STEPS};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio_stream::wrappers::BroadcastStream;
use tower_http::services::ServeDir;

use crate::message::{state_schema, ErrorBody, ErrorDetail, Mode, SessionCreated, StateMessage, SCHEMA_VERSION};
use crate::session::{frog_index, AgentPolicy, PlayError, Session, SessionStore};

pub const DEFAULT_PORT: u16 = 7777;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

impl IntoResponse for PlayError {
    fn into_response(self) -> Response {
        let status = match self {
            PlayError::NotFound(_) => StatusCode::NOT_FOUND,
            PlayError::BadRequest(_) | PlayError::Checkpoint(_) | PlayError::PolicyRequired(_) => {
                StatusCode::BAD_REQUEST
            }
            PlayError::NoPolicy(_)
            | PlayError::AgentControlled(_)
            | PlayError::AlreadySubmitted(_)
            | PlayError::FrogInactive(_)
            | PlayError::EpisodeOver => StatusCode::CONFLICT,
            PlayError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: ErrorDetail {
                code: self.code().to_string(),
                message: self.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    /// Policy loaded at startup; sessions may name their own instead.
    pub policy: Option<Arc<AgentPolicy>>,
    /// Mode for create requests that do not name one.
    pub default_mode: Mode,
}

impl AppState {
    pub fn new(policy: Option<AgentPolicy>, idle_timeout: Duration) -> Self {
        Self {
            store: Arc::new(SessionStore::new(idle_timeout)),
            policy: policy.map(Arc::new),
            default_mode: Mode::Hotseat,
        }
    }

    /// Fails when `mode` drives a frog but no policy is loaded.
    pub fn with_default_mode(mut self, mode: Mode) -> Result<Self, PlayError> {
        if mode.needs_policy() && self.policy.is_none() {
            return Err(PlayError::PolicyRequired(mode.name()));
        }
        self.default_mode = mode;
        Ok(self)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: Option<Mode>,
    pub frogs: Option<usize>,
    #[serde(default = "default_cars")]
    pub cars: usize,
    #[serde(default = "default_speeds")]
    pub speeds: Vec<u8>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    pub seed: Option<u64>,
    /// Checkpoint path overriding the server's policy for this session.
    pub checkpoint: Option<PathBuf>,
}

fn default_cars() -> usize {
    2
}

fn default_speeds() -> Vec<u8> {
    vec![1, 2]
}

fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetRequest {
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRequest {
    pub frog: String,
    pub action: Action,
}

#[derive(Debug, Deserialize)]
pub struct HintQuery {
    pub frog: Option<String>,
}

/// Random seeds stay below 2^53 so browsers read them back exactly.
fn fresh_seed() -> u64 {
    rand::random::<u64>() >> 11
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, PlayError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, PlayError> {
    serde_json::from_slice(body).map_err(|e| PlayError::BadRequest(format!("bad request body: {e}")))
}

fn frog(id: &str) -> Result<usize, PlayError> {
    frog_index(id).ok_or_else(|| PlayError::BadRequest(format!("unknown frog {id:?}; expected A or B")))
}

/// Runs `f` with the session locked. The lock is never held across an await.
fn with_session<T>(
    app: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> Result<T, PlayError>,
) -> Result<Json<T>, PlayError> {
    let s = app.store.get(id)?;
    let mut s = s.lock().map_err(|_| PlayError::Internal("session lock poisoned".into()))?;
    f(&mut s).map(Json)
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, PlayError> {
    let req: CreateSession = parse_required(&body)?;
    let frogs = req.frogs.unwrap_or(2);
    let mut config = EnvConfig::new(frogs, req.cars, &req.speeds);
    config.max_steps = req.max_steps;
    let policy = match req.checkpoint {
        Some(path) => Some(Arc::new(
            tokio::task::spawn_blocking(move || AgentPolicy::load(&path))
                .await
                .map_err(|e| PlayError::Internal(e.to_string()))??,
        )),
        None => app.policy.clone(),
    };
    let mode = req.mode.unwrap_or(app.default_mode);
    let session = Session::new(mode, config, req.seed.unwrap_or_else(fresh_seed), policy)?;
    let state = session.state();
    tracing::info!(session = %state.session_id, mode = mode.name(), "session created");
    app.store.insert(session);
    let body = SessionCreated {
        schema_version: SCHEMA_VERSION,
        session_id: state.session_id.clone(),
        state,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<StateMessage>, PlayError> {
    with_session(&app, &id, |s| Ok(s.state()))
}

async fn reset_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<StateMessage>, PlayError> {
    let req: ResetRequest = parse(&body)?;
    with_session(&app, &id, |s| Ok(s.reset(req.seed.unwrap_or_else(fresh_seed))))
}

async fn submit_action(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, PlayError> {
    let req: ActionRequest = parse_required(&body)?;
    let f = frog(&req.frog)?;
    Ok(with_session(&app, &id, |s| s.submit(f, req.action))?.into_response())
}

async fn step_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, PlayError> {
    Ok(with_session(&app, &id, |s| s.advance())?.into_response())
}

async fn hint(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HintQuery>,
) -> Result<Response, PlayError> {
    let f = frog(q.frog.as_deref().unwrap_or("B"))?;
    Ok(with_session(&app, &id, |s| s.hint(f))?.into_response())
}

fn state_event(state: &StateMessage) -> Event {
    Event::default()
        .event("state")
        .json_data(state)
        .unwrap_or_else(|_| Event::default().event("error"))
}

/// Live channel: the current state first, then one event per tick or reset.
async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, PlayError> {
    let s = app.store.get(&id)?;
    let (first, rx) = {
        let s = s.lock().map_err(|_| PlayError::Internal("session lock poisoned".into()))?;
        (s.state(), s.events.subscribe())
    };
    // a lagging client skips to newer states rather than erroring
    let updates = BroadcastStream::new(rx).filter_map(|m| async move { m.ok().map(|m| Ok(state_event(&m))) });
    let stream = stream::once(async move { Ok(state_event(&first)) }).chain(updates);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn schema() -> Json<serde_json::Value> {
    Json(state_schema())
}

async fn health(State(app): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "sessions": app.store.len(),
        "policy_loaded": app.policy.is_some(),
    }))
}

pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/schema", get(schema))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/reset", post(reset_session))
        .route("/api/sessions/{id}/actions", post(submit_action))
        .route("/api/sessions/{id}/step", post(step_session))
        .route("/api/sessions/{id}/hint", get(hint))
        .route("/api/sessions/{id}/events", get(events))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub idle_timeout: Duration,
    pub default_mode: Mode,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            static_dir: None,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            default_mode: Mode::Hotseat,
        }
    }
}

/// Binds and serves until the process is stopped. Idle sessions are swept
/// once a minute, or more often for short timeouts.
pub async fn serve(policy: Option<AgentPolicy>, options: ServeOptions) -> Result<(), ServeError> {
    let app = AppState::new(policy, options.idle_timeout).with_default_mode(options.default_mode)?;
    let listener = TcpListener::bind(options.addr).await.map_err(|e| ServeError::Bind(options.addr, e))?;
    tracing::info!(addr = %options.addr, "play service listening");
    serve_on(listener, app, options.static_dir).await.map_err(ServeError::Io)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Play(#[from] PlayError),
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error(transparent)]
    Io(std::io::Error),
}

pub async fn serve_on(listener: TcpListener, app: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let store = app.store.clone();
    let sweep = (store.idle_timeout / 4).clamp(Duration::from_millis(50), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut every = tokio::time::interval(sweep);
        loop {
            every.tick().await;
            let dropped = store.expire(Instant::now());
            if dropped > 0 {
                tracing::info!(dropped, "expired idle sessions");
            }
        }
    });
    axum::serve(listener, router(app, static_dir)).await
}
