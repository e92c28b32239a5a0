//! HTTP front end of the [`Engine`].
//!
//! Every handler parses its own body so malformed input gets the uniform
//! `{"error", "detail"}` 400 response rather than the framework default.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::engine::{
    AttemptStatus, ChallengeStatus, Clock, Engine, EngineConfig, EngineError, SystemClock,
};
use crate::mfa::{ChallengeKind, OutboxLog};
use crate::session::{self, LoginSession, SessionContext};
use crate::store::{ProfileStore, StoreError};

pub const DEFAULT_PORT: u16 = 8807;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub store_path: PathBuf,
    pub outbox_path: PathBuf,
    pub engine: EngineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            store_path: "keydyn-store.json".into(),
            outbox_path: "outbox.log".into(),
            engine: EngineConfig::default(),
        }
    }
}

type AppState = Arc<Engine>;

fn error(status: StatusCode, code: &str, detail: impl ToString) -> Response {
    (
        status,
        Json(json!({ "error": code, "detail": detail.to_string() })),
    )
        .into_response()
}

fn denied(reason: &str) -> Response {
    (
        StatusCode::FORBIDDEN,
        Json(json!({ "outcome": "denied", "reason": reason })),
    )
        .into_response()
}

impl IntoResponse for EngineError {
    fn into_response(self) -> Response {
        match &self {
            EngineError::Session(e) => error(StatusCode::BAD_REQUEST, "malformed_session", e),
            EngineError::UnknownUser => denied("unknown_user"),
            EngineError::BadCredentials => denied("bad_credentials"),
            EngineError::NotTrained { .. } => error(StatusCode::CONFLICT, "not_trained", &self),
            EngineError::DuplicateUser(_) => error(StatusCode::CONFLICT, "duplicate_user", &self),
            EngineError::Enrollment(e) => {
                error(StatusCode::UNPROCESSABLE_ENTITY, enrollment_code(e), e)
            }
            EngineError::UnknownChallenge(_) => {
                error(StatusCode::NOT_FOUND, "unknown_challenge", &self)
            }
            EngineError::ChallengeClosed => error(StatusCode::CONFLICT, "challenge_closed", &self),
            EngineError::WrongChallengeKind(_) => {
                error(StatusCode::BAD_REQUEST, "wrong_challenge_kind", &self)
            }
            EngineError::Internal(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &self),
        }
    }
}

fn enrollment_code(e: &StoreError) -> &'static str {
    match e {
        StoreError::InsufficientTraining { .. } => "insufficient_training",
        StoreError::RejectedSession { .. } => "rejected_session",
        _ => "enrollment_failed",
    }
}

// Response is large, but it is the handler's return type anyway.
#[allow(clippy::result_large_err)]
fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "malformed", e))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
}

#[derive(Deserialize)]
struct UsernameBody {
    username: String,
}

async fn login_username(State(engine): State<AppState>, body: Bytes) -> Response {
    match parse_body::<UsernameBody>(&body) {
        Ok(b) => Json(json!({ "exists": engine.username_exists(&b.username) })).into_response(),
        Err(r) => r,
    }
}

#[derive(Deserialize, Default)]
struct ExplainQuery {
    #[serde(default)]
    explain: bool,
}

async fn login_attempt(
    State(engine): State<AppState>,
    Query(q): Query<ExplainQuery>,
    body: Bytes,
) -> Response {
    let session = match session::parse_session(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_session", e),
    };
    let result = match blocking(move || engine.attempt(&session)).await {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let r = match result {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let degree = r.assessment.as_ref().map(|a| a.degree);
    let mut body = json!({ "attempt_id": r.attempt_id, "risk": degree });
    if q.explain {
        body["explain"] = serde_json::to_value(&r.assessment).unwrap_or(Value::Null);
    }
    match (r.status, r.challenge) {
        (AttemptStatus::Challenge, Some(c)) => {
            body["outcome"] = json!("challenge");
            body["challenge"] = json!({ "id": c.id, "kind": c.kind, "expires_at": c.expires_at });
            (StatusCode::ACCEPTED, Json(body)).into_response()
        }
        _ => {
            body["outcome"] = json!("granted");
            (StatusCode::OK, Json(body)).into_response()
        }
    }
}

#[derive(Deserialize)]
struct OtpBody {
    code: String,
}

#[derive(Deserialize)]
struct OobBody {
    token: String,
}

async fn resolve(engine: AppState, id: String, kind: ChallengeKind, secret: String) -> Response {
    let result = match blocking(move || engine.resolve_challenge(&id, kind, &secret)).await {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match result {
        Ok(r) => match r.status {
            ChallengeStatus::Granted => Json(json!({ "outcome": "granted" })).into_response(),
            ChallengeStatus::Denied => denied(r.reason.unwrap_or("failed")),
            ChallengeStatus::Retry => (
                StatusCode::FORBIDDEN,
                Json(json!({ "outcome": "retry", "reason": r.reason, "attempts_left": r.attempts_left })),
            )
                .into_response(),
        },
        Err(e) => e.into_response(),
    }
}

async fn challenge_otp(
    State(engine): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    match parse_body::<OtpBody>(&body) {
        Ok(b) => resolve(engine, id, ChallengeKind::Otp, b.code).await,
        Err(r) => r,
    }
}

async fn challenge_oob(
    State(engine): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    match parse_body::<OobBody>(&body) {
        Ok(b) => resolve(engine, id, ChallengeKind::Oob, b.token).await,
        Err(r) => r,
    }
}

/// The approval link delivered out of band.
async fn challenge_oob_link(
    State(engine): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<std::collections::HashMap<String, String>>,
) -> Response {
    match q.get("token") {
        Some(token) => resolve(engine, id, ChallengeKind::Oob, token.clone()).await,
        None => error(StatusCode::BAD_REQUEST, "malformed", "missing token"),
    }
}

#[derive(Deserialize)]
struct EnrollBody {
    username: String,
    password: String,
    sessions: Vec<LoginSession>,
    #[serde(default)]
    context: Option<SessionContext>,
}

async fn enroll(State(engine): State<AppState>, body: Bytes) -> Response {
    let b = match parse_body::<EnrollBody>(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    for (index, s) in b.sessions.iter().enumerate() {
        if let Err(e) = s.validate() {
            let e = StoreError::RejectedSession {
                index,
                reason: e.to_string(),
            };
            return error(StatusCode::UNPROCESSABLE_ENTITY, "rejected_session", e);
        }
    }
    let result =
        blocking(move || engine.enroll(&b.username, &b.password, &b.sessions, b.context)).await;
    match result {
        Ok(Ok(trained)) => {
            (StatusCode::CREATED, Json(json!({ "trained": trained }))).into_response()
        }
        Ok(Err(e)) => e.into_response(),
        Err(resp) => resp,
    }
}

fn admin_error(e: EngineError) -> Response {
    match e {
        EngineError::UnknownUser => error(StatusCode::NOT_FOUND, "unknown_user", "no such user"),
        other => other.into_response(),
    }
}

async fn admin_profile(State(engine): State<AppState>, Path(user): Path<String>) -> Response {
    match engine.profile_summary(&user) {
        Ok(s) => Json(s).into_response(),
        Err(e) => admin_error(e),
    }
}

async fn admin_clusters(State(engine): State<AppState>, Path(user): Path<String>) -> Response {
    match blocking(move || engine.cluster_export(&user)).await {
        Ok(Ok(x)) => Json(x).into_response(),
        Ok(Err(e)) => admin_error(e),
        Err(resp) => resp,
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/login/username", post(login_username))
        .route("/v1/login/attempt", post(login_attempt))
        .route("/v1/challenge/{id}/otp", post(challenge_otp))
        .route(
            "/v1/challenge/{id}/oob",
            post(challenge_oob).get(challenge_oob_link),
        )
        .route("/v1/enroll", post(enroll))
        .route("/v1/admin/users/{user}/profile", get(admin_profile))
        .route("/v1/admin/users/{user}/clusters", get(admin_clusters))
        .with_state(engine)
}

/// Loads the store and builds an engine that persists to it and delivers
/// challenges to the outbox file.
pub fn engine_from_config(
    config: &ServiceConfig,
    clock: Arc<dyn Clock>,
) -> Result<Engine, StoreError> {
    let store = ProfileStore::load(&config.store_path)?;
    let notifier = Arc::new(OutboxLog::new(&config.outbox_path));
    Ok(Engine::new(store, config.engine.clone(), notifier, clock)
        .with_store_path(&config.store_path))
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let engine = Arc::new(engine_from_config(&config, Arc::new(SystemClock))?);
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// A server on its own thread and runtime, stopped on drop. Lets blocking
/// clients run on the calling thread.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `127.0.0.1:port` (0 picks a free port) and starts serving.
    pub fn start(engine: Arc<Engine>, port: u16) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind(("127.0.0.1", port)))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, router(engine))
                    .with_graceful_shutdown(shutdown)
                    .await
                {
                    tracing::error!("server stopped: {e}");
                }
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
