//! HTTP service: LTI launch, chat, ratings, admin report and health.

mod config;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router as HttpRouter};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{ConfigError, LmsConfig, SearchConfig, ServiceConfig, StoreConfig, ENV_ADMIN_TOKEN, ENV_LISTEN, ENV_LMS_TOKEN, ENV_SALT};

use crate::analytics::{
    pseudonymize, AnalyticsError, AnalyticsStore, AppendLogBackend, MemoryBackend, RatingReport, StoreBackend,
    TimeRange, UsageReport,
};
use crate::clock::{SharedClock, SystemClock};
use crate::dcci::{ContextRetriever, KbRegistry};
use crate::lms::{
    CoursePageRef, LaunchClaims, LaunchError, LaunchValidator, LmsBridge, LmsClient, LmsCredentials, MockLms,
    PageSource, PlatformSigner, Secret,
};
use crate::pipeline::{ChatPipeline, PipelineError};
use crate::router::{ProviderHealth, Router};
use crate::wizard::{FixtureBackend, HttpSearchBackend, SearchBackend};

#[derive(Debug, Clone)]
struct SessionBinding {
    session_id: String,
    user_pseudonym: String,
    display_name: String,
}

/// Shared state behind every handler.
pub struct AppState {
    pipeline: Arc<ChatPipeline>,
    validator: LaunchValidator,
    sessions: RwLock<HashMap<String, SessionBinding>>,
    admin_token: Secret,
    salt: Secret,
    course_id: String,
    ui_url: String,
    mock_lms: Option<Arc<MockLms>>,
    mock_signer: Option<PlatformSigner>,
}

impl AppState {
    pub fn pipeline(&self) -> &Arc<ChatPipeline> {
        &self.pipeline
    }

    pub fn store(&self) -> &Arc<AnalyticsStore> {
        self.pipeline.store()
    }

    pub fn router(&self) -> &Arc<Router> {
        self.pipeline.router()
    }

    pub fn clock(&self) -> &SharedClock {
        self.pipeline.clock()
    }

    /// The embedded mock platform, when running in mock mode.
    pub fn mock_lms(&self) -> Option<&Arc<MockLms>> {
        self.mock_lms.as_ref()
    }

    /// Signer of the embedded mock platform, when running in mock mode.
    pub fn mock_signer(&self) -> Option<&PlatformSigner> {
        self.mock_signer.as_ref()
    }

    fn now(&self) -> DateTime<Utc> {
        self.clock().now()
    }

    fn binding(&self, headers: &HeaderMap) -> Result<(String, SessionBinding), ApiError> {
        let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
        let sessions = self.sessions.read().expect("session table poisoned");
        let binding = sessions.get(token).cloned().ok_or_else(ApiError::unauthorized)?;
        Ok((token.to_string(), binding))
    }

    /// Returns an open session for the token, starting a fresh one if the
    /// previous session was closed by the idle sweep.
    fn active_session(&self, token: &str, binding: SessionBinding) -> Result<SessionBinding, ApiError> {
        let now = self.now();
        self.store().sweep_idle(now).map_err(ApiError::store)?;
        if self.store().session(&binding.session_id).is_some_and(|s| s.is_open()) {
            return Ok(binding);
        }
        let session_id = self.store().open_session(&binding.user_pseudonym, now).map_err(ApiError::store)?;
        let renewed = SessionBinding { session_id, ..binding };
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(token.to_string(), renewed.clone());
        Ok(renewed)
    }

    fn require_admin(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        match bearer(headers) {
            Some(t) if !self.admin_token.is_empty() && constant_time_eq(t, self.admin_token.expose()) => Ok(()),
            _ => Err(ApiError::unauthorized()),
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
}

fn constant_time_eq(a: &str, b: &str) -> bool {
    a.len() == b.len() && a.bytes().zip(b.bytes()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn new_session_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    turn_id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            turn_id: None,
        }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    fn store(e: AnalyticsError) -> Self {
        tracing::error!(error = %e, "store operation failed");
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(t) = self.turn_id {
            body["turn_id"] = Value::String(t);
        }
        (self.status, Json(body)).into_response()
    }
}

fn launch_error(e: LaunchError) -> ApiError {
    let code = match &e {
        LaunchError::BadSignature => "bad_signature",
        LaunchError::ReplayedNonce => "replayed_nonce",
        LaunchError::Expired => "expired",
        LaunchError::MissingClaim(_) => "missing_claim",
        LaunchError::Malformed(_) => "malformed",
    };
    let status = match e {
        LaunchError::MissingClaim(_) | LaunchError::Malformed(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::UNAUTHORIZED,
    };
    ApiError::new(status, code, e.to_string())
}

fn parse_json(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbSummary {
    pub kb_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub display_name: String,
    pub course_id: String,
    pub knowledge_bases: Vec<KbSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchResponse {
    pub session_token: String,
    pub redirect: String,
    pub bootstrap: Bootstrap,
}

async fn launch(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<LaunchResponse>, ApiError> {
    let body = parse_json(&body)?;
    let id_token = body
        .get("id_token")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "malformed", "id_token is required"))?;
    let now = state.now();
    let ctx = state.validator.validate(id_token, now).map_err(launch_error)?;
    if ctx.course_id != state.course_id {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "wrong_course", "launch is for a different course"));
    }
    let user_pseudonym = pseudonymize(&ctx.user_id, state.salt.expose())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "config", e.to_string()))?;
    let session_id = state.store().open_session(&user_pseudonym, now).map_err(ApiError::store)?;
    let token = new_session_token();
    state.sessions.write().expect("session table poisoned").insert(
        token.clone(),
        SessionBinding {
            session_id,
            user_pseudonym,
            display_name: ctx.display_name.clone(),
        },
    );
    Ok(Json(LaunchResponse {
        session_token: token,
        redirect: state.ui_url.clone(),
        bootstrap: Bootstrap {
            display_name: ctx.display_name,
            course_id: ctx.course_id,
            knowledge_bases: kb_summaries(state.pipeline.registry()),
        },
    }))
}

fn kb_summaries(registry: &KbRegistry) -> Vec<KbSummary> {
    registry
        .iter()
        .map(|kb| KbSummary {
            kb_id: kb.kb_id.clone(),
            display_name: kb.display_name.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub turn_id: String,
    pub response_text: String,
    pub kb_id: String,
    pub fallback_used: bool,
}

async fn chat(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<ChatResponse>, ApiError> {
    let (token, binding) = state.binding(&headers)?;
    let body = parse_json(&body)?;
    let kb_id = body
        .get("kb_id")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", "kb_id must be a string"))?;
    let query = body
        .get("query")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", "query must be a string"))?;
    if state.pipeline.registry().get(kb_id).is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_kb", format!("unknown knowledge base {kb_id}")));
    }
    if query.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_query", "query is empty"));
    }
    let binding = state.active_session(&token, binding)?;
    match state
        .pipeline
        .chat(&binding.session_id, kb_id, query, &binding.display_name)
        .await
    {
        Ok(reply) => Ok(Json(ChatResponse {
            turn_id: reply.turn_id,
            response_text: reply.response_text,
            kb_id: reply.kb_id,
            fallback_used: reply.fallback_used,
        })),
        Err(e) => Err(pipeline_error(e)),
    }
}

fn pipeline_error(e: PipelineError) -> ApiError {
    match e {
        PipelineError::UnknownKb(kb) => ApiError::new(StatusCode::NOT_FOUND, "unknown_kb", format!("unknown knowledge base {kb}")),
        PipelineError::EmptyQuery => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_query", "query is empty"),
        PipelineError::Providers { turn_id, error } => {
            tracing::warn!(%turn_id, %error, "no provider answered");
            ApiError {
                turn_id: Some(turn_id),
                ..ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "providers_unavailable", error.to_string())
            }
        }
        PipelineError::Source(e) => {
            tracing::warn!(error = %e, "course content unavailable");
            ApiError::new(StatusCode::BAD_GATEWAY, "content_unavailable", e.to_string())
        }
        PipelineError::Prompt(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "prompt", e.to_string()),
        PipelineError::Store(e) => ApiError::store(e),
    }
}

async fn rate(
    State(state): State<Arc<AppState>>,
    Path(turn_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let (_, binding) = state.binding(&headers)?;
    let body = parse_json(&body)?;
    let rating = body
        .get("rating")
        .and_then(Value::as_i64)
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_range", "rating must be an integer 1-5"))?;
    let turn = state
        .store()
        .turn(&turn_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_turn", format!("unknown turn {turn_id}")))?;
    let owner = state.store().session(&turn.session_id).map(|s| s.user_pseudonym);
    if owner.as_deref() != Some(binding.user_pseudonym.as_str()) {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "foreign_turn", "turn belongs to another user"));
    }
    match state.store().rate_turn(&turn_id, rating, state.now()) {
        Ok(()) => Ok(StatusCode::NO_CONTENT),
        Err(AnalyticsError::OutOfRange(r)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "out_of_range",
            format!("rating {r} is outside 1-5"),
        )),
        Err(AnalyticsError::UnknownTurn(t)) => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_turn", format!("unknown turn {t}"))),
        Err(e) => Err(ApiError::store(e)),
    }
}

/// Turns of the caller's current session, oldest first.
async fn transcript(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Response, ApiError> {
    let (_, binding) = state.binding(&headers)?;
    Ok(Json(state.store().session_turns(&binding.session_id)).into_response())
}

async fn close(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<StatusCode, ApiError> {
    let (token, binding) = state.binding(&headers)?;
    match state.store().close_session(&binding.session_id, state.now()) {
        Ok(()) | Err(AnalyticsError::AlreadyClosed(_)) => {}
        Err(e) => return Err(ApiError::store(e)),
    }
    state.sessions.write().expect("session table poisoned").remove(&token);
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
struct ReportQuery {
    /// `START/END` in RFC 3339; either side may be empty.
    range: Option<String>,
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
}

fn parse_range(q: &ReportQuery) -> Result<TimeRange, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_range", m);
    let mut range = TimeRange {
        start: q.start,
        end: q.end,
    };
    if let Some(r) = &q.range {
        let (s, e) = r.split_once('/').ok_or_else(|| bad(format!("{r:?} is not START/END")))?;
        let parse = |v: &str| -> Result<Option<DateTime<Utc>>, ApiError> {
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|e| bad(format!("{v:?}: {e}")))
            }
        };
        range = TimeRange {
            start: parse(s)?,
            end: parse(e)?,
        };
    }
    Ok(range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminReport {
    pub ratings: RatingReport,
    pub usage: UsageReport,
}

async fn admin_report(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ReportQuery>,
) -> Result<Json<AdminReport>, ApiError> {
    state.require_admin(&headers)?;
    let range = parse_range(&q)?;
    Ok(Json(AdminReport {
        ratings: state.store().rating_report_in(range),
        usage: state.store().usage_report(range),
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub degraded: bool,
    pub store: String,
    pub providers: Vec<ProviderHealth>,
}

async fn healthz(State(state): State<Arc<AppState>>) -> (StatusCode, Json<Health>) {
    let providers = state.router().health();
    let store_ok = state.store().is_available();
    let degraded = providers.iter().any(|p| !p.healthy);
    let status = if !store_ok {
        "unavailable"
    } else if degraded {
        "degraded"
    } else {
        "ok"
    };
    let code = if store_ok { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (
        code,
        Json(Health {
            status: status.into(),
            degraded,
            store: if store_ok { "ok" } else { "maintenance" }.into(),
            providers,
        }),
    )
}

/// Mock mode: mint a signed launch for manual testing (admin token).
async fn mock_launch(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    state.require_admin(&headers)?;
    let signer = state
        .mock_signer
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", "mock platform disabled"))?;
    let body = parse_json(&body)?;
    let field = |k: &str| body.get(k).and_then(Value::as_str).map(str::to_string);
    let user_id = field("user_id").ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", "user_id is required"))?;
    let name = field("name").unwrap_or_else(|| user_id.clone());
    let nonce = URL_SAFE_NO_PAD.encode(uuid::Uuid::new_v4().as_bytes());
    let claims = LaunchClaims::learner(&user_id, &name, &state.course_id, state.now(), &nonce);
    Ok(Json(json!({ "id_token": signer.sign(&claims) })).into_response())
}

/// Builds the service router around `state`; mock-platform routes are merged
/// in mock mode.
pub fn http_router(state: Arc<AppState>) -> HttpRouter {
    let mut app = HttpRouter::new()
        .route("/lti/launch", post(launch))
        .route("/chat", post(chat))
        .route("/turns", get(transcript))
        .route("/turns/{turn_id}/rating", post(rate))
        .route("/session/close", post(close))
        .route("/admin/report", get(admin_report))
        .route("/healthz", get(healthz))
        .route("/mock/launch", post(mock_launch))
        .with_state(state.clone());
    if let Some(mock) = &state.mock_lms {
        app = app.merge(mock.clone().router());
    }
    app
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(#[from] AnalyticsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub fn is_config(&self) -> bool {
        matches!(self, ServeError::Config(_))
    }
}

/// Assembles every component from a validated configuration.
pub fn build_state(config: &ServiceConfig, clock: SharedClock) -> Result<Arc<AppState>, ServeError> {
    config.validate()?;
    let registry = config.kb_registry()?;

    let (source, mock_lms, mock_signer): (Arc<dyn PageSource>, _, _) = if config.lms.mock {
        let mut mock = MockLms::new(clock.clone());
        let api_token = if config.lms.api_token.is_empty() { &config.admin_token } else { &config.lms.api_token };
        mock = mock.with_api_token(api_token.expose());
        let mock = Arc::new(mock);
        if let Some(dir) = &config.lms.mock_pages_dir {
            seed_mock_pages(&mock, &config.lms.course_id, dir)?;
        }
        let signer = match &config.lms.mock_platform_seed {
            Some(seed) => PlatformSigner::from_seed(config::parse_seed(seed).map_err(|m| ConfigError::new("lms.mock_platform_seed", m))?),
            None => PlatformSigner::generate(),
        };
        let bridge = Arc::new(LmsBridge::Mock(mock.clone()));
        (bridge as Arc<dyn PageSource>, Some(mock), Some(signer))
    } else {
        let creds = LmsCredentials::new(
            config.lms.base_url.clone().expect("validated"),
            config.lms.api_token.expose(),
        );
        let client = LmsClient::with_clock(creds, clock.clone());
        (Arc::new(LmsBridge::Remote(Arc::new(client))) as Arc<dyn PageSource>, None, None)
    };

    let validator = match (&config.lms.platform_public_key, &mock_signer) {
        (Some(key), _) => LaunchValidator::from_public_key_b64(key)
            .map_err(|e| ConfigError::new("lms.platform_public_key", e.to_string()))?,
        (None, Some(signer)) => LaunchValidator::new(signer.verifying_key()),
        (None, None) => return Err(ConfigError::new("lms.platform_public_key", "required").into()),
    };

    let search: Arc<dyn SearchBackend> = match (&config.search.endpoint, &config.search.fixtures) {
        (Some(url), _) => Arc::new(HttpSearchBackend::new(url.clone(), Duration::from_secs(config.search.timeout_secs))),
        (None, Some(path)) => Arc::new(FixtureBackend::load(path).map_err(|e| ConfigError::new("search.fixtures", e.to_string()))?),
        (None, None) => Arc::new(FixtureBackend::default()),
    };

    let router = Arc::new(Router::new(config.providers.clone(), clock.clone()).map_err(|e| ConfigError::new("providers", e.to_string()))?);

    let kbs: Vec<(String, String)> = registry.iter().map(|kb| (kb.kb_id.clone(), kb.display_name.clone())).collect();
    let backend: Box<dyn StoreBackend> = match &config.store.path {
        Some(path) => Box::new(AppendLogBackend::new(path)),
        None => Box::new(MemoryBackend),
    };
    let mut store = AnalyticsStore::open(backend, kbs)?
        .idle_timeout(chrono::Duration::minutes(config.session_timeout_minutes));
    if let Some(n) = config.store.compact_every {
        store = store.compact_every(n);
    }

    let mut pipeline = ChatPipeline::new(
        registry,
        ContextRetriever::new(source),
        search,
        router,
        Arc::new(store),
        clock,
    )
    .reserved_output(config.reserved_output_tokens);
    if let Some(k) = config.search.organic_k {
        pipeline = pipeline.organic_k(k);
    }

    Ok(Arc::new(AppState {
        pipeline: Arc::new(pipeline),
        validator,
        sessions: RwLock::new(HashMap::new()),
        admin_token: config.admin_token.clone(),
        salt: config.pseudonym_salt.clone(),
        course_id: config.lms.course_id.clone(),
        ui_url: config.ui_url.clone(),
        mock_lms,
        mock_signer,
    }))
}

fn seed_mock_pages(mock: &MockLms, course_id: &str, dir: &std::path::Path) -> Result<(), ConfigError> {
    let field = "lms.mock_pages_dir";
    let entries = std::fs::read_dir(dir).map_err(|e| ConfigError::new(field, format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| ConfigError::new(field, e.to_string()))?.path();
        let Some(slug) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if !path.is_file() {
            continue;
        }
        let body = std::fs::read_to_string(&path).map_err(|e| ConfigError::new(field, format!("{}: {e}", path.display())))?;
        let page = CoursePageRef::new(course_id, slug).map_err(|e| ConfigError::new(field, e.to_string()))?;
        mock.stub_update_page(&page, &body);
    }
    Ok(())
}

/// Runs the service until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let state = build_state(&config, Arc::new(SystemClock))?;
    let listener = tokio::net::TcpListener::bind(&config.listen_address).await?;
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "listening");

    let sweeper_state = state.clone();
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            if let Err(e) = sweeper_state.store().sweep_idle(sweeper_state.now()) {
                tracing::warn!(error = %e, "idle sweep failed");
            }
        }
    });
    let result = axum::serve(listener, http_router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result.map_err(ServeError::from)
}
