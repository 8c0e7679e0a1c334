//! HTTP surface consumed by the annotator client and operators.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ethicrowd_core::aggregate::{AggregationConfig, TieRule};
use ethicrowd_core::corpus::Prompt;
use ethicrowd_core::export::{export_dataset, ExportConfig};
use ethicrowd_core::sessioning::BatchConfig;
use ethicrowd_core::trust::TrustPolicy;
use ethicrowd_core::votes::DEFAULT_TRAILING_RUN;
use ethicrowd_core::{Error, NextPrompt, Reaction, Store};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub operator_token: String,
    /// Prefix for every route, e.g. `/annotate`; empty for none.
    pub base_path: String,
    pub idle_timeout: Duration,
    pub sweep_interval: Duration,
    pub batch: BatchConfig,
    pub aggregation: AggregationConfig,
    pub trust: TrustPolicy,
    pub trailing_run_length: usize,
    pub export_salt: Vec<u8>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            operator_token: String::new(),
            base_path: String::new(),
            idle_timeout: Duration::from_secs(24 * 3600),
            sweep_interval: Duration::from_secs(60),
            batch: BatchConfig::default(),
            aggregation: AggregationConfig::default(),
            trust: TrustPolicy::default(),
            trailing_run_length: DEFAULT_TRAILING_RUN,
            export_salt: Vec::new(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub config: Arc<ApiConfig>,
}

/// Error body `{code, message}` with a status derived from the code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn unauthorized() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            "operator token required",
        )
    }
}

pub fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::UnknownSession(_) | Error::UnknownPrompt(_) | Error::UnknownUser(_) => {
            StatusCode::NOT_FOUND
        }
        Error::DuplicateVote { .. }
        | Error::OutOfOrderVote { .. }
        | Error::SessionNotActive(_)
        | Error::GoldConflict(_)
        | Error::DuplicateIdConflict(_) => StatusCode::CONFLICT,
        Error::SchemaError { .. }
        | Error::InvalidConfig(_)
        | Error::EmptySalt
        | Error::ScoreOutOfRange(_)
        | Error::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
        Error::InsufficientCorpus { .. }
        | Error::InsufficientGold { .. }
        | Error::DegenerateDataset(_)
        | Error::MissingGroundTruth(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::ProviderUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::InvalidCheckpoint(_) | Error::Io(_) | Error::Json(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        Self::new(status_for(&err), err.code(), err.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "SchemaError", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"code": self.code, "message": self.message})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Prompt as shown to annotators; gold status is never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub prompt_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
}

impl From<Prompt> for PromptPayload {
    fn from(p: Prompt) -> Self {
        Self {
            prompt_id: p.prompt_id,
            image_ref: p.image_ref,
            question: p.question,
            answer: p.answer,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub user_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    pub session_id: String,
    pub end_of_session: bool,
    pub slot: Option<usize>,
    pub batch_size: usize,
    pub min_display_seconds: u64,
    pub prompt: Option<PromptPayload>,
}

#[derive(Debug, Deserialize)]
pub struct VoteRequest {
    pub prompt_id: String,
    pub reaction: Reaction,
}

#[derive(Debug, Default, Deserialize)]
pub struct AggregationQuery {
    pub tau: Option<f64>,
    pub min_votes: Option<usize>,
    pub tie_rule: Option<TieRule>,
}

impl AggregationQuery {
    fn apply(&self, base: &AggregationConfig) -> AggregationConfig {
        AggregationConfig {
            tau: self.tau.unwrap_or(base.tau),
            min_votes: self.min_votes.unwrap_or(base.min_votes),
            tie_rule: self.tie_rule.unwrap_or(base.tie_rule),
            ..*base
        }
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    pub include_set_aside: bool,
    #[serde(default)]
    pub include_discarded: bool,
    #[serde(default)]
    pub reveal_gold_labels: bool,
    pub include_votes: Option<bool>,
}

fn check_operator(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let token = &state.config.operator_token;
    let supplied = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match supplied {
        Some(s) if !token.is_empty() && constant_time_eq(s.as_bytes(), token.as_bytes()) => Ok(()),
        _ => Err(ApiError::unauthorized()),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn next_response(state: &AppState, session_id: &str) -> Result<NextResponse, Error> {
    let session = state.store.session(session_id)?;
    let next = state.store.next_prompt(session_id)?;
    let (slot, prompt) = match next {
        NextPrompt::Prompt { prompt, slot } => (Some(slot), Some(prompt.into())),
        NextPrompt::EndOfSession => (None, None),
    };
    Ok(NextResponse {
        session_id: session_id.to_string(),
        end_of_session: prompt.is_none(),
        slot,
        batch_size: session.batch_size(),
        min_display_seconds: state.config.batch.min_display_seconds,
        prompt,
    })
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<NextResponse>)> {
    let Json(req) = body?;
    if req.user_id.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "SchemaError",
            "user_id must not be empty",
        ));
    }
    let s = state.clone();
    let resp = blocking(move || {
        let batch = BatchConfig {
            rng_seed: None,
            ..s.config.batch.clone()
        };
        let session = s.store.assemble_batch(&req.user_id, &batch)?;
        next_response(&s, &session.session_id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn next_prompt(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<NextResponse>> {
    let s = state.clone();
    Ok(Json(blocking(move || next_response(&s, &id)).await?))
}

async fn record_vote(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<VoteRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Json(req) = body?;
    let store = state.store.clone();
    let outcome = blocking(move || store.record_vote(&id, &req.prompt_id, req.reaction)).await?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::to_value(outcome).unwrap()),
    ))
}

async fn finalize(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store.clone();
    let run = state.config.trailing_run_length;
    let report = blocking(move || store.finalize_session(&id, run)).await?;
    Ok(Json(serde_json::to_value(report).unwrap()))
}

async fn aggregate_prompt(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<AggregationQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    check_operator(&state, &headers)?;
    let config = q.apply(&state.config.aggregation);
    let label = state.store.aggregate_prompt(&id, &config)?;
    Ok(Json(serde_json::to_value(label).unwrap()))
}

async fn stats(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AggregationQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    check_operator(&state, &headers)?;
    let config = q.apply(&state.config.aggregation);
    let store = state.store.clone();
    let stats = blocking(move || store.distribution_stats(&config)).await?;
    Ok(Json(serde_json::to_value(stats).unwrap()))
}

async fn trust(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(user): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    check_operator(&state, &headers)?;
    let record = state.store.score_user(&user, &state.config.trust)?;
    Ok(Json(serde_json::to_value(record).unwrap()))
}

fn export_config(state: &AppState, q: &ExportQuery) -> ExportConfig {
    ExportConfig {
        salt: state.config.export_salt.clone(),
        include_set_aside: q.include_set_aside,
        include_discarded: q.include_discarded,
        reveal_gold_labels: q.reveal_gold_labels,
        include_votes: q.include_votes.unwrap_or(true),
        aggregation: state.config.aggregation,
        ..Default::default()
    }
}

async fn export(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    check_operator(&state, &headers)?;
    let config = export_config(&state, &q);
    let store = state.store.clone();
    let bytes =
        blocking(move || export_dataset(&store.snapshot(), &config)?.records_bytes()).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

async fn export_manifest(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    check_operator(&state, &headers)?;
    let config = export_config(&state, &q);
    let store = state.store.clone();
    let bytes =
        blocking(move || export_dataset(&store.snapshot(), &config)?.manifest_bytes()).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "prompts": state.store.corpus_stats().retained,
        "votes": state.store.vote_count(),
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/next", get(next_prompt))
        .route("/v1/sessions/{id}/votes", post(record_vote))
        .route("/v1/sessions/{id}/finalize", post(finalize))
        .route("/v1/prompts/{id}/aggregate", get(aggregate_prompt))
        .route("/v1/stats", get(stats))
        .route("/v1/trust/{user}", get(trust))
        .route("/v1/export", get(export))
        .route("/v1/export/manifest", get(export_manifest))
        .route("/v1/healthz", get(healthz))
        .fallback(not_found)
        .with_state(state.clone());
    let base = state.config.base_path.trim_end_matches('/');
    if base.is_empty() {
        api
    } else {
        Router::new().nest(base, api).fallback(not_found)
    }
}

/// Serves until `shutdown` resolves, sweeping idle sessions periodically,
/// then flushes the vote log.
pub async fn serve<F>(state: AppState, shutdown: F) -> anyhow::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let listener = tokio::net::TcpListener::bind(state.config.bind)
        .await
        .map_err(|e| anyhow::anyhow!("BindFailure: {}: {e}", state.config.bind))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let sweeper = {
        let store = state.store.clone();
        let run = state.config.trailing_run_length;
        let every = state.config.sweep_interval;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let store = store.clone();
                match tokio::task::spawn_blocking(move || store.expire_idle_sessions(run)).await {
                    Ok(Ok(reports)) if !reports.is_empty() => {
                        tracing::info!(count = reports.len(), "finalized idle sessions")
                    }
                    Ok(Err(e)) => tracing::warn!(error = %e, "idle sweep failed"),
                    _ => {}
                }
            }
        })
    };
    let result = axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    state.store.flush_log()?;
    tracing::info!("vote log flushed");
    result.map_err(Into::into)
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
