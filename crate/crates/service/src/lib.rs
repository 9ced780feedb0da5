//! JSON-over-HTTP query service for a loaded index.
//!
//! Endpoints:
//! - `GET /axes`: schema, item count, label fields and corpora
//! - `POST /query`: weighted retrieval by item id or explicit embedding
//! - `POST /flip-report`: preference-flip report over a query set
//!
//! The index lives behind an atomically swappable pointer; a request clones
//! the current `Arc` and finishes on it even if a reload happens meanwhile.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use faxis::embedding::StrictError;
use faxis::eval::{preference_flip_report, EvalOptions, QuerySet};
use faxis::{Error, Index, ItemFilter, PartitionedEmbedding, QueryOptions, QueryWeights};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 7878;
pub const PORT_ENV: &str = "FAXIS_PORT";
pub const MAX_K: usize = 1000;

/// Port from `FAXIS_PORT`, falling back to [`DEFAULT_PORT`].
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}={v} is not a valid port")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    index: Arc<RwLock<Option<Arc<Index>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_index(index: Index) -> Self {
        let s = Self::new();
        s.swap(index);
        s
    }

    /// Replaces the served index; in-flight requests keep the old one.
    pub fn swap(&self, index: Index) {
        *self.index.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(index));
    }

    pub fn current(&self) -> Option<Arc<Index>> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn require(&self) -> Result<Arc<Index>, ApiError> {
        self.current()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no index loaded"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn body(&self) -> &serde_json::Value {
        &self.body
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.body.get("error").and_then(|e| e.as_str()) {
            Some(msg) => write!(f, "{}: {msg}", self.status),
            None => write!(f, "{}", self.status),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownAxis { .. }
            | Error::MissingLabel { .. }
            | Error::ConfigInvalid(_)
            | Error::SchemaMismatch
            | Error::DimMismatch { .. }
            | Error::ZeroVector => StatusCode::BAD_REQUEST,
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::NormViolation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.to_string() });
        match &e {
            Error::UnknownAxis { axis, valid } => {
                body["axis"] = json!(axis);
                body["valid_axes"] = json!(valid);
            }
            Error::UnknownId(id) => body["id"] = json!(id),
            Error::MissingLabel { id, label } => {
                body["id"] = json!(id);
                body["label"] = json!(label);
            }
            _ => {}
        }
        Self { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AxisInfo {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AxesResponse {
    pub axes: Vec<AxisInfo>,
    pub items: usize,
    pub label_fields: Vec<String>,
    pub corpora: Vec<String>,
}

pub fn describe(index: &Index) -> AxesResponse {
    let mut labels = BTreeSet::new();
    let mut corpora = BTreeSet::new();
    for it in index.items() {
        labels.extend(it.labels.keys().cloned());
        corpora.insert(it.corpus.clone());
    }
    AxesResponse {
        axes: index
            .schema()
            .axes()
            .iter()
            .map(|a| AxisInfo {
                name: a.name.clone(),
                dim: a.dim,
            })
            .collect(),
        items: index.len(),
        label_fields: labels.into_iter().collect(),
        corpora: corpora.into_iter().collect(),
    }
}

async fn axes(State(state): State<AppState>) -> Result<Json<AxesResponse>, ApiError> {
    let index = state.require()?;
    Ok(Json(describe(&index)))
}

fn default_k() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub query_id: Option<String>,
    /// One unit vector per axis, keyed by axis name.
    #[serde(default)]
    pub query_embedding: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default)]
    pub weights: QueryWeights,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Only meaningful with `query_id`.
    #[serde(default = "default_true")]
    pub exclude_self: bool,
    #[serde(default)]
    pub filter: Option<ItemFilter>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub item_id: String,
    pub corpus: String,
    pub labels: BTreeMap<String, String>,
    pub score: f64,
    pub rank: usize,
    pub per_axis: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<ResultRow>,
    pub weights: QueryWeights,
    pub k: usize,
    pub candidates: usize,
    pub empty_after_filter: bool,
    pub timing_ms: f64,
}

fn query_embedding(index: &Index, parts: &BTreeMap<String, Vec<f64>>) -> Result<PartitionedEmbedding, ApiError> {
    let schema = index.schema();
    if let Some(extra) = parts.keys().find(|k| schema.position(k).is_none()) {
        return Err(schema.unknown_axis(extra).into());
    }
    let mut data = Vec::with_capacity(schema.total_dim());
    for axis in schema.axes() {
        let v = parts
            .get(&axis.name)
            .ok_or_else(|| ApiError::bad_request(format!("query_embedding lacks axis `{}`", axis.name)))?;
        if v.len() != axis.dim {
            return Err(ApiError::bad_request(format!(
                "query_embedding axis `{}` has {} values, expected {}",
                axis.name,
                v.len(),
                axis.dim
            )));
        }
        data.extend_from_slice(v);
    }
    PartitionedEmbedding::new_strict(schema.clone(), data).map_err(|e| match e {
        StrictError::NotUnit(axes) => {
            let mut err = ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("query_embedding slices are not unit-norm: {}", axes.join(", ")),
            );
            err.body["axes"] = json!(axes);
            err
        }
        StrictError::Invalid(e) => e.into(),
    })
}

/// Runs one query request against `index`; shared by the HTTP handler and
/// callers that want identical semantics without a server.
pub fn run_query(index: &Index, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
    let start = Instant::now();
    if !(1..=MAX_K).contains(&req.k) {
        return Err(ApiError::bad_request(format!("k must lie in [1, {MAX_K}], got {}", req.k)));
    }
    req.weights.resolve(index.schema())?;
    let mut opts = QueryOptions::default();
    if let Some(f) = &req.filter {
        opts = opts.with_filter(f.clone());
    }
    let q = match (&req.query_id, &req.query_embedding) {
        (Some(id), None) => {
            let item = index.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            if req.exclude_self {
                opts.exclude_ids.insert(id.clone());
            }
            item.embedding.clone()
        }
        (None, Some(parts)) => query_embedding(index, parts)?,
        _ => return Err(ApiError::bad_request("give exactly one of query_id and query_embedding")),
    };
    let out = index.query(&q, &req.weights, req.k, &opts)?;
    let results = out
        .results
        .into_iter()
        .map(|r| {
            let item = index.get(&r.item_id).expect("result comes from the index");
            ResultRow {
                corpus: item.corpus.clone(),
                labels: item.labels.clone(),
                item_id: r.item_id,
                score: r.score,
                rank: r.rank,
                per_axis: r.per_axis,
            }
        })
        .collect();
    Ok(QueryResponse {
        results,
        weights: req.weights.clone(),
        k: req.k,
        candidates: out.candidates,
        empty_after_filter: out.empty_after_filter,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let req: QueryRequest = parse_body(&body)?;
    let index = state.require()?;
    Ok(Json(run_query(&index, &req)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipRequest {
    /// Explicit query ids; takes precedence over `query_filter`.
    #[serde(default)]
    pub query_ids: Option<Vec<String>>,
    /// Items passing this filter become queries; all items without either.
    #[serde(default)]
    pub query_filter: Option<ItemFilter>,
    pub settings: Vec<QueryWeights>,
    #[serde(default = "default_true")]
    pub exclude_self: bool,
}

pub fn run_flip_report(index: &Index, req: &FlipRequest) -> Result<faxis::eval::EvalReport, ApiError> {
    if req.settings.is_empty() {
        return Err(ApiError::bad_request("settings must list at least one weight setting"));
    }
    for w in &req.settings {
        w.resolve(index.schema())?;
    }
    let qs = match &req.query_ids {
        Some(ids) => {
            let queries = ids
                .iter()
                .map(|id| index.get(id).cloned().ok_or_else(|| Error::UnknownId(id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            QuerySet::new(queries)?
        }
        None => QuerySet::from_index(index, req.query_filter.as_ref())?,
    };
    let opts = EvalOptions {
        exclude_self: req.exclude_self,
    };
    Ok(preference_flip_report(&qs, index, &req.settings, opts)?)
}

async fn flip_report(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: FlipRequest = parse_body(&body)?;
    let index = state.require()?;
    Ok(Json(run_flip_report(&index, &req)?).into_response())
}

/// API routes, plus static files from `ui_dir` for every other path.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/axes", get(axes))
        .route("/query", post(query))
        .route("/flip-report", post(flip_report))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
