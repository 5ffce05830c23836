//! JSON-over-HTTP access to a [`SessionState`]. Reads share the state;
//! edits and tags take the write lock and flush the journal before
//! answering.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use lfcbm_core::edit::{EditError, EditRecord, EditRequest, ErrorTag, ImpactReport, Intervention};
use lfcbm_core::explain::{ExplanationView, WeightGraph};
use lfcbm_core::session::{ConceptActivation, InputSummary, ModelSummary, SessionError, SessionState, Split};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

pub type Shared = Arc<RwLock<SessionState>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::InputOutOfRange { .. } | SessionError::Edit(EditError::UnknownId(_)) => StatusCode::NOT_FOUND,
            SessionError::Edit(EditError::AlreadyReverted(_)) => StatusCode::CONFLICT,
            SessionError::Pipeline(_) | SessionError::Edit(EditError::Io(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self {
            status: r.status(),
            message: r.body_text(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: r.status(),
            message: r.body_text(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Serialize)]
pub struct ModelResponse {
    #[serde(rename = "M")]
    pub m: usize,
    pub d_z: usize,
    #[serde(flatten)]
    pub summary: ModelSummary,
}

#[derive(Debug, Deserialize)]
pub struct InputsQuery {
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub status: Status,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    All,
    Wrong,
    Correct,
}

#[derive(Debug, Deserialize)]
pub struct InputQuery {
    #[serde(default)]
    pub split: Split,
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct GraphQuery {
    /// Comma-separated class names or indices; empty means all classes.
    #[serde(default)]
    pub classes: String,
    #[serde(default = "default_min")]
    pub min: f64,
}

fn default_min() -> f64 {
    0.05
}

#[derive(Debug, Deserialize)]
pub struct Override {
    pub concept: usize,
    pub value: f64,
}

#[derive(Debug, Deserialize)]
pub struct InterveneBody {
    #[serde(default)]
    pub split: Split,
    pub input: usize,
    #[serde(default)]
    pub overrides: Vec<Override>,
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    #[serde(default)]
    pub split: Split,
    pub input: usize,
    pub gt: usize,
    pub pred: usize,
    pub concept: usize,
    #[serde(default = "default_b", alias = "b")]
    pub margin: f64,
}

fn default_b() -> f64 {
    lfcbm_core::edit::DEFAULT_MARGIN
}

#[derive(Debug, Deserialize)]
pub struct TagBody {
    pub input: usize,
    #[serde(rename = "type")]
    pub error_type: u8,
    #[serde(default)]
    pub note: String,
}

/// Resolves class names or indices against `names`.
pub fn parse_classes(text: &str, names: &[String]) -> Result<Vec<usize>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            names
                .iter()
                .position(|n| n == s)
                .or_else(|| s.parse().ok().filter(|&i: &usize| i < names.len()))
                .ok_or_else(|| format!("unknown class {s:?}"))
        })
        .collect()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/model", get(model))
        .route("/inputs", get(inputs))
        .route("/inputs/{i}/explanation", get(explanation))
        .route("/inputs/{i}/activations/top", get(top_activations))
        .route("/weights/graph", get(graph))
        .route("/intervene", post(intervene))
        .route("/edits", post(apply_edit).get(list_edits))
        .route("/edits/{id}", delete(revert_edit))
        .route("/edits/{id}/impact", post(impact))
        .route("/tags", post(tag).get(list_tags))
        .with_state(state)
}

async fn model(State(s): State<Shared>) -> Json<ModelResponse> {
    let s = s.read().await;
    let summary = s.summary();
    Json(ModelResponse {
        m: summary.concepts,
        d_z: summary.classes.len(),
        summary,
    })
}

async fn inputs(State(s): State<Shared>, q: Result<Query<InputsQuery>, QueryRejection>) -> ApiResult<Vec<InputSummary>> {
    let Query(q) = q?;
    let all = s.read().await.inputs(q.split);
    Ok(Json(
        all.into_iter()
            .filter(|i| match q.status {
                Status::All => true,
                Status::Wrong => !i.correct,
                Status::Correct => i.correct,
            })
            .collect(),
    ))
}

async fn explanation(
    State(s): State<Shared>,
    Path(i): Path<usize>,
    q: Result<Query<InputQuery>, QueryRejection>,
) -> ApiResult<ExplanationView> {
    let Query(q) = q?;
    Ok(Json(s.read().await.explanation(q.split, i, q.k.unwrap_or(10))?))
}

async fn top_activations(
    State(s): State<Shared>,
    Path(i): Path<usize>,
    q: Result<Query<InputQuery>, QueryRejection>,
) -> ApiResult<Vec<ConceptActivation>> {
    let Query(q) = q?;
    Ok(Json(s.read().await.top_activations(q.split, i, q.k.unwrap_or(5))?))
}

async fn graph(State(s): State<Shared>, q: Result<Query<GraphQuery>, QueryRejection>) -> ApiResult<WeightGraph> {
    let Query(q) = q?;
    let s = s.read().await;
    let names = &s.edits.working().class_names;
    let mut classes = parse_classes(&q.classes, names).map_err(ApiError::bad_request)?;
    if classes.is_empty() {
        classes = (0..names.len()).collect();
    }
    Ok(Json(s.weight_graph(&classes, q.min)?))
}

async fn intervene(State(s): State<Shared>, b: Result<Json<InterveneBody>, JsonRejection>) -> ApiResult<Intervention> {
    let Json(b) = b?;
    let overrides: Vec<(usize, f64)> = b.overrides.iter().map(|o| (o.concept, o.value)).collect();
    Ok(Json(s.read().await.intervene(b.split, b.input, &overrides)?))
}

async fn apply_edit(State(s): State<Shared>, b: Result<Json<EditBody>, JsonRejection>) -> Result<(StatusCode, Json<EditRecord>), ApiError> {
    let Json(b) = b?;
    let mut s = s.write().await;
    let req = EditRequest {
        gt: b.gt,
        pred: b.pred,
        concept: b.concept,
        margin: b.margin,
        input: Some(b.input),
    };
    let rec = s.apply_edit(b.split, &req)?;
    s.persist()?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_edits(State(s): State<Shared>) -> Json<Vec<EditRecord>> {
    Json(s.read().await.edits.records().to_vec())
}

async fn revert_edit(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult<EditRecord> {
    let mut s = s.write().await;
    let rec = s.revert_edit(id)?;
    s.persist()?;
    Ok(Json(rec))
}

async fn impact(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult<ImpactReport> {
    let mut s = s.write().await;
    let report = s.impact(id)?;
    s.persist()?;
    Ok(Json(report))
}

async fn tag(State(s): State<Shared>, b: Result<Json<TagBody>, JsonRejection>) -> Result<(StatusCode, Json<ErrorTag>), ApiError> {
    let Json(b) = b?;
    let mut s = s.write().await;
    let count = s.labels(Split::Val).len();
    if b.input >= count {
        return Err(SessionError::InputOutOfRange {
            split: Split::Val,
            index: b.input,
            count,
        }
        .into());
    }
    let t = s.tag(b.input, b.error_type, &b.note)?;
    s.persist()?;
    Ok((StatusCode::CREATED, Json(t)))
}

async fn list_tags(State(s): State<Shared>) -> Json<Vec<ErrorTag>> {
    Json(s.read().await.edits.tags().to_vec())
}

/// Serves until `shutdown` resolves, then flushes the journal.
pub async fn serve(
    state: SessionState,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let shared: Shared = Arc::new(RwLock::new(state));
    axum::serve(listener, router(shared.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    shared.read().await.persist()?;
    Ok(())
}
