//! JSON HTTP API over a [`Service`].
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/api/cases` | PatientCase | `{case_id}` |
//! | GET | `/api/cases` | | `[case_id]` |
//! | GET | `/api/cases/{id}` | | CaseView |
//! | POST | `/api/cases/{id}/predict` | `{variant?, k?}` | PrognosisResult |
//! | POST | `/api/cases/{id}/whatif` | `{overrides, variant?, k?}` | `{baseline, modified, delta}` |
//! | GET | `/api/corpus/search` | `q, k?, category?` | `[EvidencePassage]` |
//! | POST | `/api/evaluate` | `{cohort_ref, variants?}` | AblationReport |
//! | GET | `/api/schema` | | indicator schema |
//! | GET | `/api/health` | | `{status, index_count, backends}` |
//!
//! `cohort_ref` is a cohort directory path or `synthetic:<seed>:<n>`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::eval::{evaluate, generate_synthetic_cohort, load_cohort, AblationVariant, Cohort, EvalError};
use crate::model::{indicator_schema, IndicatorKey, PatientCase, Value};
use crate::pipeline::{PipelineError, PredictOptions, Service, Stage};
use crate::retrieval::{CorpusCategory, DEFAULT_K};

#[derive(Debug)]
pub enum ApiError {
    Pipeline(PipelineError),
    Eval(EvalError),
    BadRequest(String),
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::Pipeline(e)
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        ApiError::Eval(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ApiError::Pipeline(PipelineError::NotFound(id)) => {
                (StatusCode::NOT_FOUND, json!({ "error": format!("unknown case \"{id}\"") }))
            }
            ApiError::Pipeline(e @ PipelineError::Validation { findings, .. }) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": e.to_string(), "findings": findings }))
            }
            ApiError::Pipeline(e @ PipelineError::Stage { stage, case_id, .. }) => {
                let status = match stage {
                    Stage::Generate | Stage::Score | Stage::Embed => StatusCode::BAD_GATEWAY,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, json!({ "error": e.to_string(), "stage": stage, "case_id": case_id }))
            }
            ApiError::Pipeline(e) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })),
            ApiError::Eval(e @ (EvalError::Cohort(_) | EvalError::CohortTooSmall { .. } | EvalError::Io { .. })) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": e.to_string() }))
            }
            ApiError::Eval(e) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Pipeline(PipelineError::Setup(format!("worker failed: {e}"))))?
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub variant: Option<AblationVariant>,
    #[serde(default)]
    pub k: Option<usize>,
}

impl PredictRequest {
    fn options(&self) -> PredictOptions {
        PredictOptions { variant: self.variant.unwrap_or_default(), k: self.k }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub overrides: BTreeMap<IndicatorKey, Value>,
    #[serde(default)]
    pub variant: Option<AblationVariant>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct SearchQuery {
    pub q: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub cohort_ref: String,
    #[serde(default)]
    pub variants: Option<Vec<AblationVariant>>,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    index_count: usize,
    backends: BTreeMap<&'static str, String>,
}

/// Resolves a cohort reference: a directory or `synthetic:<seed>:<n>`.
pub fn resolve_cohort(reference: &str) -> Result<Cohort, EvalError> {
    if let Some(rest) = reference.strip_prefix("synthetic:") {
        let (seed, n) = rest
            .split_once(':')
            .and_then(|(s, n)| Some((s.parse().ok()?, n.parse().ok()?)))
            .ok_or_else(|| EvalError::Cohort(format!("malformed synthetic cohort reference \"{reference}\"")))?;
        return generate_synthetic_cohort(seed, n);
    }
    load_cohort(reference)
}

async fn create_case(State(svc): State<Arc<Service>>, Json(case): Json<PatientCase>) -> Result<Response, ApiError> {
    let id = blocking(move || Ok(svc.ingest_case(&case)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "case_id": id }))).into_response())
}

async fn list_cases(State(svc): State<Arc<Service>>) -> ApiResult<Vec<String>> {
    Ok(Json(blocking(move || Ok(svc.store().list()?)).await?))
}

async fn get_case(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<crate::pipeline::CaseView> {
    Ok(Json(blocking(move || Ok(svc.case_view(&id)?)).await?))
}

async fn predict(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Option<Json<PredictRequest>>,
) -> ApiResult<crate::model::PrognosisResult> {
    let opts = body.map(|Json(b)| b.options()).unwrap_or_default();
    Ok(Json(blocking(move || Ok(svc.predict(&id, opts)?)).await?))
}

async fn what_if(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<WhatIfRequest>,
) -> ApiResult<crate::pipeline::WhatIf> {
    let opts = PredictOptions { variant: req.variant.unwrap_or_default(), k: req.k };
    Ok(Json(blocking(move || Ok(svc.what_if(&id, &req.overrides, opts)?)).await?))
}

async fn search(
    State(svc): State<Arc<Service>>,
    Query(q): Query<SearchQuery>,
) -> ApiResult<Vec<crate::retrieval::EvidencePassage>> {
    if q.q.trim().is_empty() {
        return Err(ApiError::BadRequest("q must be non-empty".into()));
    }
    let filter = match q.category.as_deref().filter(|c| !c.is_empty()) {
        Some(c) => Some(vec![c.parse::<CorpusCategory>().map_err(ApiError::BadRequest)?]),
        None => None,
    };
    let k = q.k.unwrap_or(DEFAULT_K);
    Ok(Json(blocking(move || Ok(svc.engine().search_text(&q.q, k, filter.as_deref())?)).await?))
}

async fn run_evaluation(
    State(svc): State<Arc<Service>>,
    Json(req): Json<EvaluateRequest>,
) -> ApiResult<crate::eval::AblationReport> {
    let variants = req.variants.unwrap_or_else(|| AblationVariant::ALL.to_vec());
    if variants.is_empty() {
        return Err(ApiError::BadRequest("variants must be non-empty".into()));
    }
    Ok(Json(
        blocking(move || {
            let cohort = resolve_cohort(&req.cohort_ref)?;
            Ok(evaluate(&cohort, &variants, svc.engine())?)
        })
        .await?,
    ))
}

async fn schema() -> Json<Vec<crate::model::SchemaEntry>> {
    Json(indicator_schema())
}

async fn health(State(svc): State<Arc<Service>>) -> Json<Health> {
    let engine = svc.engine();
    Json(Health { status: "ok", index_count: engine.index().len(), backends: engine.backend_names() })
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/cases", post(create_case).get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/predict", post(predict))
        .route("/api/cases/{id}/whatif", post(what_if))
        .route("/api/corpus/search", get(search))
        .route("/api/evaluate", post(run_evaluation))
        .route("/api/schema", get(schema))
        .route("/api/health", get(health))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service)).await
}
