//! HTTP interface.
//!
//! Report endpoints answer with the JSON serialization of the library value,
//! or with the library's TSV export when called with `?format=tsv`. Errors
//! are `{"error": <code>, "message": <text>}` with a matching status.

use std::collections::BTreeSet;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use wba_core::analytics::ConsistencyQuery;
use wba_core::capture::{CaptureBatch, SyncError};
use wba_core::mapping::{CoverageFilter, MappingError, SourceKind};
use wba_core::registry::RegistryDocument;
use wba_core::report::{barcode_tsv, calibration_tsv, consistency_tsv, plan_tsv, portfolio_tsv, ConsistencyRow, PortfolioRow};
use wba_core::{Registry, RegistryError};

use crate::state::{
    AnalyticsParams, ExamRequest, PlanRequest, PortfolioParams, QuestionResultRequest, Service, ServiceError,
    SyncStatus, VerifyRequest,
};

pub type Shared = Arc<RwLock<Service>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Tsv,
}

#[derive(Debug, Default, Deserialize)]
struct FormatParam {
    #[serde(default)]
    format: Format,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

/// Error response carrying a machine-readable code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: code.to_owned(),
                message: message.into(),
            },
        }
    }
}

/// HTTP status for a service error.
pub fn status_of(err: &ServiceError) -> StatusCode {
    match err {
        ServiceError::NoRegistry | ServiceError::RegistryConflict(_) => StatusCode::CONFLICT,
        ServiceError::Registry(RegistryError::Parse(_)) => StatusCode::BAD_REQUEST,
        ServiceError::Registry(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Sync(e) | ServiceError::Import { source: e, .. } => match e {
            SyncError::Malformed(_) => StatusCode::BAD_REQUEST,
            SyncError::DuplicateSession { .. } | SyncError::BatchConflict(_) | SyncError::DuplicateObservation(_) => {
                StatusCode::CONFLICT
            }
            SyncError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        },
        ServiceError::Mapping(MappingError::UnknownQuestion(_)) => StatusCode::NOT_FOUND,
        ServiceError::Mapping(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Query(_) | ServiceError::Scheduler(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
        ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
        ServiceError::Log(_) | ServiceError::Replay { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<ServiceError> for ApiError {
    fn from(err: ServiceError) -> Self {
        ApiError::new(status_of(&err), err.code(), err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, json_body(&self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn json_body<T: Serialize>(value: &T) -> ([(header::HeaderName, &'static str); 1], Vec<u8>) {
    (
        [(header::CONTENT_TYPE, "application/json")],
        serde_json::to_vec(value).expect("responses serialize"),
    )
}

fn json<T: Serialize>(value: &T) -> ApiResult {
    Ok(json_body(value).into_response())
}

fn json_status<T: Serialize>(status: StatusCode, value: &T) -> ApiResult {
    Ok((status, json_body(value)).into_response())
}

fn text(content_type: &'static str, body: String) -> ApiResult {
    Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
}

fn tsv(body: String) -> ApiResult {
    text("text/tab-separated-values", body)
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "bad-request", message)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| bad_request(e.to_string()))
}

fn read(s: &Shared) -> RwLockReadGuard<'_, Service> {
    s.read().unwrap_or_else(|e| e.into_inner())
}

fn write(s: &Shared) -> RwLockWriteGuard<'_, Service> {
    s.write().unwrap_or_else(|e| e.into_inner())
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/status", get(status))
        .route("/registry", get(get_registry).post(post_registry))
        .route("/sync", post(sync))
        .route("/students/{id}/consistency", get(consistency))
        .route("/students/{id}/barcode", get(barcode))
        .route("/students/{id}/portfolio", get(portfolio))
        .route("/staff/{id}/calibration", get(staff_calibration))
        .route("/calibration", get(calibration))
        .route("/coverage", get(coverage))
        .route("/exams/generate", post(generate_exam))
        .route("/exams/verify", post(verify_exam))
        .route("/plans", get(list_plans).post(create_plan))
        .route("/plans/{id}", get(get_plan))
        .route("/sessions", get(sessions))
        .route("/sessions/{id}", get(session))
        .route("/observations/{id}", get(observation))
        .route("/questions/{id}/results", post(question_result))
        .route("/questions/{id}/performance", get(question_performance))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such endpoint") })
        .with_state(service)
}

async fn health(State(s): State<Shared>) -> ApiResult {
    #[derive(Serialize)]
    struct Health {
        status: &'static str,
        seq: u64,
    }
    json(&Health {
        status: "ok",
        seq: read(&s).seq(),
    })
}

async fn status(State(s): State<Shared>) -> ApiResult {
    json(&read(&s).status())
}

async fn get_registry(State(s): State<Shared>) -> ApiResult {
    let svc = read(&s);
    match svc.engine().registry_text() {
        Some(t) => text("application/toml", t.to_owned()),
        None => Err(ServiceError::NoRegistry.into()),
    }
}

/// Accepts the TOML document, or the same document as JSON.
async fn post_registry(State(s): State<Shared>, headers: HeaderMap, body: String) -> ApiResult {
    let document = if is_json(&headers) {
        let doc: RegistryDocument = parse_json(&body)?;
        Registry::from_document(doc).map_err(ServiceError::from)?.to_toml()
    } else {
        body
    };
    let counts = write(&s).load_registry(&document)?;
    json(&counts)
}

/// Parses a JSON array of batches, a single batch, or JSON Lines.
pub fn parse_batches(body: &str) -> Result<Vec<CaptureBatch>, SyncError> {
    if body.trim_start().starts_with('[') {
        return serde_json::from_str(body).map_err(|e| SyncError::Malformed(e.to_string()));
    }
    CaptureBatch::parse_many(body)
}

#[derive(Serialize)]
struct SyncResponse {
    results: Vec<crate::state::SyncResult>,
}

async fn sync(State(s): State<Shared>, body: String) -> ApiResult {
    let batches = parse_batches(&body).map_err(ServiceError::from)?;
    let results = write(&s).sync(&batches)?;
    let rejected = results.iter().any(|r| matches!(r.outcome, SyncStatus::Rejected { .. }));
    let status = if rejected {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::OK
    };
    json_status(status, &SyncResponse { results })
}

#[derive(Debug, Default, Deserialize)]
struct StudentQuery {
    scope: Option<String>,
    threshold: Option<u8>,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
    last: Option<usize>,
    #[serde(default)]
    format: Format,
}

impl StudentQuery {
    fn params(&self) -> AnalyticsParams {
        AnalyticsParams {
            scope: self.scope.clone(),
            threshold: self.threshold,
            from: self.from,
            to: self.to,
            last: self.last,
        }
    }
}

fn query_err(e: axum::extract::rejection::QueryRejection) -> ApiError {
    bad_request(e.body_text())
}

async fn consistency(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<StudentQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let svc = read(&s);
    let params = q.params();
    let value = svc.engine().consistency(&id, &params)?;
    match q.format {
        Format::Json => json(&value),
        Format::Tsv => {
            let ConsistencyQuery {
                student_id,
                scope,
                threshold,
                ..
            } = params.query(wba_core::StudentId::new(&id).map_err(|e| bad_request(e.to_string()))?)?;
            tsv(consistency_tsv(&[ConsistencyRow {
                student_id,
                scope,
                threshold,
                consistency: value,
            }]))
        }
    }
}

async fn barcode(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<StudentQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let value = read(&s).engine().barcode(&id, &q.params())?;
    match q.format {
        Format::Json => json(&value),
        Format::Tsv => tsv(barcode_tsv(&value)),
    }
}

#[derive(Debug, Default, Deserialize)]
struct PortfolioQuery {
    min_experience: Option<u32>,
    sufficiency: Option<f64>,
    threshold: Option<u8>,
    #[serde(default)]
    format: Format,
}

async fn portfolio(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<PortfolioQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let params = PortfolioParams {
        min_experience: q.min_experience,
        sufficiency: q.sufficiency,
        threshold: q.threshold,
    };
    let entries = read(&s).engine().portfolio(&id, &params)?;
    match q.format {
        Format::Json => json(&entries),
        Format::Tsv => {
            let student_id = wba_core::StudentId::new(&id).map_err(|e| bad_request(e.to_string()))?;
            let rows: Vec<PortfolioRow> = entries
                .into_iter()
                .map(|entry| PortfolioRow {
                    student_id: student_id.clone(),
                    entry,
                })
                .collect();
            tsv(portfolio_tsv(&rows))
        }
    }
}

async fn staff_calibration(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<FormatParam>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let row = read(&s).engine().staff_calibration(&id)?;
    match q.format {
        Format::Json => json(&row),
        Format::Tsv => tsv(calibration_tsv(std::slice::from_ref(&row))),
    }
}

async fn calibration(
    State(s): State<Shared>,
    q: Result<Query<FormatParam>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let rows = read(&s).engine().calibration()?;
    match q.format {
        Format::Json => json(&rows),
        Format::Tsv => tsv(calibration_tsv(&rows)),
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct CoverageQuery {
    /// Comma-separated source kinds; all kinds when absent.
    pub kinds: Option<String>,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    #[serde(default)]
    pub format: Format,
}

impl CoverageQuery {
    pub fn filter(&self) -> Result<CoverageFilter, ServiceError> {
        let kinds = match &self.kinds {
            None => None,
            Some(list) => Some(
                list.split(',')
                    .filter(|k| !k.is_empty())
                    .map(|k| k.trim().parse::<SourceKind>().map_err(|e| ServiceError::BadRequest(e.to_string())))
                    .collect::<Result<BTreeSet<_>, _>>()?,
            ),
        };
        Ok(CoverageFilter {
            kinds,
            from: self.from,
            to: self.to,
        })
    }
}

async fn coverage(
    State(s): State<Shared>,
    q: Result<Query<CoverageQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let report = read(&s).engine().coverage(&q.filter()?)?;
    match q.format {
        Format::Json => json(&report),
        Format::Tsv => tsv(report.to_tsv()),
    }
}

async fn generate_exam(State(s): State<Shared>, body: String) -> ApiResult {
    let request: ExamRequest = parse_json(&body)?;
    json(&read(&s).engine().generate_exam(&request)?)
}

async fn verify_exam(State(s): State<Shared>, body: String) -> ApiResult {
    let request: VerifyRequest = parse_json(&body)?;
    json(&read(&s).engine().verify_exam(&request)?)
}

async fn create_plan(State(s): State<Shared>, body: String) -> ApiResult {
    let request: PlanRequest = if body.trim().is_empty() {
        PlanRequest::default()
    } else {
        parse_json(&body)?
    };
    let stored = write(&s).create_plan(request)?;
    json_status(StatusCode::CREATED, &stored)
}

async fn list_plans(State(s): State<Shared>) -> ApiResult {
    let svc = read(&s);
    let ids: Vec<&str> = svc.engine().plans().map(|p| p.plan_id.as_str()).collect();
    json(&ids)
}

async fn get_plan(
    State(s): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<FormatParam>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let Query(q) = q.map_err(query_err)?;
    let svc = read(&s);
    let stored = svc.engine().plan(&id)?;
    match q.format {
        Format::Json => json(stored),
        Format::Tsv => tsv(plan_tsv(&stored.plan)),
    }
}

async fn sessions(State(s): State<Shared>) -> ApiResult {
    json(&read(&s).engine().sessions())
}

async fn session(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let svc = read(&s);
    json(svc.engine().session(&id)?)
}

async fn observation(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let svc = read(&s);
    json(svc.engine().observation(&id)?)
}

async fn question_result(State(s): State<Shared>, Path(id): Path<String>, body: String) -> ApiResult {
    let request: QuestionResultRequest = parse_json(&body)?;
    json(&write(&s).record_result(&id, &request)?)
}

async fn question_performance(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    json(&read(&s).engine().question_performance(&id)?)
}
