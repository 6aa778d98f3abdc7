use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crfcheck_core::econ::report_to_csv;
use serde::Deserialize;

use crate::error::ApiError;
use crate::state::{
    AppState, CreateQueryRequest, CreateSessionRequest, DecisionRequest, FindingFilter, ImportRequest,
    ReviewerRequest, TransitionRequest,
};

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/datasets", get(list_datasets))
        .route("/datasets/import", post(import_dataset))
        .route("/patients/{id}/profile", get(patient_profile))
        .route("/findings", get(list_findings))
        .route("/findings/{id}", get(finding_detail))
        .route("/queries", get(list_queries).post(create_query))
        .route("/queries/{id}", get(query_detail))
        .route("/queries/{id}/transition", post(transition_query))
        .route("/queries/{id}/decision", post(transition_query))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_detail))
        .route("/sessions/{id}/decisions", post(record_decision))
        .route("/sessions/{id}/end", post(end_session))
        .route("/reports/eval", get(eval_report))
        .route("/reports/econ", get(econ_report))
        .route("/audit", get(audit_log))
        .route("/kb/grading_rules", get(grading_rules))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
struct DatasetParam {
    dataset: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct SubjectParam {
    subject: Option<String>,
}

/// Rejected JSON bodies come back in the common error shape.
struct Body<T>(T);

impl<S, T> axum::extract::FromRequest<S> for Body<T>
where
    Json<T>: axum::extract::FromRequest<S, Rejection = axum::extract::rejection::JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

async fn list_datasets(State(s): Shared) -> impl IntoResponse {
    Json(s.list_datasets())
}

async fn import_dataset(State(s): Shared, Body(req): Body<ImportRequest>) -> Result<Response, ApiError> {
    let summary = tokio::task::spawn_blocking(move || s.import(req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn patient_profile(
    State(s): Shared,
    Path(id): Path<String>,
    Query(q): Query<DatasetParam>,
) -> ApiResult<crate::state::PatientProfile> {
    s.profile(&id, q.dataset.as_deref()).map(Json)
}

async fn list_findings(State(s): Shared, Query(f): Query<FindingFilter>) -> ApiResult<crate::state::FindingList> {
    s.findings(&f).map(Json)
}

async fn finding_detail(
    State(s): Shared,
    Path(id): Path<String>,
    Query(q): Query<DatasetParam>,
) -> ApiResult<crate::state::FindingDetail> {
    s.finding_detail(&id, q.dataset.as_deref()).await.map(Json)
}

async fn list_queries(State(s): Shared) -> impl IntoResponse {
    Json(s.list_queries().await)
}

async fn create_query(State(s): Shared, Body(req): Body<CreateQueryRequest>) -> Result<Response, ApiError> {
    let q = s.create_query(req)?;
    Ok((StatusCode::CREATED, Json(q)).into_response())
}

async fn query_detail(State(s): Shared, Path(id): Path<String>) -> ApiResult<crate::state::QueryDetail> {
    s.query_detail(&id).await.map(Json)
}

async fn transition_query(
    State(s): Shared,
    Path(id): Path<String>,
    Body(req): Body<TransitionRequest>,
) -> ApiResult<crfcheck_core::query::ReviewQuery> {
    s.transition_query(&id, req).await.map(Json)
}

async fn list_sessions(State(s): Shared) -> impl IntoResponse {
    Json(s.list_sessions().await)
}

async fn create_session(State(s): Shared, Body(req): Body<CreateSessionRequest>) -> Result<Response, ApiError> {
    let v = s.create_session(req)?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn session_detail(State(s): Shared, Path(id): Path<String>) -> ApiResult<crate::state::SessionView> {
    s.session(&id).await.map(Json)
}

async fn record_decision(
    State(s): Shared,
    Path(id): Path<String>,
    Body(req): Body<DecisionRequest>,
) -> ApiResult<crate::state::SessionView> {
    s.record_decision(&id, req).await.map(Json)
}

async fn end_session(
    State(s): Shared,
    Path(id): Path<String>,
    Body(req): Body<ReviewerRequest>,
) -> ApiResult<crate::state::SessionView> {
    s.end_session(&id, req).await.map(Json)
}

async fn eval_report(State(s): Shared, Query(q): Query<DatasetParam>) -> ApiResult<crate::state::EvalReport> {
    s.eval_report(q.dataset.as_deref()).await.map(Json)
}

async fn econ_report(State(s): Shared, Query(mut q): Query<BTreeMap<String, String>>) -> Result<Response, ApiError> {
    let format = q.remove("format");
    let report = s.econ_report(&q)?;
    match format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("csv") => {
            let csv = report_to_csv(&report).map_err(|e| ApiError::internal(e.to_string()))?;
            Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
        }
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other}; use json or csv"))),
    }
}

async fn audit_log(State(s): Shared, Query(q): Query<SubjectParam>) -> impl IntoResponse {
    Json(s.audit_entries(q.subject.as_deref()))
}

async fn grading_rules(State(s): Shared) -> impl IntoResponse {
    Json(s.grading_rules())
}
