//! HTTP API. JSON bodies throughout; the caller is named by the `X-Stratus-User`
//! header.
//!
//! | method | path                              | body / result                     |
//! |--------|-----------------------------------|-----------------------------------|
//! | POST   | /v1/jobs                          | RunRequest -> Submission          |
//! | GET    | /v1/jobs?workspace=W              | [JobSummary]                      |
//! | GET    | /v1/jobs/{id}                     | JobView                           |
//! | POST   | /v1/jobs/{id}/cancel              | JobView                           |
//! | GET    | /v1/jobs/{id}/logs                | text/plain                        |
//! | GET    | /v1/jobs/{id}/record              | ProvenanceRecord                  |
//! | GET    | /v1/jobs/{id}/events?after=N      | text/event-stream of StatusEvent  |
//! | GET    | /v1/templates                     | [TemplateVersion]                 |
//! | POST   | /v1/templates?workspace=W         | WorkflowTemplate -> TemplateVersion |
//! | GET    | /v1/templates/{name}              | latest WorkflowTemplate           |
//! | GET    | /v1/templates/{name}/{version}    | WorkflowTemplate                  |
//! | GET    | /v1/catalog                       | CatalogSnapshot                   |
//! | GET    | /v1/budgets                       | [Budget]                          |
//! | GET    | /v1/budgets/{id}                  | Budget                            |
//! | GET    | /v1/health                        | {"status":"ok"}                   |
//!
//! The event stream resumes after the `Last-Event-ID` header (or `after`
//! query parameter) when a client reconnects; each event's SSE id is its
//! sequence number. Errors are `{"error": kind, "message": text}`.

use std::convert::Infallible;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use stratus_core::workflow::WorkflowTemplate;

use crate::cli::{RunRequest, DEFAULT_WORKSPACE};
use crate::service::{Gateway, GatewayError};

pub const USER_HEADER: &str = "x-stratus-user";

pub struct ApiError(GatewayError);

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(kind: &str) -> StatusCode {
    match kind {
        "unauthenticated" => StatusCode::UNAUTHORIZED,
        "permission_denied" => StatusCode::FORBIDDEN,
        "budget_exhausted" => StatusCode::PAYMENT_REQUIRED,
        "no_feasible_instance" | "invalid_plan" | "invalid_request" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        "not_found" => StatusCode::NOT_FOUND,
        "conflict" => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_body(kind: &str, message: String) -> Response {
    (
        status_for(kind),
        Json(json!({ "error": kind, "message": message })),
    )
        .into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error_body(self.0.kind(), self.0.to_string())
    }
}

fn principal(headers: &HeaderMap) -> Result<String, Box<Response>> {
    headers
        .get(USER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| {
            Box::new(error_body(
                "unauthenticated",
                format!("missing {USER_HEADER} header"),
            ))
        })
}

macro_rules! user {
    ($headers:expr) => {
        match principal(&$headers) {
            Ok(p) => p,
            Err(resp) => return *resp,
        }
    };
}

pub fn router(gateway: Gateway) -> Router {
    Router::new()
        .route(
            "/v1/health",
            get(|| async { Json(json!({ "status": "ok" })) }),
        )
        .route("/v1/jobs", post(create_job).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/cancel", post(cancel_job))
        .route("/v1/jobs/{id}/logs", get(job_logs))
        .route("/v1/jobs/{id}/record", get(job_record))
        .route("/v1/jobs/{id}/events", get(job_events))
        .route("/v1/templates", get(list_templates).post(register_template))
        .route(
            "/v1/templates/{name}",
            get(latest_template).delete(delete_template),
        )
        .route("/v1/templates/{name}/{version}", get(template_version))
        .route("/v1/catalog", get(catalog))
        .route("/v1/budgets", get(list_budgets))
        .route("/v1/budgets/{id}", get(get_budget))
        .with_state(gateway)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gateway: Gateway,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(shutdown)
        .await
}

fn respond<T: serde::Serialize>(r: Result<T, GatewayError>) -> Response {
    match r {
        Ok(v) => Json(v).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn create_job(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Json(req): Json<RunRequest>,
) -> Response {
    let user = user!(headers);
    if req.run_command.is_some() == req.template_ref.is_some() {
        return error_body(
            "invalid_request",
            "exactly one of run_command and template_ref is required".into(),
        );
    }
    match gw.submit(&req, &user) {
        Ok(s @ crate::service::Submission::Queued { .. }) => {
            (StatusCode::CREATED, Json(s)).into_response()
        }
        other => respond(other),
    }
}

#[derive(Deserialize)]
struct WorkspaceQuery {
    workspace: Option<String>,
}

async fn list_jobs(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Query(q): Query<WorkspaceQuery>,
) -> Response {
    let user = user!(headers);
    Json(gw.jobs(&user, q.workspace.as_deref())).into_response()
}

async fn get_job(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let user = user!(headers);
    respond(gw.job(&id, &user))
}

async fn cancel_job(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let user = user!(headers);
    respond(gw.cancel(&id, &user))
}

async fn job_logs(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let user = user!(headers);
    match gw.logs(&id, &user) {
        Ok(text) => text.into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn job_record(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let user = user!(headers);
    respond(gw.record(&id, &user))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

async fn job_events(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Response {
    let user = user!(headers);
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.trim().parse::<u64>().ok())
        .or(q.after);
    match gw.status_stream(&id, &user, resume) {
        Ok(stream) => sse(stream).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

fn sse(
    stream: impl Stream<Item = crate::service::StatusEvent> + Send + 'static,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(stream.map(|ev| {
        Ok(Event::default()
            .id(ev.seq.to_string())
            .event("status")
            .json_data(&ev)
            .expect("status events serialize"))
    }))
    .keep_alive(KeepAlive::default())
}

async fn list_templates(State(gw): State<Gateway>) -> Response {
    Json(gw.templates()).into_response()
}

async fn register_template(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Query(q): Query<WorkspaceQuery>,
    Json(t): Json<WorkflowTemplate>,
) -> Response {
    let user = user!(headers);
    let ws = q.workspace.unwrap_or_else(|| DEFAULT_WORKSPACE.to_string());
    match gw.register_template(t, &user, &ws) {
        Ok(v) => (StatusCode::CREATED, Json(v)).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn latest_template(State(gw): State<Gateway>, Path(name): Path<String>) -> Response {
    respond(gw.template(&name, None).map(|t| (*t).clone()))
}

async fn template_version(
    State(gw): State<Gateway>,
    Path((name, version)): Path<(String, u32)>,
) -> Response {
    respond(gw.template(&name, Some(version)).map(|t| (*t).clone()))
}

async fn delete_template() -> Response {
    (
        StatusCode::METHOD_NOT_ALLOWED,
        Json(json!({
            "error": "immutable",
            "message": "template versions are append-only; register a new version instead"
        })),
    )
        .into_response()
}

async fn catalog(State(gw): State<Gateway>) -> Response {
    Json(gw.catalog().clone()).into_response()
}

async fn list_budgets(State(gw): State<Gateway>, headers: HeaderMap) -> Response {
    let user = user!(headers);
    Json(gw.budgets(&user)).into_response()
}

async fn get_budget(
    State(gw): State<Gateway>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let user = user!(headers);
    respond(gw.budget(&id, &user))
}
