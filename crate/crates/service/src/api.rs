//! HTTP routes.
//!
//! Every failure is answered with `{"error": "...", "field": "..."}` and a 4xx
//! status; only storage faults produce a 5xx.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use makeup_core::backend::describe_backends;
use makeup_core::config::{spec_schema, targetable_regions};
use makeup_core::regions::{RegionMapping, DERIVED_REGIONS, KNOWN_REGIONS};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::jobs::{CancelError, JobEvent, Service, SubmitError};
use crate::prepare::Rejection;
use crate::store::{JobInputs, JobRecord};

pub fn router(svc: Arc<Service>) -> Router {
    let limit = svc.config.max_body_bytes;
    Router::new()
        .route("/api/jobs", get(list_jobs).post(submit))
        .route("/api/jobs/{id}", get(status).delete(cancel))
        .route("/api/jobs/{id}/result", get(result))
        .route("/api/jobs/{id}/events", get(events))
        .route("/api/jobs/{id}/artifacts/{name}", get(artifact))
        .route("/api/backends", get(backends))
        .route("/api/regions", get(regions))
        .route("/api/schema", get(schema))
        .fallback(|| async { error(StatusCode::NOT_FOUND, None, "no such endpoint") })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(svc)
}

fn error(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn rejection(r: Rejection) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::BAD_REQUEST);
    (status, Json(r)).into_response()
}

fn client_status(status: StatusCode) -> StatusCode {
    if status.is_client_error() {
        status
    } else {
        StatusCode::BAD_REQUEST
    }
}

const TEXT_FIELDS: &[&str] = &["spec", "mapping", "fixture", "reference_fixture", "backend", "debug"];
const FILE_FIELDS: &[&str] = &["image", "labels", "reference", "reference_labels"];

async fn read_inputs(mut mp: Multipart) -> Result<JobInputs, Response> {
    let mut inputs = JobInputs::default();
    let mut seen: Vec<String> = Vec::new();
    let mut spec = None;
    let mut image = None;
    loop {
        let field = match mp.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(error(client_status(e.status()), None, e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        if !TEXT_FIELDS.contains(&name.as_str()) && !FILE_FIELDS.contains(&name.as_str()) {
            return Err(error(StatusCode::BAD_REQUEST, Some(&name), "unknown form field"));
        }
        if seen.contains(&name) {
            return Err(error(StatusCode::BAD_REQUEST, Some(&name), "form field given twice"));
        }
        seen.push(name.clone());
        let bytes = match field.bytes().await {
            Ok(b) => b.to_vec(),
            Err(e) => return Err(error(client_status(e.status()), Some(&name), e.body_text())),
        };
        if FILE_FIELDS.contains(&name.as_str()) {
            match name.as_str() {
                "image" => image = Some(bytes),
                "labels" => inputs.labels = Some(bytes),
                "reference" => inputs.reference = Some(bytes),
                _ => inputs.reference_labels = Some(bytes),
            }
            continue;
        }
        let Ok(text) = String::from_utf8(bytes) else {
            return Err(error(StatusCode::BAD_REQUEST, Some(&name), "must be UTF-8 text"));
        };
        match name.as_str() {
            "spec" => spec = Some(text),
            "mapping" => inputs.mapping = Some(text),
            "fixture" => inputs.fixture = Some(text.trim().to_string()),
            "reference_fixture" => inputs.reference_fixture = Some(text.trim().to_string()),
            "backend" => inputs.backend = Some(text.trim().to_string()),
            _ => {
                inputs.debug = match text.trim() {
                    "1" | "true" | "yes" => true,
                    "0" | "false" | "no" | "" => false,
                    _ => return Err(error(StatusCode::BAD_REQUEST, Some("debug"), "expected true or false")),
                }
            }
        }
    }
    inputs.image = image.ok_or_else(|| error(StatusCode::BAD_REQUEST, Some("image"), "missing source image"))?;
    inputs.spec = spec.ok_or_else(|| error(StatusCode::BAD_REQUEST, Some("spec"), "missing spec document"))?;
    Ok(inputs)
}

async fn submit(State(svc): State<Arc<Service>>, mp: Result<Multipart, MultipartRejection>) -> Response {
    let mp = match mp {
        Ok(m) => m,
        Err(e) => return error(client_status(e.status()), None, e.body_text()),
    };
    let inputs = match read_inputs(mp).await {
        Ok(i) => i,
        Err(resp) => return resp,
    };
    let outcome = tokio::task::spawn_blocking(move || svc.submit(inputs)).await;
    match outcome {
        Ok(Ok(id)) => {
            let url = format!("/api/jobs/{id}");
            (
                StatusCode::ACCEPTED,
                [(header::LOCATION, url.clone())],
                Json(json!({ "id": id, "status_url": url })),
            )
                .into_response()
        }
        Ok(Err(SubmitError::Rejected(r))) => rejection(r),
        Ok(Err(SubmitError::Store(e))) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, None, "submission handler crashed"),
    }
}

fn status_document(rec: &JobRecord) -> Value {
    let mut doc = serde_json::to_value(rec).unwrap_or_else(|_| json!({}));
    if rec.result.is_some() {
        doc["result_url"] = json!(format!("/api/jobs/{}/result", rec.id));
    }
    doc
}

async fn list_jobs(State(svc): State<Arc<Service>>) -> Response {
    let jobs: Vec<Value> = svc
        .store
        .list()
        .iter()
        .map(|r| json!({ "id": r.id, "state": r.state, "progress": r.progress, "created_ms": r.created_ms }))
        .collect();
    Json(json!({ "jobs": jobs })).into_response()
}

async fn status(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match svc.store.get(&id) {
        Some(rec) => Json(status_document(&rec)).into_response(),
        None => error(StatusCode::NOT_FOUND, None, format!("unknown job {id}")),
    }
}

async fn cancel(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match svc.cancel(&id) {
        Ok(rec) => (StatusCode::ACCEPTED, Json(status_document(&rec))).into_response(),
        Err(CancelError::NotFound) => error(StatusCode::NOT_FOUND, None, format!("unknown job {id}")),
        Err(CancelError::AlreadyFinished(state)) => error(
            StatusCode::CONFLICT,
            None,
            format!("job already finished ({})", json!(state).as_str().unwrap_or("")),
        ),
        Err(CancelError::Store(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn result(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    let Some(rec) = svc.store.get(&id) else {
        return error(StatusCode::NOT_FOUND, None, format!("unknown job {id}"));
    };
    let Some(name) = rec.result else {
        let state = json!(rec.state);
        return error(
            StatusCode::CONFLICT,
            None,
            format!("job is {}, no result yet", state.as_str().unwrap_or("unfinished")),
        );
    };
    match svc.store.read_blob(&id, &name) {
        Ok(bytes) => png(bytes),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
    }
}

async fn artifact(State(svc): State<Arc<Service>>, Path((id, name)): Path<(String, String)>) -> Response {
    let Some(rec) = svc.store.get(&id) else {
        return error(StatusCode::NOT_FOUND, None, format!("unknown job {id}"));
    };
    if !rec.artifacts.contains(&name) {
        return error(StatusCode::NOT_FOUND, None, format!("job {id} has no artifact {name}"));
    }
    match svc.store.read_blob(&id, &name) {
        Ok(bytes) => png(bytes),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
    }
}

fn sse_event(ev: &JobEvent) -> Event {
    let name = if ev.state.is_terminal() {
        json!(ev.state).as_str().unwrap_or("done").to_string()
    } else {
        "progress".to_string()
    };
    Event::default()
        .event(name)
        .data(serde_json::to_string(ev).unwrap_or_else(|_| "{}".into()))
}

struct EventCursor {
    first: Option<JobEvent>,
    rx: Option<broadcast::Receiver<JobEvent>>,
}

fn event_stream(first: JobEvent, rx: Option<broadcast::Receiver<JobEvent>>) -> impl Stream<Item = Result<Event, Infallible>> {
    let cursor = EventCursor { first: Some(first), rx };
    stream::unfold(cursor, |mut c| async move {
        if let Some(ev) = c.first.take() {
            if ev.state.is_terminal() {
                c.rx = None;
            }
            return Some((Ok(sse_event(&ev)), c));
        }
        let rx = c.rx.as_mut()?;
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    if ev.state.is_terminal() {
                        c.rx = None;
                    }
                    return Some((Ok(sse_event(&ev)), c));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn events(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match svc.subscribe(&id) {
        Some((rec, rx)) => Sse::new(event_stream(JobEvent::snapshot(&rec), rx))
            .keep_alive(KeepAlive::default())
            .into_response(),
        None => error(StatusCode::NOT_FOUND, None, format!("unknown job {id}")),
    }
}

async fn backends(State(svc): State<Arc<Service>>) -> Response {
    Json(json!({
        "default": svc.config.default_backend,
        "backends": describe_backends(svc.pool.settings()),
    }))
    .into_response()
}

async fn regions() -> Response {
    Json(json!({
        "targetable": targetable_regions(),
        "known": KNOWN_REGIONS,
        "derived": DERIVED_REGIONS,
        "default_mapping": RegionMapping::default().to_text(),
    }))
    .into_response()
}

async fn schema() -> Response {
    Json(json!({
        "spec": spec_schema(),
        "responses": response_schemas(),
    }))
    .into_response()
}

/// JSON Schemas of the response bodies, keyed by endpoint.
pub fn response_schemas() -> Value {
    let state = json!({"enum": ["queued", "running", "done", "failed", "cancelled"]});
    json!({
        "error": {
            "type": "object",
            "properties": {"error": {"type": "string"}, "field": {"type": "string"}},
            "required": ["error"]
        },
        "submit": {
            "type": "object",
            "properties": {"id": {"type": "string"}, "status_url": {"type": "string"}},
            "required": ["id", "status_url"]
        },
        "status": {
            "type": "object",
            "properties": {
                "id": {"type": "string"},
                "state": state,
                "backend": {"type": "string"},
                "spec": {"type": "object"},
                "created_ms": {"type": "integer"},
                "started_ms": {"type": ["integer", "null"]},
                "finished_ms": {"type": ["integer", "null"]},
                "progress": {"type": "number", "minimum": 0, "maximum": 1},
                "stage": {"type": ["string", "null"]},
                "error": {"type": ["object", "null"]},
                "result": {"type": ["string", "null"]},
                "result_url": {"type": "string"},
                "artifacts": {"type": "array", "items": {"type": "string"}}
            },
            "required": ["id", "state", "backend", "created_ms", "progress"]
        },
        "event": {
            "type": "object",
            "properties": {
                "state": state,
                "stage": {"type": "string"},
                "fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "step": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "error": {"type": "string"}
            },
            "required": ["state", "fraction"]
        }
    })
}
