#![allow(dead_code)]

pub mod strategies;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use makeup_service::api::router;
use makeup_service::jobs::{Service, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const BOUNDARY: &str = "makeupboundary7d1f";

/// Builds a multipart/form-data body from `(name, bytes)` parts.
pub fn multipart(parts: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub struct Harness {
    pub svc: Arc<Service>,
    pub app: Router,
    pub dir: Option<tempfile::TempDir>,
}

impl Harness {
    pub fn new(tweak: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut h = Self::at(dir.path(), tweak);
        h.dir = Some(dir);
        h
    }

    /// A service over an existing store directory that the caller owns.
    pub fn at(path: &std::path::Path, tweak: impl FnOnce(&mut ServiceConfig)) -> Self {
        let mut config = ServiceConfig::new(path);
        config.workers = 1;
        tweak(&mut config);
        let svc = Service::start(config).unwrap();
        let app = router(svc.clone());
        Self { svc, app, dir: None }
    }

    pub async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let ctype = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes, ctype)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn get_json(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b, _) = self.get(uri).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn submit_raw(&self, body: Vec<u8>) -> (StatusCode, Value) {
        let req = Request::post("/api/jobs")
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(body))
            .unwrap();
        let (s, b, _) = self.send(req).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn submit(&self, parts: &[(&str, Vec<u8>)]) -> (StatusCode, Value) {
        self.submit_raw(multipart(parts)).await
    }

    /// Polls until the job reaches a terminal state.
    pub async fn wait(&self, id: &str, budget: Duration) -> Value {
        let start = Instant::now();
        loop {
            let (s, doc) = self.get_json(&format!("/api/jobs/{id}")).await;
            assert_eq!(s, StatusCode::OK);
            if matches!(doc["state"].as_str(), Some("done" | "failed" | "cancelled")) {
                return doc;
            }
            assert!(start.elapsed() < budget, "job {id} did not finish in {budget:?}: {doc}");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Reads the SSE stream of a job to its end; returns `(event, data)` pairs.
    pub async fn events(&self, id: &str) -> Vec<(String, Value)> {
        let resp = self
            .app
            .clone()
            .oneshot(Request::get(format!("/api/jobs/{id}/events")).body(Body::empty()).unwrap())
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let mut body = resp.into_body();
        let mut text = String::new();
        while let Some(frame) = body.frame().await {
            if let Ok(data) = frame.unwrap().into_data() {
                text.push_str(&String::from_utf8_lossy(&data));
            }
        }
        parse_sse(&text)
    }
}

pub fn parse_sse(text: &str) -> Vec<(String, Value)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data = serde_json::from_str(v.trim()).ok();
                }
            }
            Some((name?, data?))
        })
        .collect()
}

pub fn fixture_png(name: &str, size: usize) -> Vec<u8> {
    makeup_core::fixtures::fixture_sized(name, size)
        .unwrap()
        .image
        .encode_png()
        .unwrap()
}

pub fn fixture_labels(name: &str, size: usize) -> Vec<u8> {
    makeup_core::fixtures::fixture_sized(name, size)
        .unwrap()
        .labels
        .encode_png()
        .unwrap()
}

pub fn lip_spec(steps: usize) -> Vec<u8> {
    format!(
        r##"{{"color_targets":[{{"region":"lips","color":"#B03A4A","alpha":0.8}}],"inversion_steps":{steps},"reverse_steps":{steps}}}"##
    )
    .into_bytes()
}

/// Checks an error body: `{"error": string, "field"?: string}` and nothing else.
pub fn assert_error_body(v: &Value) {
    let obj = v.as_object().unwrap_or_else(|| panic!("error body is not an object: {v}"));
    assert!(obj["error"].is_string(), "{v}");
    for (k, val) in obj {
        match k.as_str() {
            "error" => {}
            "field" => assert!(val.is_string(), "{v}"),
            other => panic!("unexpected key {other} in {v}"),
        }
    }
}
