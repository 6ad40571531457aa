//! HTTP client for an external classifier.
//!
//! ```text
//! GET  /health   -> {"status": "ok"}
//! GET  /labels   -> {"labels": [string, ...]}
//! POST /classify {"image_png_b64": "..."} -> {"probs": [float, ...], "label": int}
//! ```

use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{Client, Response};
use reqwest::header::CONTENT_TYPE;
use serde::{Deserialize, Serialize};

use super::{Concurrency, ModelError, ProbVector, TargetModel, REMOTE_SIMPLEX_TOLERANCE};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: Concurrency,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_concurrency() -> Concurrency {
    Concurrency::Serialize
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        RemoteConfig { url: url.into(), timeout_secs: default_timeout_secs(), concurrency: default_concurrency() }
    }
}

#[derive(Debug)]
pub struct RemoteModel {
    client: Client,
    base: String,
    labels: Vec<String>,
    concurrency: Concurrency,
}

#[derive(Deserialize)]
struct Health {
    status: String,
}

#[derive(Deserialize)]
struct Labels {
    labels: Vec<String>,
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    image_png_b64: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    probs: Vec<f64>,
    label: usize,
}

impl RemoteModel {
    /// Checks `/health` and fetches `/labels`.
    pub fn connect(cfg: &RemoteConfig) -> Result<Self, ModelError> {
        if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs > 0.0) {
            return Err(ModelError::Config(format!("timeout {}", cfg.timeout_secs)));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let base = cfg.url.trim_end_matches('/').to_string();
        let mut model = RemoteModel { client, base, labels: Vec::new(), concurrency: cfg.concurrency };

        let health: Health = model.get_json("/health")?;
        if health.status != "ok" {
            return Err(ModelError::MalformedBody(format!("health status {:?}", health.status)));
        }
        let labels: Labels = model.get_json("/labels")?;
        if labels.labels.is_empty() {
            return Err(ModelError::MalformedBody("empty label list".into()));
        }
        model.labels = labels.labels;
        Ok(model)
    }

    fn get_json<D: serde::de::DeserializeOwned>(&self, path: &str) -> Result<D, ModelError> {
        let resp = self.client.get(format!("{}{path}", self.base)).send().map_err(transport)?;
        parse_json(resp)
    }
}

fn transport(e: reqwest::Error) -> ModelError {
    if e.is_timeout() {
        ModelError::Timeout(e.to_string())
    } else if e.is_decode() || e.is_body() {
        ModelError::MalformedBody(e.to_string())
    } else {
        ModelError::Network(e.to_string())
    }
}

fn parse_json<D: serde::de::DeserializeOwned>(resp: Response) -> Result<D, ModelError> {
    let status = resp.status();
    if status.as_u16() != 200 {
        let body = resp.text().unwrap_or_default();
        return Err(ModelError::BadStatus { status: status.as_u16(), body });
    }
    let json_type = resp
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.to_ascii_lowercase().starts_with("application/json"));
    if !json_type {
        return Err(ModelError::MalformedBody("content type is not application/json".into()));
    }
    let bytes = resp.bytes().map_err(transport)?;
    serde_json::from_slice(&bytes).map_err(|e| ModelError::MalformedBody(e.to_string()))
}

impl TargetModel for RemoteModel {
    fn classify(&self, image: &Image) -> Result<ProbVector, ModelError> {
        let png = image.to_rgb().encode_png()?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        let resp = self
            .client
            .post(format!("{}/classify", self.base))
            .json(&ClassifyRequest { image_png_b64: &b64 })
            .send()
            .map_err(transport)?;
        let body: ClassifyResponse = parse_json(resp)?;
        if body.probs.len() != self.labels.len() {
            return Err(ModelError::LengthMismatch { expected: self.labels.len(), got: body.probs.len() });
        }
        if body.label >= self.labels.len() {
            return Err(ModelError::MalformedBody(format!("label {} out of range", body.label)));
        }
        ProbVector::with_tolerance(body.probs, REMOTE_SIMPLEX_TOLERANCE)
    }

    fn label_count(&self) -> usize {
        self.labels.len()
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }

    fn labels(&self) -> Option<Vec<String>> {
        Some(self.labels.clone())
    }
}
