use std::collections::HashMap;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{BatchItem, Classifier, InferenceError};
use crate::preprocess::MODEL_INPUT_SIDE;

pub const CLASSIFY_PATH: &str = "/v1/classify";
pub const DEFAULT_TOKEN_ENV: &str = "TILEGRADE_REMOTE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8080`.
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    /// Extra attempts after the first one fails at the transport level.
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Delay before the first retry; doubles each time.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Environment variable holding a bearer token, if any.
    #[serde(default = "default_token_env")]
    pub token_env: String,
}

fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    100
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.into()
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: String::new(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            token_env: default_token_env(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteTile {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// Base64 of row-major RGB little-endian float32.
    pub pixels_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub model_id: String,
    pub tiles: Vec<RemoteTile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResult {
    pub id: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub results: Vec<RemoteResult>,
}

pub fn encode_pixels(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_pixels(b64: &str) -> Option<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// HTTP client for an external classification service. Shareable across
/// workers; each worker has at most one request in flight.
#[derive(Debug)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    url: String,
}

enum Failure {
    Retryable(String),
    Fatal(InferenceError),
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, InferenceError> {
        if cfg.endpoint.trim().is_empty() {
            return Err(InferenceError::Unavailable("remote endpoint is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}{CLASSIFY_PATH}", cfg.endpoint.trim_end_matches('/'));
        Ok(Self { cfg, agent, url })
    }

    fn attempt(&self, body: &ClassifyRequest) -> Result<ClassifyResponse, Failure> {
        let mut req = self.agent.post(&self.url);
        if let Ok(token) = std::env::var(&self.cfg.token_env) {
            if !token.is_empty() {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if matches!(status, 502..=504) {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status != 200 {
            return Err(Failure::Fatal(InferenceError::Status(status)));
        }
        resp.body_mut()
            .read_json::<ClassifyResponse>()
            .map_err(|e| Failure::Fatal(InferenceError::Protocol(format!("malformed response: {e}"))))
    }

    fn send(&self, body: &ClassifyRequest) -> Result<ClassifyResponse, InferenceError> {
        let attempts = self.cfg.retries + 1;
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for n in 1..=attempts {
            match self.attempt(body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(reason)) => {
                    tracing::warn!(attempt = n, %reason, url = %self.url, "remote classify failed");
                    last = reason;
                    if n < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(InferenceError::Transport { attempts, reason: last })
    }
}

impl Classifier for RemoteBackend {
    fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let tiles = batch
            .iter()
            .map(|item| {
                Ok(RemoteTile {
                    id: item.id(),
                    width: MODEL_INPUT_SIDE,
                    height: MODEL_INPUT_SIDE,
                    pixels_b64: encode_pixels(&item.tensor()?.values),
                })
            })
            .collect::<Result<Vec<_>, InferenceError>>()?;
        let request = ClassifyRequest { model_id: self.cfg.model_id.clone(), tiles };
        let response = self.send(&request)?;
        if response.results.len() != batch.len() {
            return Err(InferenceError::CountMismatch { expected: batch.len(), got: response.results.len() });
        }
        let mut by_id: HashMap<String, Vec<f64>> = HashMap::with_capacity(batch.len());
        for r in response.results {
            if by_id.insert(r.id.clone(), r.probs).is_some() {
                return Err(InferenceError::Protocol(format!("duplicate result id {}", r.id)));
            }
        }
        request
            .tiles
            .iter()
            .map(|t| by_id.remove(&t.id).ok_or_else(|| InferenceError::Protocol(format!("no result for tile {}", t.id))))
            .collect()
    }
}

#[cfg(test)]
#[path = "../../tests/common/stub_server.rs"]
mod stub_server;
