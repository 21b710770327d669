//! Client for the diffusion compensation service.
//!
//! Wire format: `POST {endpoint}/v1/compensate` with a JSON body carrying the
//! source image as base64 PNG; the response carries the compensated image in
//! the same encoding plus the model settings it ran with.
//! `GET {endpoint}/v1/health` must answer 200 before any image is sent.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Backend, CompensateError, Compensated, CompensationRequest, ServiceEcho};
use crate::raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensateRequestBody {
    pub image: String,
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensateResponseBody {
    pub image: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub steps: Option<serde_json::Value>,
    #[serde(default)]
    pub strength: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retries: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_backoff: Duration::from_millis(250) }
    }
}

pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Attempt {
    Transport(String),
    Status(u16, String),
}

impl HttpBackend {
    pub fn new(endpoint: &str) -> Self {
        Self::with_retry(endpoint, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: &str, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(10)))
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            retry,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Retries transport failures and 5xx answers with exponential backoff.
    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> Result<T, Attempt>,
    ) -> Result<T, CompensateError> {
        let mut attempt = 0;
        loop {
            let err = match call() {
                Ok(v) => return Ok(v),
                Err(e) => e,
            };
            let retryable = match &err {
                Attempt::Transport(_) => true,
                Attempt::Status(s, _) => *s >= 500,
            };
            if !retryable || attempt >= self.retry.retries {
                return Err(match err {
                    Attempt::Transport(msg) => {
                        log::warn!("compensation service transport error: {msg}");
                        CompensateError::BackendUnreachable(self.endpoint.clone())
                    }
                    Attempt::Status(status, body) => CompensateError::BackendError { status, body },
                });
            }
            thread::sleep(self.retry.base_backoff * 2u32.pow(attempt));
            attempt += 1;
        }
    }

    fn read_body(resp: &mut ureq::http::Response<ureq::Body>) -> Result<String, Attempt> {
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| Attempt::Transport(e.to_string()))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn health_check(&self) -> Result<(), CompensateError> {
        let url = format!("{}/v1/health", self.endpoint);
        let body = self.with_retries(|| {
            let mut resp = self
                .agent
                .get(&url)
                .call()
                .map_err(|e| Attempt::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = Self::read_body(&mut resp)?;
            if status != 200 {
                return Err(Attempt::Status(status, body));
            }
            Ok(body)
        })?;
        let v: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| CompensateError::MalformedResponse(e.to_string()))?;
        match v.get("status").and_then(|s| s.as_str()) {
            Some("ok") => Ok(()),
            _ => Err(CompensateError::BackendError { status: 200, body }),
        }
    }

    fn compensate(&self, req: &CompensationRequest<'_>) -> Result<Compensated, CompensateError> {
        let png = raster::encode_png(req.image)
            .map_err(|e| CompensateError::InvalidRequest(e.to_string()))?;
        let payload = CompensateRequestBody {
            image: STANDARD.encode(png),
            prompt: req.prompt.text.clone(),
            seed: req.seed,
            guidance_scale: req.guidance_scale,
        };
        let url = format!("{}/v1/compensate", self.endpoint);
        let body = self.with_retries(|| {
            let mut resp = self
                .agent
                .post(&url)
                .send_json(&payload)
                .map_err(|e| Attempt::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = Self::read_body(&mut resp)?;
            if status != 200 {
                return Err(Attempt::Status(status, body));
            }
            Ok(body)
        })?;
        let parsed: CompensateResponseBody = serde_json::from_str(&body)
            .map_err(|e| CompensateError::MalformedResponse(e.to_string()))?;
        let bytes = STANDARD
            .decode(parsed.image.as_bytes())
            .map_err(|e| CompensateError::MalformedResponse(format!("image is not base64: {e}")))?;
        let image = raster::decode_rgb(&bytes)
            .map_err(|e| CompensateError::MalformedResponse(format!("image does not decode: {e}")))?;
        Ok(Compensated {
            image,
            service: Some(ServiceEcho {
                model_id: parsed.model_id,
                steps: parsed.steps,
                strength: parsed.strength,
            }),
        })
    }
}
