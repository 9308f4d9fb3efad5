//! Provider-agnostic VLM requests and a JSON-over-HTTP transport.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Value};

/// Environment variable holding the provider credential.
pub const API_KEY_ENV: &str = "DVOC_VLM_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePart {
    pub mime_type: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub model: String,
    pub system_text: String,
    pub text_parts: Vec<String>,
    pub image_parts: Vec<ImagePart>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinishStatus {
    Stop,
    Length,
    /// The provider declined to answer; carries its explanation.
    Refused(String),
    Other(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmResponse {
    pub text: String,
    pub finish: FinishStatus,
    pub metadata: Value,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Decode(String),
}

impl TransportError {
    /// Whether a later attempt may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::RateLimited { .. } | TransportError::Network(_) => true,
            TransportError::Status { status, .. } => *status == 408 || *status >= 500,
            TransportError::Decode(_) => false,
        }
    }
}

pub trait VlmTransport: Send + Sync {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, TransportError>;
}

/// Request and response layout of a provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    /// `{"model", "system", "text": [..], "images": [{"mime_type", "data"}], ..}`
    /// answered by `{"text", "finish_reason", ..}`; the key goes in a bearer header.
    Generic,
    /// The `generateContent` layout; the key goes in `x-goog-api-key`.
    Gemini,
}

impl std::str::FromStr for Adapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic" => Ok(Adapter::Generic),
            "gemini" => Ok(Adapter::Gemini),
            other => Err(format!("unknown adapter `{other}`")),
        }
    }
}

impl Adapter {
    pub fn url(self, endpoint: &str, model: &str) -> String {
        let base = endpoint.trim_end_matches('/');
        match self {
            Adapter::Generic => base.to_string(),
            Adapter::Gemini => format!("{base}/models/{model}:generateContent"),
        }
    }

    pub fn body(self, r: &VlmRequest) -> Value {
        let images = r.image_parts.iter().map(|p| (p.mime_type.as_str(), STANDARD.encode(&p.bytes)));
        match self {
            Adapter::Generic => json!({
                "model": r.model,
                "system": r.system_text,
                "text": r.text_parts,
                "images": images.map(|(m, d)| json!({"mime_type": m, "data": d})).collect::<Vec<_>>(),
                "temperature": r.temperature,
                "max_output_tokens": r.max_output_tokens,
            }),
            Adapter::Gemini => {
                let mut parts: Vec<Value> = r.text_parts.iter().map(|t| json!({"text": t})).collect();
                parts.extend(images.map(|(m, d)| json!({"inline_data": {"mime_type": m, "data": d}})));
                json!({
                    "systemInstruction": {"parts": [{"text": r.system_text}]},
                    "contents": [{"role": "user", "parts": parts}],
                    "generationConfig": {
                        "temperature": r.temperature,
                        "maxOutputTokens": r.max_output_tokens,
                    },
                })
            }
        }
    }

    pub fn parse(self, body: &Value) -> Result<VlmResponse, TransportError> {
        let missing = |what: &str| TransportError::Decode(format!("response has no {what}"));
        match self {
            Adapter::Generic => {
                let reason = body.get("finish_reason").and_then(Value::as_str).unwrap_or("stop");
                let finish = match reason {
                    "stop" => FinishStatus::Stop,
                    "length" => FinishStatus::Length,
                    "refused" | "content_filter" => FinishStatus::Refused(
                        body.get("message").and_then(Value::as_str).unwrap_or(reason).to_string(),
                    ),
                    other => FinishStatus::Other(other.to_string()),
                };
                let text = match (&finish, body.get("text").and_then(Value::as_str)) {
                    (_, Some(t)) => t.to_string(),
                    (FinishStatus::Refused(_), None) => String::new(),
                    _ => return Err(missing("text")),
                };
                Ok(VlmResponse {
                    text,
                    finish,
                    metadata: body.get("metadata").cloned().unwrap_or(Value::Null),
                })
            }
            Adapter::Gemini => {
                if let Some(reason) = body.pointer("/promptFeedback/blockReason").and_then(Value::as_str) {
                    return Ok(VlmResponse {
                        text: String::new(),
                        finish: FinishStatus::Refused(format!("prompt blocked: {reason}")),
                        metadata: body.get("usageMetadata").cloned().unwrap_or(Value::Null),
                    });
                }
                let cand = body.pointer("/candidates/0").ok_or_else(|| missing("candidates"))?;
                let reason = cand.get("finishReason").and_then(Value::as_str).unwrap_or("STOP");
                let finish = match reason {
                    "STOP" => FinishStatus::Stop,
                    "MAX_TOKENS" => FinishStatus::Length,
                    "SAFETY" | "RECITATION" | "BLOCKLIST" | "PROHIBITED_CONTENT" | "SPII" => {
                        FinishStatus::Refused(format!("finish reason {reason}"))
                    }
                    other => FinishStatus::Other(other.to_string()),
                };
                let text: String = cand
                    .pointer("/content/parts")
                    .and_then(Value::as_array)
                    .map(|parts| parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect())
                    .unwrap_or_default();
                if text.is_empty() && !matches!(finish, FinishStatus::Refused(_)) {
                    return Err(missing("text"));
                }
                Ok(VlmResponse {
                    text,
                    finish,
                    metadata: body.get("usageMetadata").cloned().unwrap_or(Value::Null),
                })
            }
        }
    }
}

/// Blocking HTTP transport for one endpoint.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
    adapter: Adapter,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: String, adapter: Adapter, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
            api_key,
            adapter,
        })
    }

    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(endpoint: &str, adapter: Adapter, timeout: Duration) -> Result<Self, TransportError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| TransportError::Network(format!("{API_KEY_ENV} is not set")))?;
        Self::new(endpoint, key, adapter, timeout)
    }
}

fn retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    let v = headers.get(reqwest::header::RETRY_AFTER)?.to_str().ok()?;
    v.trim().parse::<u64>().ok().map(Duration::from_secs)
}

impl VlmTransport for HttpTransport {
    fn send(&self, request: &VlmRequest) -> Result<VlmResponse, TransportError> {
        let req = self.client.post(self.adapter.url(&self.endpoint, &request.model));
        let req = match self.adapter {
            Adapter::Generic => req.bearer_auth(&self.api_key),
            Adapter::Gemini => req.header("x-goog-api-key", &self.api_key),
        };
        let resp = req
            .json(&self.adapter.body(request))
            .send()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(TransportError::RateLimited {
                retry_after: retry_after(resp.headers()),
            });
        }
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))?;
        self.adapter.parse(&body)
    }
}
