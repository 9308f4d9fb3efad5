//! Caption requests with retries, rate limiting and an artifact post-filter.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::frames::{encode_jpeg, FrameError};
use crate::prompt::PromptBundle;
use crate::vlm::{FinishStatus, ImagePart, TransportError, VlmRequest, VlmTransport};

/// Phrases that reveal the drawn visual prompt.
pub const ARTIFACT_PHRASES: [&str; 3] = ["bounding box", "rectangle", "highlighted"];

pub const CORRECTIVE_SUFFIX: &str = "Your previous caption referred to the drawn annotation. \
Rewrite it without mentioning bounding boxes, rectangles, highlighting or any drawn mark.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff `base * 2^attempt`, capped, and never shorter
    /// than a server-provided `Retry-After`.
    pub fn delay(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX));
        let d = exp.min(self.max_delay);
        retry_after.map_or(d, |r| d.max(r))
    }
}

/// Token bucket handing out reservations: a caller that finds the bucket
/// empty still takes a token and is told how long to wait for it.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    /// `rate` tokens per second, holding at most `capacity`.
    pub fn new(rate: f64, capacity: f64) -> Self {
        assert!(rate > 0.0 && capacity >= 1.0, "rate must be positive and capacity at least 1");
        Self {
            capacity,
            rate,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn reserve(&self) -> Duration {
        self.reserve_at(Instant::now())
    }

    fn reserve_at(&self, now: Instant) -> Duration {
        let mut s = self.state.lock().expect("token bucket poisoned");
        let elapsed = now.saturating_duration_since(s.1).as_secs_f64();
        s.0 = (s.0 + elapsed * self.rate).min(self.capacity) - 1.0;
        s.1 = now.max(s.1);
        if s.0 >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-s.0 / self.rate)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Longest image side sent to the provider.
    pub max_image_side: u32,
    pub jpeg_quality: u8,
    pub retry: RetryPolicy,
    /// Requests per second and burst size; `None` disables limiting.
    pub rate_limit: Option<(f64, f64)>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            model: "gemini-2.0-flash".into(),
            temperature: 0.2,
            max_output_tokens: 128,
            max_image_side: 1024,
            jpeg_quality: 90,
            retry: RetryPolicy::default(),
            rate_limit: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("permanent failure: {0}")]
    Permanent(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct CaptionClient {
    transport: Box<dyn VlmTransport>,
    config: ClientConfig,
    limiter: Option<TokenBucket>,
    sleep: Sleeper,
}

impl CaptionClient {
    pub fn new(transport: Box<dyn VlmTransport>, config: ClientConfig) -> Self {
        let limiter = config.rate_limit.map(|(rate, burst)| TokenBucket::new(rate, burst));
        Self {
            transport,
            config,
            limiter,
            sleep: Box::new(std::thread::sleep),
        }
    }

    /// Replaces the function used to wait between attempts.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn send(&self, request: &VlmRequest) -> Result<crate::vlm::VlmResponse, CaptionError> {
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            if let Some(l) = &self.limiter {
                let wait = l.reserve();
                if !wait.is_zero() {
                    (self.sleep)(wait);
                }
            }
            match self.transport.send(request) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < policy.max_retries => {
                    let hint = match &e {
                        TransportError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    log::debug!("attempt {attempt} failed: {e}");
                    (self.sleep)(policy.delay(attempt, hint));
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(CaptionError::Transient(format!("{e} after {} attempts", attempt + 1)))
                }
                Err(e) => return Err(CaptionError::Permanent(e.to_string())),
            }
        }
    }
}

/// Collapses whitespace, drops wrapping quotes and a leading `Caption:` label.
pub fn clean_caption(text: &str) -> String {
    let mut s = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if s.get(..8).is_some_and(|p| p.eq_ignore_ascii_case("caption:")) {
        s = s[8..].trim_start().to_string();
    }
    let quoted = s.len() >= 2 && s.starts_with('"') && s.ends_with('"');
    if quoted {
        s = s[1..s.len() - 1].trim().to_string();
    }
    s
}

pub fn mentions_artifact(caption: &str) -> bool {
    let lower = caption.to_lowercase();
    ARTIFACT_PHRASES.iter().any(|p| lower.contains(p))
}

/// Requests one caption for the prompt. A caption that mentions the drawn
/// annotation triggers one retry carrying [`CORRECTIVE_SUFFIX`].
pub fn request_caption(client: &CaptionClient, bundle: &PromptBundle) -> Result<String, CaptionError> {
    let cfg = &client.config;
    let mut image_parts = Vec::with_capacity(bundle.visual_frames.len());
    for f in &bundle.visual_frames {
        image_parts.push(ImagePart {
            mime_type: "image/jpeg".into(),
            bytes: encode_jpeg(f, cfg.max_image_side, cfg.jpeg_quality)?,
        });
    }
    let mut request = VlmRequest {
        model: cfg.model.clone(),
        system_text: bundle.system_text.clone(),
        text_parts: vec![bundle.user_text.clone()],
        image_parts,
        temperature: cfg.temperature,
        max_output_tokens: cfg.max_output_tokens,
    };
    for corrected in [false, true] {
        let response = client.send(&request)?;
        if let FinishStatus::Refused(msg) = &response.finish {
            return Err(CaptionError::Permanent(format!("refused by provider: {msg}")));
        }
        let caption = clean_caption(&response.text);
        if caption.is_empty() {
            return Err(CaptionError::Permanent("empty caption".into()));
        }
        if !mentions_artifact(&caption) {
            return Ok(caption);
        }
        if corrected {
            return Err(CaptionError::Permanent(format!(
                "caption mentions the drawn annotation after correction: {caption}"
            )));
        }
        request.text_parts.push(CORRECTIVE_SUFFIX.to_string());
    }
    unreachable!("the loop returns on its second pass")
}
