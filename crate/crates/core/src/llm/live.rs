//! OpenAI-compatible chat-completions client with retry and rate limiting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest};
use crate::error::LlmError;

/// How the provider names its sampling knobs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// `top_p` and `frequency_penalty`.
    #[default]
    Openai,
    /// `top_k` and `repetition_penalty` (vLLM, text-generation-inference and
    /// most hosted open-weight model servers).
    TopK,
    /// `top_p` only; the provider has no penalty knob.
    NoPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Token bucket refilled at `requests_per_minute / 60` tokens per second.
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32, burst: u32) -> Self {
        let capacity = burst.max(1) as f64;
        RateLimiter {
            per_second: requests_per_minute.max(1) as f64 / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock();
                let now = Instant::now();
                let (tokens, last) = *state;
                let tokens = (tokens + now.duration_since(last).as_secs_f64() * self.per_second).min(self.capacity);
                if tokens >= 1.0 {
                    *state = (tokens - 1.0, now);
                    return;
                }
                *state = (tokens, now);
                Duration::from_secs_f64((1.0 - tokens) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub endpoint: String,
    pub api_key_env: String,
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        LiveConfig {
            endpoint: endpoint.into(),
            api_key_env: api_key_env.into(),
            provider: ProviderKind::default(),
            requests_per_minute: None,
            timeout_secs: default_timeout_secs(),
        }
    }
}

pub struct LiveBackend {
    url: String,
    api_key: Option<String>,
    provider: ProviderKind,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    sent: AtomicU64,
    tokens: AtomicU64,
}

impl LiveBackend {
    /// Reads the API key from the configured environment variable. An unset
    /// variable is an error unless the endpoint is local.
    pub fn new(config: &LiveConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let local = config.endpoint.contains("://localhost") || config.endpoint.contains("://127.0.0.1");
        if api_key.is_none() && !local {
            return Err(LlmError::MissingApiKey(config.api_key_env.clone()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(LiveBackend {
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            api_key,
            provider: config.provider,
            client,
            retry: RetryPolicy::default(),
            limiter: config.requests_per_minute.map(|rpm| RateLimiter::new(rpm, 1)),
            sent: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Total tokens the provider reported as used.
    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::Relaxed)
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let p = &request.params;
        let mut body = json!({
            "model": p.model,
            "messages": request.messages,
            "temperature": p.temperature,
            "max_tokens": p.max_tokens,
        });
        let obj = body.as_object_mut().expect("object literal");
        if let Some(seed) = p.seed {
            obj.insert("seed".into(), json!(seed));
        }
        match self.provider {
            ProviderKind::Openai => {
                obj.insert("top_p".into(), json!(p.top));
                if let Some(pen) = p.repetition_penalty {
                    obj.insert("frequency_penalty".into(), json!(pen));
                }
            }
            ProviderKind::TopK => {
                obj.insert("top_k".into(), json!(p.top.round() as i64));
                if let Some(pen) = p.repetition_penalty {
                    obj.insert("repetition_penalty".into(), json!(pen));
                }
            }
            ProviderKind::NoPenalty => {
                obj.insert("top_p".into(), json!(p.top));
            }
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, LlmError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        self.sent.fetch_add(1, Ordering::Relaxed);
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Http { status, body: text });
        }
        let parsed: ChatCompletion = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        if let Some(usage) = parsed.usage {
            self.tokens.fetch_add(usage.total_tokens, Ordering::Relaxed);
        }
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::BadResponse("no choices in response".into()))
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    total_tokens: u64,
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = self.request_body(request);
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    log::warn!("attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(LlmError::RetriesExhausted { attempts: attempt, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn requests_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, GenerationParams};

    #[test]
    fn backoff_doubles_up_to_cap() {
        let p = RetryPolicy { max_attempts: 10, base_delay: Duration::from_millis(100), max_delay: Duration::from_millis(500) };
        let d: Vec<_> = (1..=5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(d, vec![100, 200, 400, 500, 500]);
    }

    #[test]
    fn knobs_follow_provider() {
        let cfg = LiveConfig { provider: ProviderKind::TopK, ..LiveConfig::new("http://localhost:1", "UNSET_DECC_KEY") };
        let backend = LiveBackend::new(&cfg).unwrap();
        let req = ChatRequest::new(vec![ChatMessage::user("hi")], GenerationParams::default());
        let body = backend.request_body(&req);
        assert_eq!(body["top_k"], json!(1));
        assert_eq!(body["repetition_penalty"], json!(0.3));
        assert!(body.get("top_p").is_none());

        let cfg = LiveConfig::new("http://localhost:1", "UNSET_DECC_KEY");
        let body = LiveBackend::new(&cfg).unwrap().request_body(&req);
        assert_eq!(body["top_p"], json!(1.0));
        assert_eq!(body["frequency_penalty"], json!(0.3));
    }

    #[test]
    fn remote_endpoint_needs_key() {
        let cfg = LiveConfig::new("https://api.example.com/v1", "UNSET_DECC_KEY_2");
        assert!(matches!(LiveBackend::new(&cfg), Err(LlmError::MissingApiKey(_))));
    }

    #[test]
    fn limiter_spaces_requests() {
        let limiter = RateLimiter::new(600, 1);
        let start = Instant::now();
        for _ in 0..3 {
            limiter.acquire();
        }
        // first is free, next two wait ~100ms each
        assert!(start.elapsed() >= Duration::from_millis(180));
    }
}
