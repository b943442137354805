//! Chat-completion backends.
//!
//! Every backend answers a [`ChatRequest`]. Requests are identified by a
//! content digest (SHA-256 over a canonical JSON rendering), which keys the
//! scripted backend, transcripts and replay.

mod live;
mod scripted;
mod transcript;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LlmError;

pub use live::{LiveBackend, LiveConfig, ProviderKind, RateLimiter, RetryPolicy};
pub use scripted::{Script, ScriptRule, ScriptedBackend};
pub use transcript::{RecordingBackend, ReplayBackend, Transcript, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

impl fmt::Display for ChatMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::System => "System",
            Role::User => "User",
            Role::Assistant => "Assistant",
        };
        write!(f, "{role}: {}", self.content)
    }
}

/// Sampling settings sent with every request.
///
/// `top` is top-p or top-k depending on the provider; adapters translate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub top: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    /// Settings used for the staged chain: temperature 0.7, top 1, penalty 0.3.
    fn default() -> Self {
        GenerationParams {
            model: "gpt-3.5-turbo".to_string(),
            temperature: 0.7,
            top: 1.0,
            repetition_penalty: Some(0.3),
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl GenerationParams {
    /// Greedy settings for the single-prompt baseline.
    pub fn naive() -> Self {
        GenerationParams { temperature: 0.0, repetition_penalty: None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidParams(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !self.top.is_finite() || self.top < 0.0 {
            return Err(LlmError::InvalidParams(format!("top {} must be a non-negative number", self.top)));
        }
        if self.repetition_penalty.is_some_and(|p| !p.is_finite()) {
            return Err(LlmError::InvalidParams("repetition penalty must be finite".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be positive".into()));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidParams("model name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, params: GenerationParams) -> Self {
        ChatRequest { messages, params }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        if let Some(index) = self.messages.iter().position(|m| m.content.trim().is_empty()) {
            return Err(LlmError::EmptyMessage { index });
        }
        self.params.validate()
    }

    /// Hex SHA-256 of the request with object keys sorted, so field order
    /// never matters but any content change does.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let mut canonical = String::new();
        write_canonical(&value, &mut canonical);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Content of the final user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// A chat-completion provider. Implementations must be safe to share across
/// threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// Requests sent to a remote provider so far, when the backend tracks it.
    fn requests_sent(&self) -> u64 {
        0
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn requests_sent(&self) -> u64 {
        (**self).requests_sent()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn requests_sent(&self) -> u64 {
        (**self).requests_sent()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn requests_sent(&self) -> u64 {
        (**self).requests_sent()
    }
}

/// Validates and sends one request.
pub fn complete(
    backend: &dyn ChatBackend,
    messages: Vec<ChatMessage>,
    params: &GenerationParams,
) -> Result<String, LlmError> {
    let request = ChatRequest::new(messages, params.clone());
    request.validate()?;
    backend.complete(&request)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> ChatRequest {
        ChatRequest::new(
            vec![ChatMessage::system("Context: 1. a"), ChatMessage::user("Please recognize emotions")],
            GenerationParams::default(),
        )
    }

    #[test]
    fn default_params_follow_chain_settings() {
        let p = GenerationParams::default();
        assert_eq!((p.temperature, p.top, p.repetition_penalty), (0.7, 1.0, Some(0.3)));
        assert_eq!(GenerationParams::naive().temperature, 0.0);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let backend = ScriptedBackend::new(Script::default());
        let err = complete(&backend, vec![], &GenerationParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty prompt");
    }

    #[test]
    fn temperature_is_bounded() {
        let p = GenerationParams { temperature: 2.5, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn digest_ignores_field_order() {
        let req = request();
        let json = serde_json::to_string(&req).unwrap();
        let reordered = r#"{"params":{"seed":null,"max_tokens":1024,"repetition_penalty":0.3,"top":1.0,"temperature":0.7,"model":"gpt-3.5-turbo"},"messages":[{"content":"Context: 1. a","role":"system"},{"content":"Please recognize emotions","role":"user"}]}"#;
        let back: ChatRequest = serde_json::from_str(reordered).unwrap();
        assert_eq!(back.digest(), req.digest(), "{json}");
    }

    #[test]
    fn digest_tracks_content() {
        let a = request();
        let mut b = request();
        b.messages[1].content.push(' ');
        assert_ne!(a.digest(), b.digest());
        let mut c = request();
        c.params.temperature = 0.0;
        assert_ne!(a.digest(), c.digest());
    }
}
