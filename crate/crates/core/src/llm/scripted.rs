use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, Role, Transcript};
use crate::error::LlmError;

/// Content rule for authored fixtures.
///
/// Matches when `context` occurs in a system message (where the target
/// document lives) and every `prompt` fragment occurs in the final user
/// message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default)]
    pub prompt: Vec<String>,
    pub response: String,
}

impl ScriptRule {
    fn matches(&self, request: &ChatRequest) -> bool {
        let context_ok = self
            .context
            .as_deref()
            .is_none_or(|ctx| request.messages.iter().any(|m| m.role == Role::System && m.content.contains(ctx)));
        let last = request.last_user();
        context_ok && self.prompt.iter().all(|p| last.contains(p.as_str()))
    }
}

/// Script file: exact digest responses plus ordered content rules.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Script, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LlmError::TranscriptNotFound(path.to_path_buf()),
            _ => LlmError::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| LlmError::TranscriptCorrupt {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn rule(mut self, context: Option<&str>, prompt: &[&str], response: &str) -> Self {
        self.rules.push(ScriptRule {
            context: context.map(str::to_string),
            prompt: prompt.iter().map(|p| p.to_string()).collect(),
            response: response.to_string(),
        });
        self
    }
}

/// Deterministic stand-in for a model. The answer is a function of the
/// request content alone; a request nothing covers is an error, never a
/// fallback to a live model.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend { script }
    }

    pub fn from_transcript(transcript: &Transcript) -> Self {
        let responses = transcript
            .entries()
            .iter()
            .map(|e| (e.digest.clone(), e.response.clone()))
            .collect();
        ScriptedBackend { script: Script { responses, rules: Vec::new() } }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let digest = request.digest();
        if let Some(r) = self.script.responses.get(&digest) {
            return Ok(r.clone());
        }
        self.script
            .rules
            .iter()
            .find(|rule| rule.matches(request))
            .map(|rule| rule.response.clone())
            .ok_or_else(|| LlmError::ScriptMiss { digest, prompt: preview(request.last_user()) })
    }
}

pub(crate) fn preview(s: &str) -> String {
    const MAX: usize = 120;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        s.chars().take(MAX).collect::<String>() + "..."
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, GenerationParams};

    fn req(ctx: &str, prompt: &str) -> ChatRequest {
        ChatRequest::new(
            vec![ChatMessage::system(format!("Context:\n{ctx}")), ChatMessage::user(prompt)],
            GenerationParams::default(),
        )
    }

    #[test]
    fn first_matching_rule_wins() {
        let script = Script::default()
            .rule(Some("temple"), &["recognize emotions"], "angry, worshipful, surprise, worry")
            .rule(None, &["recognize emotions"], "none");
        let backend = ScriptedBackend::new(script);
        assert_eq!(
            backend.complete(&req("1. the temple", "Please recognize emotions")).unwrap(),
            "angry, worshipful, surprise, worry"
        );
        assert_eq!(backend.complete(&req("1. today is Tuesday", "Please recognize emotions")).unwrap(), "none");
    }

    #[test]
    fn miss_is_an_error() {
        let backend = ScriptedBackend::new(Script::default());
        let err = backend.complete(&req("x", "hello")).unwrap_err();
        assert!(matches!(err, LlmError::ScriptMiss { .. }));
    }

    #[test]
    fn digest_entries_take_precedence() {
        let r = req("x", "hello");
        let mut script = Script::default().rule(None, &["hello"], "rule");
        script.responses.insert(r.digest(), "exact".into());
        assert_eq!(ScriptedBackend::new(script).complete(&r).unwrap(), "exact");
    }
}
