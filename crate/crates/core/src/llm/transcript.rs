use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::scripted::preview;
use super::{ChatBackend, ChatRequest};
use crate::error::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: ChatRequest,
    pub response: String,
}

/// Ordered request/response log with unique request digests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    index: HashMap<String, usize>,
}

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, digest: &str) -> Option<&str> {
        self.index.get(digest).map(|&i| self.entries[i].response.as_str())
    }

    /// Appends unless the digest is already present. Returns the stored
    /// response for the digest.
    pub fn record(&mut self, request: ChatRequest, response: String) -> &str {
        let digest = request.digest();
        let i = match self.index.get(&digest) {
            Some(&i) => i,
            None => {
                self.index.insert(digest.clone(), self.entries.len());
                self.entries.push(TranscriptEntry { digest, request, response });
                self.entries.len() - 1
            }
        };
        &self.entries[i].response
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a transcript, checking that every stored digest matches its
    /// request.
    pub fn load(path: &Path) -> Result<Transcript, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LlmError::TranscriptNotFound(path.to_path_buf()),
            _ => LlmError::Io(e),
        })?;
        let mut transcript = Transcript::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| LlmError::TranscriptCorrupt { path: path.to_path_buf(), line: i + 1, message };
            let entry: TranscriptEntry = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if entry.request.digest() != entry.digest {
                return Err(corrupt(format!("stored digest {} does not match its request", entry.digest)));
            }
            if transcript.index.contains_key(&entry.digest) {
                return Err(corrupt(format!("duplicate digest {}", entry.digest)));
            }
            transcript.index.insert(entry.digest.clone(), transcript.entries.len());
            transcript.entries.push(entry);
        }
        Ok(transcript)
    }
}

/// Wraps a backend and logs every exchange.
///
/// A request whose digest is already logged is answered from the log
/// without calling the inner backend, so a recorded session replays
/// exactly.
pub struct RecordingBackend<B> {
    inner: B,
    transcript: Mutex<Transcript>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, transcript: Mutex::new(Transcript::default()) }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().clone()
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript.into_inner()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let digest = request.digest();
        if let Some(r) = self.transcript.lock().lookup(&digest) {
            return Ok(r.to_string());
        }
        let response = self.inner.complete(request)?;
        Ok(self.transcript.lock().record(request.clone(), response).to_string())
    }

    fn requests_sent(&self) -> u64 {
        self.inner.requests_sent()
    }
}

/// Answers strictly from a recorded transcript.
pub struct ReplayBackend {
    transcript: Transcript,
    position: AtomicUsize,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        ReplayBackend { transcript, position: AtomicUsize::new(0) }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(Transcript::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let position = self.position.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        match self.transcript.lookup(&digest) {
            Some(r) => Ok(r.to_string()),
            None => Err(LlmError::DigestMismatch {
                position: position + 1,
                expected: self.transcript.entries().get(position).map(|e| e.digest.clone()),
                digest,
                prompt: preview(request.last_user()),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, GenerationParams, Script, ScriptedBackend};

    fn req(prompt: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user(prompt)], GenerationParams::default())
    }

    struct Counter(AtomicUsize);

    impl ChatBackend for Counter {
        fn complete(&self, _: &ChatRequest) -> Result<String, LlmError> {
            Ok(format!("call {}", self.0.fetch_add(1, Ordering::SeqCst)))
        }
    }

    #[test]
    fn repeated_request_is_answered_from_the_log() {
        let rec = RecordingBackend::new(Counter(AtomicUsize::new(0)));
        assert_eq!(rec.complete(&req("a")).unwrap(), "call 0");
        assert_eq!(rec.complete(&req("a")).unwrap(), "call 0");
        assert_eq!(rec.complete(&req("b")).unwrap(), "call 1");
        assert_eq!(rec.transcript().len(), 2);
    }

    #[test]
    fn save_load_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = RecordingBackend::new(ScriptedBackend::new(Script::default().rule(None, &[], "ok")));
        rec.complete(&req("a")).unwrap();
        rec.complete(&req("b")).unwrap();
        rec.transcript().save(&path).unwrap();

        let replay = ReplayBackend::open(&path).unwrap();
        assert_eq!(replay.complete(&req("a")).unwrap(), "ok");
        let err = replay.complete(&req("c")).unwrap_err();
        match err {
            LlmError::DigestMismatch { position, expected, .. } => {
                assert_eq!(position, 2);
                assert_eq!(expected, Some(req("b").digest()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_transcript() {
        let err = ReplayBackend::open(Path::new("/nonexistent/t.jsonl")).err().unwrap();
        assert!(err.to_string().starts_with("transcript not found"), "{err}");
    }

    #[test]
    fn tampered_transcript_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut t = Transcript::default();
        t.record(req("a"), "x".into());
        t.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"a\"", "\"z\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(Transcript::load(&path), Err(LlmError::TranscriptCorrupt { line: 1, .. })));
    }
}
