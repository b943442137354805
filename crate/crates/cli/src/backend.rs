//! Builds the configured chat backend and tracks what it used.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use decc_core::llm::{ChatBackend, ChatRequest, LiveBackend, RecordingBackend, ReplayBackend, Script, ScriptedBackend};
use decc_core::LlmError;

use crate::config::{config_err, BackendSpec};

/// Counts every request the chain issues, answered remotely or not.
struct Counting {
    inner: Box<dyn ChatBackend>,
    calls: AtomicU64,
}

impl ChatBackend for Counting {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }

    fn requests_sent(&self) -> u64 {
        self.inner.requests_sent()
    }
}

type Recorder = Arc<RecordingBackend<Box<dyn ChatBackend>>>;

/// The backend for one command, plus the optional transcript recorder.
pub struct ActiveBackend {
    chat: Counting,
    live: Option<Arc<LiveBackend>>,
    recorder: Option<(Recorder, PathBuf)>,
    kind: &'static str,
}

impl ActiveBackend {
    /// Failures here (missing script, missing API key) are configuration
    /// errors: no request has been sent yet.
    pub fn build(spec: &BackendSpec, record: Option<PathBuf>) -> anyhow::Result<ActiveBackend> {
        let mut live = None;
        let (base, kind): (Box<dyn ChatBackend>, _) = match spec {
            BackendSpec::Scripted(path) => {
                let script = Script::load(path).map_err(|e| config_err(format!("script: {e}")))?;
                (Box::new(ScriptedBackend::new(script)), "scripted")
            }
            BackendSpec::Replay(path) => {
                let replay = ReplayBackend::open(path).map_err(|e| config_err(format!("replay: {e}")))?;
                (Box::new(replay), "replay")
            }
            BackendSpec::Live(cfg) => {
                let backend = Arc::new(LiveBackend::new(cfg).map_err(|e| config_err(format!("live backend: {e}")))?);
                live = Some(backend.clone());
                (Box::new(backend), "live")
            }
        };
        let (chat, recorder): (Box<dyn ChatBackend>, _) = match record {
            Some(path) => {
                let rec = Arc::new(RecordingBackend::new(base));
                (Box::new(rec.clone()), Some((rec, path)))
            }
            None => (base, None),
        };
        Ok(ActiveBackend { chat: Counting { inner: chat, calls: AtomicU64::new(0) }, live, recorder, kind })
    }

    pub fn chat(&self) -> &dyn ChatBackend {
        &self.chat
    }

    /// Requests issued by the chain, including ones answered locally.
    pub fn requests_issued(&self) -> u64 {
        self.chat.calls.load(Ordering::Relaxed)
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Requests that reached a remote provider.
    pub fn requests_sent(&self) -> u64 {
        self.chat.requests_sent()
    }

    pub fn tokens_used(&self) -> u64 {
        self.live.as_ref().map_or(0, |l| l.tokens_used())
    }

    pub fn transcript_path(&self) -> Option<&PathBuf> {
        self.recorder.as_ref().map(|(_, p)| p)
    }

    /// Writes the recorded transcript, if recording.
    pub fn save_transcript(&self) -> anyhow::Result<()> {
        if let Some((rec, path)) = &self.recorder {
            rec.transcript().save(path)?;
        }
        Ok(())
    }
}

/// Independent seeds derived from the root seed; `stream` separates uses
/// (runs, clustering) so adding runs never shifts the clustering seed.
pub fn derive_seeds(root: u64, stream: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub const RUN_STREAM: u64 = 0;
pub const CLUSTER_STREAM: u64 = 1;
