use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("document id is empty")]
    EmptyId,
    #[error("empty document: {id} has no clauses")]
    EmptyDocument { id: String },
    #[error("clauses: {id} mixes indexed and unindexed clauses")]
    MixedIndexing { id: String },
    #[error("clauses: duplicate clause index {index} in {id}")]
    DuplicateClauseIndex { id: String, index: i64 },
    #[error("clauses: indices of {id} are not increasing")]
    UnorderedClauses { id: String },
    #[error("clauses: clause {index} of {id} has empty text")]
    EmptyClause { id: String, index: i64 },
    #[error("pairs: pair index out of range {pair:?} in {id} ({clauses} clauses)")]
    PairOutOfRange { id: String, pair: (i64, i64), clauses: usize },
    #[error("pairs: duplicate gold pair {pair:?} in {id}")]
    DuplicatePair { id: String, pair: (i64, i64) },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("line {line}: duplicate document id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: mixed-language corpus without per-document tags")]
    MixedLanguage { line: usize },
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("message {index} has empty content")]
    EmptyMessage { index: usize },
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("scripted backend has no response for request {digest} (last prompt: {prompt:?})")]
    ScriptMiss { digest: String, prompt: String },
    #[error(
        "prompt drift at request #{position}: digest {digest} is not in the transcript{}",
        expected.as_ref().map(|e| format!(" (recorded request #{position} has digest {e})")).unwrap_or_default()
    )]
    DigestMismatch { position: usize, digest: String, expected: Option<String>, prompt: String },
    #[error("transcript not found: {0}")]
    TranscriptNotFound(PathBuf),
    #[error("transcript {path}: line {line}: {message}")]
    TranscriptCorrupt { path: PathBuf, line: usize, message: String },
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Whether a live call may succeed if repeated.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid chain config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Demonstrations(#[from] IclError),
}

#[derive(Debug, Error)]
pub enum IclError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got} for {document}")]
    DimensionMismatch { expected: usize, got: usize, document: String },
    #[error("non-finite value in embedding of {0}")]
    NonFinite(String),
    #[error("k = {k} must be between 1 and the number of vectors ({n})")]
    InvalidK { k: usize, n: usize },
    #[error("demonstration {index} ({document}) is not curated")]
    Uncurated { index: usize, document: String },
    #[error("expected {expected} demonstrations, got {got}")]
    ShotMismatch { expected: usize, got: usize },
    #[error("prompt needs {needed} tokens but the budget is {budget}; drop demonstration {drop} ({document})")]
    BudgetExceeded { needed: usize, budget: usize, drop: usize, document: String },
    #[error("cannot curate {document}: final pairs {final_pairs:?} differ from gold {gold:?}")]
    CurationMismatch { document: String, final_pairs: Vec<(usize, usize)>, gold: Vec<(usize, usize)> },
    #[error("candidate {0} has no gold pairs")]
    Unlabeled(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("duplicate document {0} in predictions")]
    DuplicateDocument(String),
    #[error("predicted document {0} is not in the corpus")]
    UnknownDocument(String),
    #[error("predicted pair {pair:?} is out of range for {document}")]
    PairOutOfRange { document: String, pair: (usize, usize) },
    #[error("human verdict pending for {document} {pair:?}")]
    Pending { document: String, pair: (usize, usize) },
    #[error("original F1 must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("duplicate verdict from {annotator} on {item}")]
    DuplicateJudgment { item: String, annotator: String },
    #[error("item {item} has {count} judgments but the panel has {panel}")]
    PanelOverflow { item: String, count: usize, panel: usize },
    #[error("threshold {threshold} must be in 1..={panel}")]
    InvalidThreshold { threshold: usize, panel: usize },
    #[error("fuzzy threshold {0} must be in (0, 1]")]
    InvalidFuzzyThreshold(f64),
}
