//! Emotion-cause pair extraction with a decomposed chain of model calls.
//!
//! A document is a list of clauses. The [`chain`] asks a chat model to
//! recognize emotional keywords, locate the clauses expressing them,
//! analyze why each emotion arises and summarize one cause clause per
//! emotion, pruning branches that fail along the way. [`icl`] builds
//! worked demonstrations for the prompts, [`eval`] scores predictions and
//! [`llm`] provides live, scripted and replayed model backends.

pub mod chain;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod icl;
pub mod llm;
pub mod prompts;
pub mod text;
pub mod types;

pub use error::{ChainError, DatasetError, EvalError, IclError, LlmError, ValidationError};
pub use types::{
    validate_document, AnalysisChain, ChainStatus, ChainTrace, Clause, Document, EmotionCandidate, EmotionCausePair,
    Language, PruneReason, Step,
};
