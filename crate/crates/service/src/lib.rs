//! Annotation service for human judgment of predicted emotion-cause pairs.
//!
//! Each predicted pair becomes an item. Annotators from a fixed roster pull
//! items one at a time and submit correct/incorrect verdicts, which are
//! appended to a JSONL log. An item resolves once a panel threshold is
//! reached either way; the export feeds the human-judged scoring mode.

mod http;
mod store;

pub use http::{router, serve};
pub use store::{
    build_items, read_items, write_items, AnnotationItem, ItemRecord, Progress, Store, StoreConfig, StoreError,
};
