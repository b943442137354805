//! Annotation items and the append-only judgment log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use decc_core::dataset::Corpus;
use decc_core::eval::{
    aggregate_judgments, check_panel, item_status, HumanJudgment, ItemStatus, Prediction, Tally, Verdict,
    VerdictRecord,
};
use decc_core::types::Clause;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("{annotator} already judged {item}")]
    Duplicate { item: String, annotator: String },
    #[error("item {0} is already resolved")]
    Resolved(String),
    #[error("predicted document {0} is not in the corpus")]
    UnknownDocument(String),
    #[error("predicted pair {pair:?} is out of range for {document}")]
    PairOutOfRange { document: String, pair: (usize, usize) },
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error("{path}: line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// One predicted pair to be judged, as stored in the items file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub document_id: String,
    pub clauses: Vec<Clause>,
    pub gold_pairs: Vec<(usize, usize)>,
    /// The pair under judgment.
    pub pair: (usize, usize),
    /// Every pair the model produced for the document.
    pub output_pairs: Vec<(usize, usize)>,
    /// The model's own wording of the cause, when it gave one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
}

/// An item together with its current judgment state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    #[serde(flatten)]
    pub record: ItemRecord,
    pub correct: usize,
    pub incorrect: usize,
    pub status: ItemStatus,
}

/// One item per predicted pair, ids `i00001`, `i00002`, ... in corpus order.
pub fn build_items(corpus: &Corpus, predictions: &[Prediction]) -> Result<Vec<ItemRecord>, StoreError> {
    let mut by_doc: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if corpus.get(&p.document_id).is_none() {
            return Err(StoreError::UnknownDocument(p.document_id.clone()));
        }
        by_doc.insert(p.document_id.as_str(), p);
    }
    let mut items = Vec::new();
    for doc in corpus.documents() {
        let Some(pred) = by_doc.get(doc.id()) else { continue };
        for (i, &(e, c)) in pred.pairs.iter().enumerate() {
            if !doc.contains_index(e) || !doc.contains_index(c) {
                return Err(StoreError::PairOutOfRange { document: doc.id().to_string(), pair: (e, c) });
            }
            items.push(ItemRecord {
                id: format!("i{:05}", items.len() + 1),
                document_id: doc.id().to_string(),
                clauses: doc.clauses().to_vec(),
                gold_pairs: doc.gold_pairs().to_vec(),
                pair: (e, c),
                output_pairs: pred.pairs.clone(),
                output_text: pred.cause_spans.get(i).cloned().flatten(),
            });
        }
    }
    Ok(items)
}

pub fn write_items(path: &Path, items: &[ItemRecord]) -> Result<(), StoreError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| io_err(path)(e.into()))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_items(path: &Path) -> Result<Vec<ItemRecord>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub annotators: BTreeSet<String>,
    pub panel: usize,
    pub threshold: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { annotators: BTreeSet::new(), panel: 5, threshold: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub items: usize,
    pub pending: usize,
    pub resolved_correct: usize,
    pub resolved_incorrect: usize,
    pub judgments: usize,
    /// Judgments submitted per annotator.
    pub per_annotator: BTreeMap<String, usize>,
}

struct State {
    judgments: Vec<HumanJudgment>,
    judged: HashSet<(String, String)>,
    tallies: HashMap<String, Tally>,
}

/// Items plus the judgment log. Reads share a lock; submissions take the
/// write lock and append to the log before updating memory, so the log is
/// always the source of truth.
pub struct Store {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    config: StoreConfig,
    state: RwLock<State>,
    log_path: PathBuf,
    log: Mutex<File>,
}

impl Store {
    /// Loads the items and replays the judgment log. A torn final line (a
    /// crash mid-append) is cut off; any other bad line is an error.
    pub fn open(items: Vec<ItemRecord>, log_path: &Path, config: StoreConfig) -> Result<Store, StoreError> {
        check_panel(config.panel, config.threshold).map_err(|e| StoreError::Config(e.to_string()))?;
        if config.annotators.is_empty() {
            return Err(StoreError::Config("no annotators registered".into()));
        }
        let mut items = items;
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.id.clone(), i).is_some() {
                return Err(StoreError::DuplicateItem(item.id.clone()));
            }
        }

        let mut state = State { judgments: Vec::new(), judged: HashSet::new(), tallies: HashMap::new() };
        let text = match fs::read_to_string(log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(log_path)(e)),
        };
        let complete = if text.ends_with('\n') || text.is_empty() { text.len() } else { text.rfind('\n').map_or(0, |i| i + 1) };
        if complete < text.len() {
            log::warn!("{}: dropping torn final line", log_path.display());
            let f = OpenOptions::new().write(true).open(log_path).map_err(io_err(log_path))?;
            f.set_len(complete as u64).map_err(io_err(log_path))?;
        }
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| StoreError::Corrupt { path: log_path.to_path_buf(), line: i + 1, message };
            let j: HumanJudgment = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if !index.contains_key(&j.item) {
                return Err(corrupt(format!("unknown item {}", j.item)));
            }
            if !config.annotators.contains(&j.annotator) {
                return Err(corrupt(format!("unknown annotator {}", j.annotator)));
            }
            apply(&mut state, j, &config).map_err(|e| corrupt(e.to_string()))?;
        }

        let log = OpenOptions::new().create(true).append(true).open(log_path).map_err(io_err(log_path))?;
        Ok(Store { items, index, config, state: RwLock::new(state), log_path: log_path.to_path_buf(), log: Mutex::new(log) })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    fn check_annotator(&self, annotator: &str) -> Result<(), StoreError> {
        if self.config.annotators.contains(annotator) {
            Ok(())
        } else {
            Err(StoreError::UnknownAnnotator(annotator.to_string()))
        }
    }

    fn view(&self, state: &State, record: &ItemRecord) -> AnnotationItem {
        let tally = state.tallies.get(&record.id).copied().unwrap_or_default();
        AnnotationItem {
            record: record.clone(),
            correct: tally.correct,
            incorrect: tally.incorrect,
            status: item_status(tally, self.config.panel, self.config.threshold),
        }
    }

    pub fn item(&self, id: &str) -> Result<AnnotationItem, StoreError> {
        let &i = self.index.get(id).ok_or_else(|| StoreError::UnknownItem(id.to_string()))?;
        Ok(self.view(&self.state.read(), &self.items[i]))
    }

    /// The first unresolved item, by id, that `annotator` has not judged.
    pub fn next_item(&self, annotator: &str) -> Result<Option<AnnotationItem>, StoreError> {
        self.check_annotator(annotator)?;
        let state = self.state.read();
        Ok(self
            .items
            .iter()
            .map(|r| self.view(&state, r))
            .find(|v| v.status == ItemStatus::Pending && !state.judged.contains(&(v.record.id.clone(), annotator.to_string()))))
    }

    /// Appends the judgment to the log, then returns the item's new state.
    pub fn submit(&self, annotator: &str, item: &str, verdict: Verdict) -> Result<AnnotationItem, StoreError> {
        self.check_annotator(annotator)?;
        let &i = self.index.get(item).ok_or_else(|| StoreError::UnknownItem(item.to_string()))?;
        let mut state = self.state.write();
        let key = (item.to_string(), annotator.to_string());
        if state.judged.contains(&key) {
            return Err(StoreError::Duplicate { item: key.0, annotator: key.1 });
        }
        let tally = state.tallies.get(item).copied().unwrap_or_default();
        if item_status(tally, self.config.panel, self.config.threshold) != ItemStatus::Pending {
            return Err(StoreError::Resolved(item.to_string()));
        }
        let judgment = HumanJudgment { item: key.0, annotator: key.1, verdict };
        let mut line = serde_json::to_string(&judgment).expect("judgment serializes");
        line.push('\n');
        {
            let mut log = self.log.lock();
            log.write_all(line.as_bytes()).map_err(io_err(&self.log_path))?;
            log.sync_data().map_err(io_err(&self.log_path))?;
        }
        apply(&mut state, judgment, &self.config).expect("checked above");
        Ok(self.view(&state, &self.items[i]))
    }

    pub fn progress(&self) -> Progress {
        let state = self.state.read();
        let mut p = Progress {
            items: self.items.len(),
            pending: 0,
            resolved_correct: 0,
            resolved_incorrect: 0,
            judgments: state.judgments.len(),
            per_annotator: self.config.annotators.iter().map(|a| (a.clone(), 0)).collect(),
        };
        for r in &self.items {
            match self.view(&state, r).status {
                ItemStatus::Pending => p.pending += 1,
                ItemStatus::ResolvedCorrect => p.resolved_correct += 1,
                ItemStatus::ResolvedIncorrect => p.resolved_incorrect += 1,
            }
        }
        for j in &state.judgments {
            *p.per_annotator.entry(j.annotator.clone()).or_default() += 1;
        }
        p
    }

    /// One verdict per item, recomputed from the full log; pending items
    /// are included with status `pending`.
    pub fn export(&self) -> Vec<VerdictRecord> {
        let state = self.state.read();
        let statuses = aggregate_judgments(&state.judgments, self.config.panel, self.config.threshold)
            .expect("log was validated on append");
        self.items
            .iter()
            .map(|r| {
                let tally = state.tallies.get(&r.id).copied().unwrap_or_default();
                VerdictRecord {
                    item: r.id.clone(),
                    document_id: r.document_id.clone(),
                    pair: r.pair,
                    status: statuses.get(&r.id).copied().unwrap_or(ItemStatus::Pending),
                    correct: tally.correct,
                    incorrect: tally.incorrect,
                }
            })
            .collect()
    }

    /// All judgments in log order.
    pub fn judgments(&self) -> Vec<HumanJudgment> {
        self.state.read().judgments.clone()
    }
}

fn apply(state: &mut State, j: HumanJudgment, config: &StoreConfig) -> Result<(), StoreError> {
    let key = (j.item.clone(), j.annotator.clone());
    if state.judged.contains(&key) {
        return Err(StoreError::Duplicate { item: key.0, annotator: key.1 });
    }
    let tally = state.tallies.entry(j.item.clone()).or_default();
    if item_status(*tally, config.panel, config.threshold) != ItemStatus::Pending {
        return Err(StoreError::Resolved(j.item));
    }
    match j.verdict {
        Verdict::Correct => tally.correct += 1,
        Verdict::Incorrect => tally.incorrect += 1,
    }
    state.judged.insert(key);
    state.judgments.push(j);
    Ok(())
}
