//! In-context demonstrations: embed a training corpus, cluster it, pick the
//! document nearest each centroid, draft its step-by-step rationale with the
//! chain and let a person curate it before use.

mod cluster;
mod embed;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chain::{run_document, ChainConfig, DocumentRun};
use crate::dataset::Corpus;
use crate::error::IclError;
use crate::llm::{ChatBackend, ChatMessage};
use crate::prompts::{render, PromptSet};
use crate::text::is_cjk;
use crate::types::{ChainStatus, Document, Step};

pub use cluster::{kmeans, select_candidates, squared_distance, Clustering, Selection, MAX_ITERATIONS};
pub use embed::{EmbeddingProvider, HashEmbedder, HttpEmbedder, HttpEmbedderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub document_id: String,
    pub values: Vec<f64>,
}

/// Text a document is embedded from: its clauses in order.
pub fn document_text(doc: &Document) -> String {
    let sep = match doc.language() {
        crate::types::Language::Zh => "，",
        crate::types::Language::En => ", ",
    };
    doc.clauses().iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(sep)
}

/// One vector per document, in corpus order.
pub fn embed(corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>, IclError> {
    if corpus.is_empty() {
        return Err(IclError::EmptyCorpus);
    }
    let texts: Vec<String> = corpus.documents().iter().map(document_text).collect();
    let values = provider.embed(&texts)?;
    if values.len() != texts.len() {
        return Err(IclError::Provider(format!("asked for {} embeddings, got {}", texts.len(), values.len())));
    }
    let dim = values[0].len();
    corpus
        .documents()
        .iter()
        .zip(values)
        .map(|(doc, values)| {
            if values.len() != dim {
                return Err(IclError::DimensionMismatch { expected: dim, got: values.len(), document: doc.id().into() });
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(IclError::NonFinite(doc.id().into()));
            }
            Ok(EmbeddingVector { document_id: doc.id().to_string(), values })
        })
        .collect()
}

/// The model's answer at each step of a demonstration document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub recognize: String,
    pub locate: String,
    pub analyze: String,
    pub summarize: String,
}

impl Rationale {
    pub fn get(&self, step: Step) -> &str {
        match step {
            Step::Recognize => &self.recognize,
            Step::Locate => &self.locate,
            Step::Analyze => &self.analyze,
            Step::Summarize => &self.summarize,
        }
    }

    /// Builds the per-step texts from a chain run.
    pub fn from_run(run: &DocumentRun) -> Rationale {
        let t = &run.trace;
        let mut keywords: Vec<&str> = Vec::new();
        for c in &t.candidates {
            if !keywords.contains(&c.keyword.as_str()) {
                keywords.push(&c.keyword);
            }
        }
        let located: Vec<String> = t
            .candidates
            .iter()
            .filter(|c| c.is_located())
            .filter_map(|c| c.located_clause.map(|i| format!("clause {i}: {}", c.keyword)))
            .collect();
        let analyses: Vec<String> = t
            .chains
            .iter()
            .filter(|c| !c.rationale.is_empty())
            .map(|c| format!("Emotion clause {}: {}", c.emotion_clause, c.rationale.trim()))
            .collect();
        let pairs: Vec<String> = run.pairs.iter().map(|p| format!("(clause {}, clause {})", p.emotion_index, p.cause_index)).collect();
        let or_none = |v: Vec<String>| if v.is_empty() { "none".to_string() } else { v.join("\n") };
        Rationale {
            recognize: if keywords.is_empty() { "none".into() } else { keywords.join(", ") },
            locate: or_none(located),
            analyze: if analyses.is_empty() { "none".into() } else { analyses.join("\n\n") },
            summarize: or_none(pairs),
        }
    }
}

/// How urgently a drafted demonstration needs a human look.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewFlag {
    /// The draft reproduces the gold pairs; a read-through is still advised.
    Recommended,
    /// The draft's pairs differ from gold and must be corrected.
    Mandatory,
    /// The chain failed on this document; the rationale is partial.
    Incomplete,
}

/// A worked example: document, per-step rationale and final pairs.
/// Stored one per file so it can be edited by hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub document: Document,
    pub rationale: Rationale,
    pub final_pairs: Vec<(usize, usize)>,
    pub curated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn sorted(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut v = pairs.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl Demonstration {
    pub fn matches_gold(&self) -> bool {
        sorted(&self.final_pairs) == sorted(self.document.gold_pairs())
    }

    pub fn load(path: &Path) -> Result<Demonstration, IclError> {
        let file_err = |message: String| IclError::File { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let demo: Demonstration = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        if demo.curated && !demo.matches_gold() {
            return Err(file_err(format!(
                "marked curated but final pairs {:?} differ from gold {:?}",
                demo.final_pairs,
                demo.document.gold_pairs()
            )));
        }
        Ok(demo)
    }

    pub fn save(&self, path: &Path) -> Result<(), IclError> {
        let text = serde_json::to_string_pretty(self).expect("demonstration serializes");
        fs::write(path, text + "\n").map_err(|e| IclError::File { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Runs the chain on each candidate and stores its answers as drafts, in
/// candidate order. Drafts are never curated.
pub fn draft_rationales(
    candidates: &[Document],
    cfg: &ChainConfig,
    backend: &dyn ChatBackend,
) -> Result<Vec<Demonstration>, IclError> {
    candidates
        .iter()
        .map(|doc| {
            if !doc.is_labeled() {
                return Err(IclError::Unlabeled(doc.id().to_string()));
            }
            let run = run_document(doc, cfg, backend).map_err(|e| IclError::Provider(e.to_string()))?;
            let final_pairs: Vec<(usize, usize)> = run.pairs.iter().map(|p| p.indices()).collect();
            let mut demo = Demonstration {
                document: doc.clone(),
                rationale: Rationale::from_run(&run),
                final_pairs,
                curated: false,
                review: None,
                note: None,
            };
            demo.review = Some(if let Some(f) = &run.trace.failure {
                demo.note = Some(f.clone());
                ReviewFlag::Incomplete
            } else if demo.matches_gold() {
                ReviewFlag::Recommended
            } else {
                ReviewFlag::Mandatory
            });
            if run.trace.chains.iter().any(|c| c.status == ChainStatus::Pruned) && demo.note.is_none() {
                demo.note = Some("some branches were pruned; check the analysis text".into());
            }
            Ok(demo)
        })
        .collect()
}

/// Marks an edited draft as curated. Its final pairs must equal the gold
/// pairs.
pub fn curate(mut demo: Demonstration) -> Result<Demonstration, IclError> {
    if !demo.matches_gold() {
        return Err(IclError::CurationMismatch {
            document: demo.document.id().to_string(),
            final_pairs: demo.final_pairs.clone(),
            gold: demo.document.gold_pairs().to_vec(),
        });
    }
    demo.curated = true;
    demo.review = None;
    Ok(demo)
}

/// Demonstration files in `dir`, ordered by file name.
pub fn demo_files(dir: &Path) -> Result<Vec<PathBuf>, IclError> {
    let file_err = |e: std::io::Error| IclError::File { path: dir.to_path_buf(), message: e.to_string() };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(file_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_demonstrations(dir: &Path) -> Result<Vec<Demonstration>, IclError> {
    demo_files(dir)?.iter().map(|p| Demonstration::load(p)).collect()
}

/// Writes `demo-01.json`, `demo-02.json`, ... in selection order.
pub fn save_demonstrations(dir: &Path, demos: &[Demonstration]) -> Result<Vec<PathBuf>, IclError> {
    fs::create_dir_all(dir).map_err(|e| IclError::File { path: dir.to_path_buf(), message: e.to_string() })?;
    demos
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let path = dir.join(format!("demo-{:02}.json", i + 1));
            d.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Rough token count: one per CJK character, one per four other
/// non-space characters.
pub fn estimate_tokens(text: &str) -> usize {
    let (cjk, other) = text.chars().filter(|c| !c.is_whitespace()).fold((0usize, 0usize), |(a, b), c| {
        if is_cjk(c) {
            (a + 1, b)
        } else {
            (a, b + 1)
        }
    });
    cjk + other.div_ceil(4)
}

fn demo_messages(n: usize, demo: &Demonstration, step: Step, prompts: &PromptSet) -> [ChatMessage; 2] {
    let block = render(
        &prompts.demo_block,
        &[
            ("n", &n.to_string()),
            ("document", &demo.document.numbered_text()),
            ("instruction", prompts.demo_instruction(step)),
        ],
    );
    [ChatMessage::user(block), ChatMessage::assistant(demo.rationale.get(step))]
}

/// Places one example exchange per demonstration, in the given order, in
/// front of the task messages for `step`. With no demonstrations the task
/// comes back unchanged.
pub fn assemble_prompt(
    demos: &[Demonstration],
    step: Step,
    task: Vec<ChatMessage>,
    prompts: &PromptSet,
    token_budget: Option<usize>,
) -> Result<Vec<ChatMessage>, IclError> {
    if let Some((index, d)) = demos.iter().enumerate().find(|(_, d)| !d.curated) {
        return Err(IclError::Uncurated { index: index + 1, document: d.document.id().to_string() });
    }
    if demos.is_empty() && token_budget.is_none() {
        return Ok(task);
    }
    let mut messages = Vec::with_capacity(demos.len() * 2 + task.len());
    let mut demo_cost = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let pair = demo_messages(i + 1, d, step, prompts);
        demo_cost.push(pair.iter().map(|m| estimate_tokens(&m.content)).sum::<usize>());
        messages.extend(pair);
    }
    messages.extend(task);
    if let Some(budget) = token_budget {
        let needed: usize = messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        if needed > budget {
            let Some((drop, _)) = demo_cost.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
                return Err(IclError::BudgetExceeded { needed, budget, drop: 0, document: "(task prompt)".into() });
            };
            return Err(IclError::BudgetExceeded {
                needed,
                budget,
                drop: drop + 1,
                document: demos[drop].document.id().to_string(),
            });
        }
    }
    Ok(messages)
}

/// Checks that `demos` holds exactly `shots` curated demonstrations.
pub fn check_shots(demos: &[Demonstration], shots: usize) -> Result<(), IclError> {
    if demos.len() != shots {
        return Err(IclError::ShotMismatch { expected: shots, got: demos.len() });
    }
    match demos.iter().enumerate().find(|(_, d)| !d.curated) {
        Some((i, d)) => Err(IclError::Uncurated { index: i + 1, document: d.document.id().to_string() }),
        None => Ok(()),
    }
}
