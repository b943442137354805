//! Pair-level precision, recall and F1, subset scores, the de-bias drop
//! ratio and human-judgment aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::chain::DocumentRun;
use crate::dataset::{filter_multipair, Corpus};
use crate::error::EvalError;
use crate::text::{normalize_text, token_jaccard};
use crate::types::{Document, EmotionCausePair, Provenance};

/// How a predicted pair is compared with a gold pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MatchMode {
    ExactIndex,
    NormalizedText,
    /// Token-Jaccard of at least `threshold` on both slots.
    FuzzyOverlap { threshold: f64 },
    /// Annotator majority verdicts decide.
    HumanJudged,
}

impl MatchMode {
    pub fn fuzzy(threshold: f64) -> Result<MatchMode, EvalError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(EvalError::InvalidFuzzyThreshold(threshold));
        }
        Ok(MatchMode::FuzzyOverlap { threshold })
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchMode::ExactIndex => f.write_str("exact"),
            MatchMode::NormalizedText => f.write_str("normalized"),
            MatchMode::FuzzyOverlap { threshold } => write!(f, "fuzzy:{threshold}"),
            MatchMode::HumanJudged => f.write_str("human"),
        }
    }
}

impl FromStr for MatchMode {
    type Err = String;

    /// `exact`, `normalized`, `fuzzy`, `fuzzy:<threshold>` or `human`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" | "exact-index" => Ok(MatchMode::ExactIndex),
            "normalized" | "normalized-text" => Ok(MatchMode::NormalizedText),
            "fuzzy" | "fuzzy-overlap" => Ok(MatchMode::FuzzyOverlap { threshold: 0.5 }),
            "human" | "human-judged" => Ok(MatchMode::HumanJudged),
            other => match other.strip_prefix("fuzzy:") {
                Some(t) => {
                    let t: f64 = t.parse().map_err(|_| format!("bad fuzzy threshold {t:?}"))?;
                    MatchMode::fuzzy(t).map_err(|e| e.to_string())
                }
                None => Err(format!("unknown match mode {other:?}")),
            },
        }
    }
}

/// One document's predictions as written by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub document_id: String,
    pub pairs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    /// The model's own wording of each cause, aligned with `pairs`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cause_spans: Vec<Option<String>>,
}

impl Prediction {
    pub fn from_run(run: &DocumentRun, trace_ref: Option<String>) -> Prediction {
        let spans: Vec<Option<String>> =
            run.pairs.iter().map(|p| p.provenance.as_ref().and_then(|v| v.cause_span.clone())).collect();
        Prediction {
            document_id: run.trace.document_id.clone(),
            pairs: run.pairs.iter().map(|p| p.indices()).collect(),
            trace_ref,
            cause_spans: if spans.iter().any(Option::is_some) { spans } else { Vec::new() },
        }
    }

    /// Full pairs against `doc`; errors on an index outside the document.
    pub fn resolve(&self, doc: &Document) -> Result<Vec<EmotionCausePair>, EvalError> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, &(e, c))| {
                let pair = doc
                    .pair(e, c)
                    .ok_or_else(|| EvalError::PairOutOfRange { document: self.document_id.clone(), pair: (e, c) })?;
                Ok(match self.cause_spans.get(i).cloned().flatten() {
                    Some(span) => pair.with_provenance(Provenance {
                        step: None,
                        chain: None,
                        emotion_span: None,
                        cause_span: Some(span),
                    }),
                    None => pair,
                })
            })
            .collect()
    }
}

/// Resolution state of a judged item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemStatus {
    Pending,
    ResolvedCorrect,
    ResolvedIncorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanJudgment {
    pub item: String,
    pub annotator: String,
    pub verdict: Verdict,
}

/// Verdict counts and status for one item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub incorrect: usize,
}

/// Status under "correct when at least `threshold` of `panel` say so".
/// An item resolves as soon as the outcome can no longer change.
pub fn item_status(tally: Tally, panel: usize, threshold: usize) -> ItemStatus {
    if tally.correct >= threshold {
        ItemStatus::ResolvedCorrect
    } else if tally.incorrect > panel - threshold {
        ItemStatus::ResolvedIncorrect
    } else {
        ItemStatus::Pending
    }
}

pub fn check_panel(panel: usize, threshold: usize) -> Result<(), EvalError> {
    if threshold == 0 || threshold > panel {
        return Err(EvalError::InvalidThreshold { threshold, panel });
    }
    Ok(())
}

/// Per-item tallies, rejecting a second verdict from one annotator and
/// more verdicts than the panel has members.
pub fn tally_judgments(judgments: &[HumanJudgment], panel: usize) -> Result<BTreeMap<String, Tally>, EvalError> {
    let mut seen = HashSet::new();
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    for j in judgments {
        if !seen.insert((j.item.as_str(), j.annotator.as_str())) {
            return Err(EvalError::DuplicateJudgment { item: j.item.clone(), annotator: j.annotator.clone() });
        }
        let t = tallies.entry(j.item.clone()).or_default();
        match j.verdict {
            Verdict::Correct => t.correct += 1,
            Verdict::Incorrect => t.incorrect += 1,
        }
        if t.correct + t.incorrect > panel {
            return Err(EvalError::PanelOverflow { item: j.item.clone(), count: t.correct + t.incorrect, panel });
        }
    }
    Ok(tallies)
}

pub fn aggregate_judgments(
    judgments: &[HumanJudgment],
    panel: usize,
    threshold: usize,
) -> Result<BTreeMap<String, ItemStatus>, EvalError> {
    check_panel(panel, threshold)?;
    Ok(tally_judgments(judgments, panel)?
        .into_iter()
        .map(|(item, t)| (item, item_status(t, panel, threshold)))
        .collect())
}

/// Exported verdict for one judged pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub item: String,
    pub document_id: String,
    pub pair: (usize, usize),
    pub status: ItemStatus,
    pub correct: usize,
    pub incorrect: usize,
}

/// Verdicts keyed by document and predicted pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictTable {
    verdicts: HashMap<(String, (usize, usize)), ItemStatus>,
}

impl VerdictTable {
    pub fn new(records: impl IntoIterator<Item = VerdictRecord>) -> Self {
        VerdictTable { verdicts: records.into_iter().map(|r| ((r.document_id, r.pair), r.status)).collect() }
    }

    pub fn get(&self, document: &str, pair: (usize, usize)) -> Option<ItemStatus> {
        self.verdicts.get(&(document.to_string(), pair)).copied()
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }
}

fn slot_overlap(pred_text: &str, span: Option<&str>, gold_text: &str) -> f64 {
    let by_clause = token_jaccard(pred_text, gold_text);
    span.map_or(by_clause, |s| by_clause.max(token_jaccard(s, gold_text)))
}

/// Whether `pred` matches the gold pair `gold` of `doc` under an automatic
/// mode. Human-judged mode needs verdicts; see [`score_with_verdicts`].
pub fn match_pair(pred: &EmotionCausePair, gold: (usize, usize), doc: &Document, mode: MatchMode) -> Result<bool, EvalError> {
    let gold_pair = doc
        .pair(gold.0, gold.1)
        .ok_or_else(|| EvalError::PairOutOfRange { document: doc.id().to_string(), pair: gold })?;
    Ok(match mode {
        MatchMode::ExactIndex => pred.indices() == gold,
        MatchMode::NormalizedText => {
            normalize_text(&pred.emotion_text) == normalize_text(&gold_pair.emotion_text)
                && normalize_text(&pred.cause_text) == normalize_text(&gold_pair.cause_text)
        }
        MatchMode::FuzzyOverlap { threshold } => {
            let prov = pred.provenance.as_ref();
            let e = slot_overlap(&pred.emotion_text, prov.and_then(|p| p.emotion_span.as_deref()), &gold_pair.emotion_text);
            let c = slot_overlap(&pred.cause_text, prov.and_then(|p| p.cause_span.as_deref()), &gold_pair.cause_text);
            e >= threshold && c >= threshold
        }
        MatchMode::HumanJudged => {
            return Err(EvalError::Pending { document: doc.id().to_string(), pair: pred.indices() });
        }
    })
}

fn round2<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((x * 100.0).round() / 100.0)
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(serialize_with = "round2")]
    pub precision: f64,
    #[serde(serialize_with = "round2")]
    pub recall: f64,
    #[serde(serialize_with = "round2")]
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(true_positive: usize, predicted: usize, gold: usize) -> Metrics {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        let precision = pct(true_positive, predicted);
        let recall = pct(true_positive, gold);
        Metrics { precision, recall, f1: f1(precision, recall) }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMatch {
    pub predicted: (usize, usize),
    /// Gold pair credited to this prediction.
    pub gold: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub document_id: String,
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
    pub matches: Vec<PairMatch>,
    pub missed: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_mode: MatchMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
    pub documents: Vec<DocumentScore>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.metrics.precision
    }

    pub fn recall(&self) -> f64 {
        self.metrics.recall
    }

    pub fn f1(&self) -> f64 {
        self.metrics.f1
    }
}

fn index_predictions<'a>(
    predictions: &'a [Prediction],
    corpus: &Corpus,
) -> Result<HashMap<&'a str, &'a Prediction>, EvalError> {
    let mut by_doc = HashMap::new();
    for p in predictions {
        if corpus.get(&p.document_id).is_none() {
            return Err(EvalError::UnknownDocument(p.document_id.clone()));
        }
        if by_doc.insert(p.document_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicateDocument(p.document_id.clone()));
        }
    }
    Ok(by_doc)
}

/// Micro-averaged scores over every pair in `corpus`.
///
/// Each prediction, in order, takes the first still-unmatched gold pair it
/// matches, so no gold pair is credited twice. Documents without a
/// prediction count all their gold pairs as missed.
pub fn score(predictions: &[Prediction], corpus: &Corpus, mode: MatchMode) -> Result<EvalReport, EvalError> {
    score_inner(predictions, corpus, mode, None)
}

/// [`score`] in human-judged mode: a predicted pair counts as correct when
/// its verdict resolved correct. A missing or pending verdict is an error.
pub fn score_with_verdicts(predictions: &[Prediction], corpus: &Corpus, verdicts: &VerdictTable) -> Result<EvalReport, EvalError> {
    score_inner(predictions, corpus, MatchMode::HumanJudged, Some(verdicts))
}

fn score_inner(
    predictions: &[Prediction],
    corpus: &Corpus,
    mode: MatchMode,
    verdicts: Option<&VerdictTable>,
) -> Result<EvalReport, EvalError> {
    if let MatchMode::FuzzyOverlap { threshold } = mode {
        MatchMode::fuzzy(threshold)?;
    }
    let by_doc = index_predictions(predictions, corpus)?;
    let mut documents = Vec::with_capacity(corpus.len());
    let (mut tp, mut predicted, mut gold) = (0, 0, 0);
    for doc in corpus.documents() {
        let preds = match by_doc.get(doc.id()) {
            Some(p) => p.resolve(doc)?,
            None => Vec::new(),
        };
        let gold_pairs = doc.gold_pairs();
        let mut used = vec![false; gold_pairs.len()];
        let mut matches = Vec::with_capacity(preds.len());
        for pred in &preds {
            let credited = match (mode, verdicts) {
                (MatchMode::HumanJudged, Some(table)) => {
                    match table.get(doc.id(), pred.indices()) {
                        Some(ItemStatus::ResolvedCorrect) => {
                            // prefer the gold pair it names, then one sharing its emotion clause
                            let free = |g: &(usize, usize), i: usize| !used[i] && *g == pred.indices();
                            let same_emotion = |g: &(usize, usize), i: usize| !used[i] && g.0 == pred.emotion_index;
                            let pick = gold_pairs
                                .iter()
                                .enumerate()
                                .find(|(i, g)| free(g, *i))
                                .or_else(|| gold_pairs.iter().enumerate().find(|(i, g)| same_emotion(g, *i)))
                                .or_else(|| gold_pairs.iter().enumerate().find(|(i, _)| !used[*i]));
                            pick.map(|(i, _)| i)
                        }
                        Some(ItemStatus::ResolvedIncorrect) => None,
                        Some(ItemStatus::Pending) | None => {
                            return Err(EvalError::Pending { document: doc.id().to_string(), pair: pred.indices() })
                        }
                    }
                }
                _ => {
                    let mut hit = None;
                    for (i, g) in gold_pairs.iter().enumerate() {
                        if !used[i] && match_pair(pred, *g, doc, mode)? {
                            hit = Some(i);
                            break;
                        }
                    }
                    hit
                }
            };
            if let Some(i) = credited {
                used[i] = true;
            }
            matches.push(PairMatch { predicted: pred.indices(), gold: credited.map(|i| gold_pairs[i]) });
        }
        let doc_tp = used.iter().filter(|u| **u).count();
        tp += doc_tp;
        predicted += preds.len();
        gold += gold_pairs.len();
        documents.push(DocumentScore {
            document_id: doc.id().to_string(),
            true_positive: doc_tp,
            predicted: preds.len(),
            gold: gold_pairs.len(),
            matches,
            missed: gold_pairs.iter().zip(&used).filter(|(_, u)| !**u).map(|(g, _)| *g).collect(),
        });
    }
    Ok(EvalReport {
        match_mode: mode,
        subset: None,
        metrics: Metrics::from_counts(tp, predicted, gold),
        true_positive: tp,
        predicted,
        gold,
        documents,
    })
}

/// [`score`] restricted to documents with at least two gold pairs.
pub fn multipair_score(predictions: &[Prediction], corpus: &Corpus, mode: MatchMode) -> Result<EvalReport, EvalError> {
    index_predictions(predictions, corpus)?;
    let subset = filter_multipair(corpus);
    let kept: Vec<Prediction> = predictions.iter().filter(|p| subset.get(&p.document_id).is_some()).cloned().collect();
    let mut report = score(&kept, &subset, mode)?;
    report.subset = Some("multi-pair".into());
    Ok(report)
}

/// Percentage change of F1 from the original to the rebalanced corpus.
pub fn debias_drop(f1_original: f64, f1_rebalanced: f64) -> Result<f64, EvalError> {
    if f1_original.is_nan() || f1_original <= 0.0 {
        return Err(EvalError::ZeroBaseline(f1_original));
    }
    Ok(100.0 * (f1_rebalanced - f1_original) / f1_original)
}

/// Rounds to the two decimals reports are printed with.
pub fn round2_value(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
