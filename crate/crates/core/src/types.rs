//! Documents, clauses, emotion-cause pairs and chain traces.
//!
//! Clause indices are 1-based everywhere: clause `1` is the first clause of a
//! document. Raw records with 0-based or gapped indexing are renumbered by
//! [`validate_document`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::text::normalize_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::Zh => f.write_str("zh"),
            Language::En => f.write_str("en"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub index: usize,
    pub text: String,
}

/// An ordered list of clauses with optional gold emotion-cause labels.
///
/// Only [`validate_document`] constructs one, so indices are always
/// `1..=N` and every gold pair is in range. Serializes as the canonical
/// corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRecord", into = "DocumentRecord")]
pub struct Document {
    id: String,
    language: Language,
    clauses: Vec<Clause>,
    gold_pairs: Vec<(usize, usize)>,
}

impl Document {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn gold_pairs(&self) -> &[(usize, usize)] {
        &self.gold_pairs
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.gold_pairs.is_empty()
    }

    /// Text of the 1-based clause `index`.
    pub fn clause_text(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.clauses.get(i))
            .map(|c| c.text.as_str())
    }

    pub fn contains_index(&self, index: usize) -> bool {
        (1..=self.clauses.len()).contains(&index)
    }

    /// Builds the pair with clause texts filled in, or `None` when either
    /// index falls outside the document.
    pub fn pair(&self, emotion_index: usize, cause_index: usize) -> Option<EmotionCausePair> {
        Some(EmotionCausePair {
            emotion_index,
            cause_index,
            emotion_text: self.clause_text(emotion_index)?.to_string(),
            cause_text: self.clause_text(cause_index)?.to_string(),
            provenance: None,
        })
    }

    /// Gold labels as full pairs.
    pub fn gold(&self) -> Vec<EmotionCausePair> {
        self.gold_pairs
            .iter()
            .filter_map(|&(e, c)| self.pair(e, c))
            .collect()
    }

    /// Clauses rendered one per line as `N. text`.
    pub fn numbered_text(&self) -> String {
        self.clauses
            .iter()
            .map(|c| format!("{}. {}", c.index, c.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Same document with different gold labels; used by tests and the
    /// demonstration curation flow.
    pub fn with_gold_pairs(&self, pairs: Vec<(usize, usize)>) -> Result<Document, ValidationError> {
        let mut raw = RawDocument::from(self);
        raw.pairs = pairs.into_iter().map(|(e, c)| (e as i64, c as i64)).collect();
        validate_document(raw)
    }
}

/// Canonical serialized form: `{id, language, clauses: [text], pairs: [[e, c]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Language>,
    pub clauses: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<(i64, i64)>,
}

impl From<Document> for DocumentRecord {
    fn from(doc: Document) -> Self {
        DocumentRecord {
            id: doc.id,
            language: Some(doc.language),
            clauses: doc.clauses.into_iter().map(|c| c.text).collect(),
            pairs: doc.gold_pairs.iter().map(|&(e, c)| (e as i64, c as i64)).collect(),
        }
    }
}

impl From<DocumentRecord> for RawDocument {
    fn from(rec: DocumentRecord) -> Self {
        RawDocument {
            id: rec.id,
            language: rec.language,
            clauses: rec.clauses.into_iter().map(|text| RawClause { index: None, text }).collect(),
            pairs: rec.pairs,
        }
    }
}

impl TryFrom<DocumentRecord> for Document {
    type Error = ValidationError;

    fn try_from(rec: DocumentRecord) -> Result<Self, Self::Error> {
        validate_document(rec.into())
    }
}

/// A clause as it arrives from a source file, before renumbering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawClause {
    pub index: Option<i64>,
    pub text: String,
}

/// An unvalidated document record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub language: Option<Language>,
    pub clauses: Vec<RawClause>,
    /// Gold pairs in the source's own indexing.
    pub pairs: Vec<(i64, i64)>,
}

impl From<&Document> for RawDocument {
    fn from(doc: &Document) -> Self {
        RawDocument {
            id: doc.id.clone(),
            language: Some(doc.language),
            clauses: doc
                .clauses
                .iter()
                .map(|c| RawClause { index: Some(c.index as i64), text: c.text.clone() })
                .collect(),
            pairs: doc.gold_pairs.iter().map(|&(e, c)| (e as i64, c as i64)).collect(),
        }
    }
}

/// Checks a raw record and renumbers its clauses to `1..=N`.
///
/// Explicit source indices may start at 0 or contain gaps; they are mapped
/// onto positions in source order and gold pairs are translated through the
/// same map. Untagged records default to the script detected in the text.
pub fn validate_document(raw: RawDocument) -> Result<Document, ValidationError> {
    if raw.id.trim().is_empty() {
        return Err(ValidationError::EmptyId);
    }
    if raw.clauses.is_empty() {
        return Err(ValidationError::EmptyDocument { id: raw.id });
    }
    let explicit = raw.clauses.iter().filter(|c| c.index.is_some()).count();
    if explicit != 0 && explicit != raw.clauses.len() {
        return Err(ValidationError::MixedIndexing { id: raw.id });
    }

    // source index -> 1-based position
    let mut index_map: BTreeMap<i64, usize> = BTreeMap::new();
    let mut clauses = Vec::with_capacity(raw.clauses.len());
    for (pos, clause) in raw.clauses.iter().enumerate() {
        let position = pos + 1;
        let source = clause.index.unwrap_or(position as i64);
        if index_map.insert(source, position).is_some() {
            return Err(ValidationError::DuplicateClauseIndex { id: raw.id, index: source });
        }
        let text = clause.text.split_whitespace().collect::<Vec<_>>().join(" ");
        if normalize_text(&text).is_empty() {
            return Err(ValidationError::EmptyClause { id: raw.id, index: source });
        }
        clauses.push(Clause { index: position, text });
    }
    let mut ordered = index_map.keys().copied().collect::<Vec<_>>();
    let in_source_order: Vec<i64> = raw
        .clauses
        .iter()
        .enumerate()
        .map(|(p, c)| c.index.unwrap_or(p as i64 + 1))
        .collect();
    ordered.sort_unstable();
    if ordered != in_source_order {
        return Err(ValidationError::UnorderedClauses { id: raw.id });
    }

    let mut seen = HashSet::new();
    let mut gold_pairs = Vec::with_capacity(raw.pairs.len());
    for &(e, c) in &raw.pairs {
        let (Some(&emotion), Some(&cause)) = (index_map.get(&e), index_map.get(&c)) else {
            return Err(ValidationError::PairOutOfRange { id: raw.id, pair: (e, c), clauses: clauses.len() });
        };
        if !seen.insert((emotion, cause)) {
            return Err(ValidationError::DuplicatePair { id: raw.id, pair: (e, c) });
        }
        gold_pairs.push((emotion, cause));
    }

    let language = raw.language.unwrap_or_else(|| {
        let all: String = clauses.iter().map(|c| c.text.as_str()).collect();
        detect_language(&all)
    });

    Ok(Document { id: raw.id, language, clauses, gold_pairs })
}

/// Chinese when at least a third of the visible characters are CJK.
pub fn detect_language(text: &str) -> Language {
    if crate::text::cjk_ratio(text) >= 1.0 / 3.0 {
        Language::Zh
    } else {
        Language::En
    }
}

/// Which DECC step produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Recognize,
    Locate,
    Analyze,
    Summarize,
}

impl Step {
    pub const ALL: [Step; 4] = [Step::Recognize, Step::Locate, Step::Analyze, Step::Summarize];

    /// 1-based position in the chain.
    pub fn number(self) -> u8 {
        match self {
            Step::Recognize => 1,
            Step::Locate => 2,
            Step::Analyze => 3,
            Step::Summarize => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Step::Recognize => "recognize",
            Step::Locate => "locate",
            Step::Analyze => "analyze",
            Step::Summarize => "summarize",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a predicted pair came from and the model's own wording of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Step that emitted the pair; `None` for the single-prompt baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<Step>,
    /// Analysis chain the pair descends from, when produced by the chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_span: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause_span: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionCausePair {
    pub emotion_index: usize,
    pub cause_index: usize,
    pub emotion_text: String,
    pub cause_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl EmotionCausePair {
    pub fn indices(&self) -> (usize, usize) {
        (self.emotion_index, self.cause_index)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Whether both indices and texts agree with `doc`.
    pub fn is_well_formed(&self, doc: &Document) -> bool {
        doc.clause_text(self.emotion_index) == Some(self.emotion_text.as_str())
            && doc.clause_text(self.cause_index) == Some(self.cause_text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneReason {
    NotLocated,
    NoAttributableCause,
    NotASingleClause,
    ParseFailure,
}

impl fmt::Display for PruneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneReason::NotLocated => "not-located",
            PruneReason::NoAttributableCause => "no-attributable-cause",
            PruneReason::NotASingleClause => "not-a-single-clause",
            PruneReason::ParseFailure => "parse-failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub branch: String,
    /// Step at which the branch stopped: 2, 3 or 4.
    pub step: u8,
    pub reason: PruneReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    Recognized,
    Located,
    Pruned,
}

/// A recognized emotional keyword and the result of locating it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionCandidate {
    /// Branch id, `e1`, `e2`, ... with `.n` suffixes for literal fan-out.
    pub branch: String,
    pub keyword: String,
    pub status: CandidateStatus,
    pub located_clause: Option<usize>,
    /// The located clause does not literally contain the keyword.
    pub implicit: bool,
}

impl EmotionCandidate {
    pub fn recognized(branch: impl Into<String>, keyword: impl Into<String>) -> Self {
        EmotionCandidate {
            branch: branch.into(),
            keyword: keyword.into(),
            status: CandidateStatus::Recognized,
            located_clause: None,
            implicit: false,
        }
    }

    pub fn is_located(&self) -> bool {
        self.status == CandidateStatus::Located
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainStatus {
    /// Rationale produced but no single clause committed to.
    Open,
    Attributed,
    Pruned,
}

/// Step-3 rationale for one emotion clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisChain {
    /// Branch id, `ac1`, `ac2`, ...
    pub branch: String,
    pub emotion_clause: usize,
    /// Keywords whose branches reach this clause.
    pub keywords: Vec<String>,
    pub rationale: String,
    pub attributed_clause: Option<usize>,
    pub status: ChainStatus,
}

/// One model exchange, kept for auditing and demonstration drafting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    /// `None` for the single-prompt baseline.
    pub step: Option<Step>,
    pub branch: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracedPair {
    pub chain: String,
    pub emotion_index: usize,
    pub cause_index: usize,
}

/// Branch counts at each stage, fan-out included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub recognized: usize,
    pub located: usize,
    pub emotion_clauses: usize,
    pub chains: usize,
    pub attributed: usize,
    pub pairs: usize,
}

impl BranchCounts {
    /// The chain only ever prunes.
    pub fn is_monotone(&self) -> bool {
        self.pairs <= self.attributed
            && self.attributed <= self.chains
            && self.chains <= self.located
            && self.emotion_clauses <= self.located
            && self.located <= self.recognized
    }
}

/// Everything one document's run did, in step order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub document_id: String,
    pub variant: String,
    pub candidates: Vec<EmotionCandidate>,
    pub emotion_clauses: Vec<usize>,
    pub chains: Vec<AnalysisChain>,
    pub pairs: Vec<TracedPair>,
    pub prunes: Vec<PruneEvent>,
    pub exchanges: Vec<Exchange>,
    /// Document-level failure (unparseable recognition, backend error).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ChainTrace {
    pub fn new(document_id: impl Into<String>, variant: impl Into<String>) -> Self {
        ChainTrace { document_id: document_id.into(), variant: variant.into(), ..Default::default() }
    }

    pub fn counts(&self) -> BranchCounts {
        BranchCounts {
            recognized: self.candidates.len(),
            located: self
                .candidates
                .iter()
                .filter(|c| c.status != CandidateStatus::Pruned)
                .count(),
            emotion_clauses: self.emotion_clauses.len(),
            chains: self.chains.len(),
            attributed: self
                .chains
                .iter()
                .filter(|c| c.status != ChainStatus::Pruned)
                .count(),
            pairs: self.pairs.len(),
        }
    }

    pub fn prune(&mut self, branch: impl Into<String>, step: Step, reason: PruneReason, detail: Option<String>) {
        self.prunes.push(PruneEvent { branch: branch.into(), step: step.number(), reason, detail });
    }

    /// Prune events for the branch, if any.
    pub fn prune_of(&self, branch: &str) -> Option<&PruneEvent> {
        self.prunes.iter().find(|p| p.branch == branch)
    }

    pub fn candidate(&self, keyword: &str) -> Option<&EmotionCandidate> {
        let wanted = normalize_text(keyword);
        self.candidates.iter().find(|c| normalize_text(&c.keyword) == wanted)
    }

    /// Checks the structural invariants: monotone counts, every pair backed
    /// by one non-pruned chain over a located emotion clause, and no pair
    /// from a pruned branch.
    pub fn check(&self, doc: &Document) -> Result<(), String> {
        let counts = self.counts();
        if !counts.is_monotone() {
            return Err(format!("branch counts not monotone: {counts:?}"));
        }
        for c in &self.candidates {
            match c.status {
                CandidateStatus::Located => {
                    let Some(idx) = c.located_clause else {
                        return Err(format!("{} located without clause", c.branch));
                    };
                    if !doc.contains_index(idx) {
                        return Err(format!("{} located at invalid clause {idx}", c.branch));
                    }
                    if !c.implicit && !crate::text::contains_normalized(doc.clause_text(idx).unwrap_or(""), &c.keyword) {
                        return Err(format!("{} marked explicit but clause {idx} lacks the keyword", c.branch));
                    }
                }
                CandidateStatus::Pruned if self.prune_of(&c.branch).is_none() => {
                    return Err(format!("{} pruned without a prune event", c.branch));
                }
                _ => {}
            }
        }
        for chain in &self.chains {
            if !doc.contains_index(chain.emotion_clause) {
                return Err(format!("{} analyses invalid clause {}", chain.branch, chain.emotion_clause));
            }
            if chain.status != ChainStatus::Pruned && chain.rationale.trim().is_empty() {
                return Err(format!("{} has an empty rationale", chain.branch));
            }
            if chain.status == ChainStatus::Attributed
                && !chain.attributed_clause.is_some_and(|i| doc.contains_index(i))
            {
                return Err(format!("{} attributed without a valid clause", chain.branch));
            }
        }
        for pair in &self.pairs {
            let owners: Vec<_> = self.chains.iter().filter(|c| c.branch == pair.chain).collect();
            let [chain] = owners.as_slice() else {
                return Err(format!("pair {:?} does not trace to exactly one chain", (pair.emotion_index, pair.cause_index)));
            };
            if chain.status == ChainStatus::Pruned || self.prune_of(&chain.branch).is_some() {
                return Err(format!("pair emitted from pruned chain {}", chain.branch));
            }
            if chain.emotion_clause != pair.emotion_index {
                return Err(format!("pair emotion {} differs from its chain's clause", pair.emotion_index));
            }
            if !self.emotion_clauses.contains(&pair.emotion_index) {
                return Err(format!("pair emotion {} not in the emotion clause set", pair.emotion_index));
            }
            if !doc.contains_index(pair.emotion_index) || !doc.contains_index(pair.cause_index) {
                return Err(format!("pair {:?} out of range", (pair.emotion_index, pair.cause_index)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(clauses: &[&str], pairs: &[(i64, i64)]) -> RawDocument {
        RawDocument {
            id: "d".into(),
            language: Some(Language::En),
            clauses: clauses.iter().map(|t| RawClause { index: None, text: t.to_string() }).collect(),
            pairs: pairs.to_vec(),
        }
    }

    #[test]
    fn seven_clause_document_with_two_pairs() {
        let doc = validate_document(raw(&["a", "b", "c", "d", "e", "f", "g"], &[(2, 2), (5, 4)])).unwrap();
        assert_eq!(doc.len(), 7);
        assert_eq!(doc.gold_pairs(), &[(2, 2), (5, 4)]);
    }

    #[test]
    fn rejects_empty_document() {
        let err = validate_document(raw(&[], &[])).unwrap_err();
        assert!(err.to_string().contains("empty document"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_pair() {
        let err = validate_document(raw(&["a", "b", "c", "d", "e", "f", "g"], &[(9, 4)])).unwrap_err();
        assert!(err.to_string().contains("pair index out of range"), "{err}");
        assert!(err.to_string().contains("(9, 4)"));
    }

    #[test]
    fn rejects_duplicate_index() {
        let mut r = raw(&["a", "b"], &[]);
        r.clauses[0].index = Some(1);
        r.clauses[1].index = Some(1);
        let err = validate_document(r).unwrap_err();
        assert!(err.to_string().contains("duplicate clause index"), "{err}");
    }

    #[test]
    fn renumbers_zero_based_and_gapped_sources() {
        let mut r = raw(&["a", "b", "c"], &[(0, 0), (2, 1)]);
        for (i, c) in r.clauses.iter_mut().enumerate() {
            c.index = Some(i as i64);
        }
        let doc = validate_document(r).unwrap();
        assert_eq!(doc.gold_pairs(), &[(1, 1), (3, 2)]);

        let mut r = raw(&["a", "b", "c"], &[(10, 4)]);
        for (c, idx) in r.clauses.iter_mut().zip([2, 4, 10]) {
            c.index = Some(idx);
        }
        let doc = validate_document(r).unwrap();
        assert_eq!(doc.clauses().iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(doc.gold_pairs(), &[(3, 2)]);
    }

    #[test]
    fn validation_is_idempotent() {
        let doc = validate_document(raw(&[" a  b ", "c"], &[(2, 1)])).unwrap();
        let again = validate_document(RawDocument::from(&doc)).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn untagged_language_is_detected() {
        let mut r = raw(&["我激动得不能自已"], &[]);
        r.language = None;
        assert_eq!(validate_document(r).unwrap().language(), Language::Zh);
    }

    #[test]
    fn pair_texts_follow_indices() {
        let doc = validate_document(raw(&["a", "b"], &[(2, 1)])).unwrap();
        let pair = doc.pair(2, 1).unwrap();
        assert_eq!((pair.emotion_text.as_str(), pair.cause_text.as_str()), ("b", "a"));
        assert!(pair.is_well_formed(&doc));
        assert!(doc.pair(3, 1).is_none());
    }
}
