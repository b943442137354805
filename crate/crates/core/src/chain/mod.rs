//! The four-step extraction chain and the single-prompt baseline.
//!
//! A document runs Recognize → Locate → Analyze → Summarize. Each step may
//! prune a branch; pruned branches never emit pairs and every prune is
//! recorded in the [`ChainTrace`]. Any step can be switched off, in which
//! case a bridging prompt covers its function.

pub mod parse;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;

use crate::error::ChainError;
use crate::icl::{assemble_prompt, Demonstration};
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, GenerationParams};
use crate::prompts::{render, PromptRegistry, PromptSet};
use crate::text::contains_normalized;
use crate::types::{
    AnalysisChain, CandidateStatus, ChainStatus, ChainTrace, Document, EmotionCandidate, EmotionCausePair, Exchange,
    Provenance, PruneReason, Step, TracedPair,
};

use parse::{Analysis, LocateAnswer, Summary};

/// Whether steps share one conversation or each starts afresh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionMode {
    /// Every request carries the earlier questions and answers of its branch.
    #[default]
    Continuing,
    /// Each request is a fresh session; earlier outputs are embedded in the
    /// prompt text.
    PerStep,
}

/// The step-removal variants compared in ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoRecognize,
    NoLocate,
    NoAnalyze,
    NoSummarize,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::NoRecognize, Ablation::NoLocate, Ablation::NoAnalyze, Ablation::NoSummarize];

    /// Label used in summaries and traces.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "DECC",
            Ablation::NoRecognize => "w/o recognizing",
            Ablation::NoLocate => "w/o locating",
            Ablation::NoAnalyze => "w/o analysing",
            Ablation::NoSummarize => "w/o summarizing",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRecognize => "no-recognize",
            Ablation::NoLocate => "no-locate",
            Ablation::NoAnalyze => "no-analyze",
            Ablation::NoSummarize => "no-summarize",
        }
    }

    pub fn removed(self) -> Option<Step> {
        match self {
            Ablation::Full => None,
            Ablation::NoRecognize => Some(Step::Recognize),
            Ablation::NoLocate => Some(Step::Locate),
            Ablation::NoAnalyze => Some(Step::Analyze),
            Ablation::NoSummarize => Some(Step::Summarize),
        }
    }

    pub fn steps(self) -> BTreeSet<Step> {
        Step::ALL.into_iter().filter(|s| Some(*s) != self.removed()).collect()
    }

    pub fn of_steps(steps: &BTreeSet<Step>) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.steps() == *steps)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?} (expected full, no-recognize, no-locate, no-analyze or no-summarize)"))
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub enabled_steps: BTreeSet<Step>,
    /// Demonstrations used per request; the first `shots` of `demos`.
    pub shots: usize,
    pub demos: Vec<Demonstration>,
    /// Extra attempts, each with a format reminder, before a branch is
    /// pruned for an unparseable answer.
    pub parse_retries: u32,
    /// Token-Jaccard needed to resolve a paraphrased clause.
    pub fuzzy_locate_threshold: f64,
    /// Ask the model to place keywords that occur in no clause.
    pub allow_implicit: bool,
    pub session: SessionMode,
    pub params: GenerationParams,
    /// Settings for the single-prompt baseline.
    pub naive_params: GenerationParams,
    /// Estimated prompt tokens allowed per request, demonstrations included.
    pub token_budget: Option<usize>,
    pub prompts: PromptRegistry,
    /// Documents processed concurrently by [`run_corpus`].
    pub parallelism: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            enabled_steps: Step::ALL.into_iter().collect(),
            shots: 0,
            demos: Vec::new(),
            parse_retries: 2,
            fuzzy_locate_threshold: 0.5,
            allow_implicit: true,
            session: SessionMode::default(),
            params: GenerationParams::default(),
            naive_params: GenerationParams::naive(),
            token_budget: None,
            prompts: PromptRegistry::default(),
            parallelism: 1,
        }
    }
}

impl ChainConfig {
    pub fn ablation(ablation: Ablation) -> Self {
        ChainConfig { enabled_steps: ablation.steps(), ..Default::default() }
    }

    pub fn has(&self, step: Step) -> bool {
        self.enabled_steps.contains(&step)
    }

    /// Trace label: the ablation name, or the enabled steps.
    pub fn variant(&self) -> String {
        match Ablation::of_steps(&self.enabled_steps) {
            Some(a) => a.label().to_string(),
            None => self.enabled_steps.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"),
        }
    }

    pub fn active_demos(&self) -> &[Demonstration] {
        &self.demos[..self.shots.min(self.demos.len())]
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        let err = |m: &str| Err(ChainError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.fuzzy_locate_threshold) {
            return Err(ChainError::Config(format!(
                "fuzzy_locate_threshold {} outside [0, 1]",
                self.fuzzy_locate_threshold
            )));
        }
        if self.enabled_steps.is_empty() {
            return err("no steps enabled");
        }
        if self.enabled_steps.len() == 1 && self.has(Step::Summarize) {
            return err("summarize requires at least one upstream step");
        }
        if !self.has(Step::Recognize) && !self.has(Step::Locate) {
            return err("either recognize or locate must be enabled to find emotion clauses");
        }
        if !self.has(Step::Analyze) && !self.has(Step::Summarize) {
            return err("either analyze or summarize must be enabled to find causes");
        }
        if !self.has(Step::Locate) && !self.has(Step::Analyze) {
            return err("without locate, analyze must be enabled to place each keyword");
        }
        if self.shots > self.demos.len() {
            return Err(ChainError::Config(format!(
                "shots = {} but only {} demonstrations are loaded",
                self.shots,
                self.demos.len()
            )));
        }
        if let Some((i, d)) = self.active_demos().iter().enumerate().find(|(_, d)| !d.curated) {
            return Err(ChainError::Config(format!("demonstration {} ({}) is not curated", i + 1, d.document.id())));
        }
        if self.parallelism == 0 {
            return err("parallelism must be at least 1");
        }
        self.params.validate().map_err(|e| ChainError::Config(e.to_string()))?;
        self.naive_params.validate().map_err(|e| ChainError::Config(e.to_string()))
    }
}

/// Pairs and trace of one document.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DocumentRun {
    pub pairs: Vec<EmotionCausePair>,
    pub trace: ChainTrace,
}

/// Candidate clauses for analysis: the located clauses, duplicates collapsed.
pub fn filter_emotion_clauses(candidates: &[EmotionCandidate]) -> BTreeSet<usize> {
    candidates
        .iter()
        .filter(|c| c.status == CandidateStatus::Located)
        .filter_map(|c| c.located_clause)
        .collect()
}

enum Answer<T> {
    Parsed(T, String),
    Unparseable(String),
}

/// State of one document's run. Exposes each step on its own; use
/// [`run_document`] for the whole chain.
pub struct DocumentSession<'a> {
    doc: &'a Document,
    cfg: &'a ChainConfig,
    prompts: &'a PromptSet,
    backend: &'a dyn ChatBackend,
    system: String,
    /// Shared history in continuing mode: recognition and locating turns.
    prefix: Vec<ChatMessage>,
    /// Per-chain history in continuing mode.
    branches: HashMap<String, Vec<ChatMessage>>,
    emotion_clauses: BTreeSet<usize>,
    pairs: Vec<EmotionCausePair>,
    trace: ChainTrace,
}

impl<'a> DocumentSession<'a> {
    pub fn new(doc: &'a Document, cfg: &'a ChainConfig, backend: &'a dyn ChatBackend) -> Self {
        let prompts = cfg.prompts.get(doc.language());
        DocumentSession {
            doc,
            cfg,
            prompts,
            backend,
            system: render(&prompts.system, &[("document", &doc.numbered_text())]),
            prefix: Vec::new(),
            branches: HashMap::new(),
            emotion_clauses: BTreeSet::new(),
            pairs: Vec::new(),
            trace: ChainTrace::new(doc.id(), cfg.variant()),
        }
    }

    pub fn trace(&self) -> &ChainTrace {
        &self.trace
    }

    fn continuing(&self) -> bool {
        self.cfg.session == SessionMode::Continuing
    }

    fn shared_history(&self) -> Vec<ChatMessage> {
        if self.continuing() {
            self.prefix.clone()
        } else {
            Vec::new()
        }
    }

    /// The request sent for `prompt` at `step` before any retry.
    pub fn request(&self, step: Option<Step>, history: &[ChatMessage], prompt: &str) -> Result<ChatRequest, ChainError> {
        let mut task = Vec::with_capacity(history.len() + 2);
        task.push(ChatMessage::system(self.system.clone()));
        task.extend_from_slice(history);
        task.push(ChatMessage::user(prompt));
        let (messages, params) = match step {
            Some(step) => (
                assemble_prompt(self.cfg.active_demos(), step, task, self.prompts, self.cfg.token_budget)?,
                self.cfg.params.clone(),
            ),
            None => (task, self.cfg.naive_params.clone()),
        };
        Ok(ChatRequest::new(messages, params))
    }

    /// Sends `prompt`, re-asking with a format reminder while the answer
    /// does not parse. Returns the answer and, on success, the turn to keep
    /// as history.
    fn ask<T>(
        &mut self,
        step: Option<Step>,
        branch: &str,
        history: &[ChatMessage],
        prompt: String,
        format: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(Answer<T>, Vec<ChatMessage>), ChainError> {
        let mut request = self.request(step, history, &prompt)?;
        let reminder = render(&self.prompts.reminder, &[("format", &self.prompts.format_hint(format, self.doc.len()))]);
        let mut last_error = String::new();
        for _ in 0..=self.cfg.parse_retries {
            let response = self.backend.complete(&request)?;
            self.trace.exchanges.push(Exchange {
                step,
                branch: branch.to_string(),
                prompt: request.last_user().to_string(),
                response: response.clone(),
            });
            match parse(&response) {
                Ok(value) => {
                    let turn = vec![ChatMessage::user(prompt), ChatMessage::assistant(response.clone())];
                    return Ok((Answer::Parsed(value, response), turn));
                }
                Err(e) => {
                    log::debug!("{} {branch}: unparseable answer: {e}", self.doc.id());
                    last_error = e;
                    if !response.trim().is_empty() {
                        request.messages.push(ChatMessage::assistant(response));
                    }
                    request.messages.push(ChatMessage::user(reminder.clone()));
                }
            }
        }
        Ok((Answer::Unparseable(last_error), Vec::new()))
    }

    /// Step 1. `None` when the answer never parsed; the failure is recorded
    /// in the trace. An empty list means the document expresses no emotion.
    pub fn recognize(&mut self) -> Result<Option<Vec<EmotionCandidate>>, ChainError> {
        let prompts = self.prompts;
        let (answer, turn) = self.ask(Some(Step::Recognize), "doc", &[], prompts.recognize.clone(), "recognize", |r| {
            parse::parse_keywords(r, prompts)
        })?;
        match answer {
            Answer::Parsed(keywords, _) => {
                if self.continuing() {
                    self.prefix.extend(turn);
                }
                Ok(Some(
                    keywords
                        .into_iter()
                        .enumerate()
                        .map(|(i, k)| EmotionCandidate::recognized(format!("e{}", i + 1), k))
                        .collect(),
                ))
            }
            Answer::Unparseable(e) => {
                self.trace.failure = Some(format!("step 1: unparseable recognition: {e}"));
                Ok(None)
            }
        }
    }

    /// Step 2 for one keyword. A keyword found literally in exactly one
    /// clause is placed there without asking the model; several literal
    /// matches fan out into one branch each. Otherwise the model is asked
    /// (when implicit emotions are allowed).
    pub fn locate(&mut self, candidate: EmotionCandidate) -> Result<Vec<EmotionCandidate>, ChainError> {
        let literal: Vec<usize> = self
            .doc
            .clauses()
            .iter()
            .filter(|c| contains_normalized(&c.text, &candidate.keyword))
            .map(|c| c.index)
            .collect();
        let located = |c: &EmotionCandidate, branch: String, clause: usize, implicit: bool| EmotionCandidate {
            branch,
            keyword: c.keyword.clone(),
            status: CandidateStatus::Located,
            located_clause: Some(clause),
            implicit,
        };
        match literal.as_slice() {
            [clause] => return Ok(vec![located(&candidate, candidate.branch.clone(), *clause, false)]),
            [_, _, ..] => {
                return Ok(literal
                    .iter()
                    .enumerate()
                    .map(|(m, &clause)| located(&candidate, format!("{}.{}", candidate.branch, m + 1), clause, false))
                    .collect())
            }
            [] => {}
        }
        if !self.cfg.allow_implicit {
            return Ok(vec![self.prune_candidate(candidate, PruneReason::NotLocated, "keyword occurs in no clause")]);
        }

        let prompts = self.prompts;
        let doc = self.doc;
        let history = self.shared_history();
        let prompt = render(&prompts.locate_implicit, &[("keyword", &candidate.keyword)]);
        let branch = candidate.branch.clone();
        let (answer, turn) =
            self.ask(Some(Step::Locate), &branch, &history, prompt, "locate", |r| parse::parse_locate(r, doc, prompts))?;
        if matches!(answer, Answer::Parsed(..)) && self.continuing() {
            self.prefix.extend(turn);
        }
        Ok(vec![match answer {
            Answer::Parsed(LocateAnswer::Clause(clause), _) => located(&candidate, branch, clause, true),
            Answer::Parsed(LocateAnswer::NoClause, _) => {
                self.prune_candidate(candidate, PruneReason::NotLocated, "no clause expresses the emotion")
            }
            Answer::Unparseable(e) => self.prune_candidate(candidate, PruneReason::ParseFailure, &e),
        }])
    }

    fn prune_candidate(&mut self, mut candidate: EmotionCandidate, reason: PruneReason, detail: &str) -> EmotionCandidate {
        self.trace.prune(candidate.branch.clone(), Step::Locate, reason, Some(detail.to_string()));
        candidate.status = CandidateStatus::Pruned;
        candidate
    }

    /// Step 2 without step 1: the model names the emotion clauses directly.
    pub fn locate_direct(&mut self) -> Result<Option<Vec<EmotionCandidate>>, ChainError> {
        let prompts = self.prompts;
        let doc = self.doc;
        let (answer, turn) =
            self.ask(Some(Step::Locate), "doc", &[], prompts.locate_direct.clone(), "locate_direct", |r| {
                parse::parse_direct_locations(r, doc, prompts)
            })?;
        match answer {
            Answer::Parsed(found, _) => {
                if self.continuing() {
                    self.prefix.extend(turn);
                }
                Ok(Some(
                    found
                        .into_iter()
                        .enumerate()
                        .map(|(i, (clause, keyword))| EmotionCandidate {
                            branch: format!("e{}", i + 1),
                            implicit: !contains_normalized(doc.clause_text(clause).unwrap_or(""), &keyword),
                            keyword,
                            status: CandidateStatus::Located,
                            located_clause: Some(clause),
                        })
                        .collect(),
                ))
            }
            Answer::Unparseable(e) => {
                self.trace.failure = Some(format!("step 2: unparseable emotion clauses: {e}"));
                Ok(None)
            }
        }
    }

    /// Step 3 for one emotion clause.
    pub fn analyze(&mut self, branch: &str, emotion_clause: usize, keywords: &[String]) -> Result<AnalysisChain, ChainError> {
        let prompts = self.prompts;
        let doc = self.doc;
        let threshold = self.cfg.fuzzy_locate_threshold;
        let history = self.shared_history();
        let prompt = render(
            &prompts.analyze,
            &[
                ("index", &emotion_clause.to_string()),
                ("clause", doc.clause_text(emotion_clause).unwrap_or("")),
                ("keywords", &keywords.join(", ")),
            ],
        );
        let (answer, turn) = self.ask(Some(Step::Analyze), branch, &history, prompt, "analyze", |r| {
            parse::parse_analysis(r, doc, threshold, prompts)
        })?;
        if self.continuing() && !turn.is_empty() {
            self.branches.insert(branch.to_string(), [history, turn].concat());
        }
        let mut chain = AnalysisChain {
            branch: branch.to_string(),
            emotion_clause,
            keywords: keywords.to_vec(),
            rationale: String::new(),
            attributed_clause: None,
            status: ChainStatus::Open,
        };
        self.apply_analysis(&mut chain, answer);
        Ok(chain)
    }

    fn apply_analysis(&mut self, chain: &mut AnalysisChain, answer: Answer<Analysis>) {
        match answer {
            Answer::Parsed(analysis, rationale) => {
                chain.rationale = rationale;
                match analysis {
                    Analysis::Attributed(i) => {
                        chain.attributed_clause = Some(i);
                        chain.status = ChainStatus::Attributed;
                    }
                    Analysis::Open => chain.status = ChainStatus::Open,
                    Analysis::NoCause => {
                        chain.status = ChainStatus::Pruned;
                        self.trace.prune(chain.branch.clone(), Step::Analyze, PruneReason::NoAttributableCause, None);
                    }
                }
            }
            Answer::Unparseable(e) => {
                chain.status = ChainStatus::Pruned;
                self.trace.prune(chain.branch.clone(), Step::Analyze, PruneReason::ParseFailure, Some(e));
            }
        }
    }

    /// Step 3 without step 2: the model places the keyword and analyzes it
    /// in one answer. Returns the candidate with its outcome and the chain
    /// when the keyword was placed.
    pub fn analyze_keyword(
        &mut self,
        mut candidate: EmotionCandidate,
        branch: &str,
    ) -> Result<(EmotionCandidate, Option<AnalysisChain>), ChainError> {
        let prompts = self.prompts;
        let doc = self.doc;
        let threshold = self.cfg.fuzzy_locate_threshold;
        let history = self.shared_history();
        let prompt = render(&prompts.analyze_keyword, &[("keyword", &candidate.keyword)]);
        let (answer, turn) = self.ask(Some(Step::Analyze), branch, &history, prompt, "analyze", |r| {
            let analysis = parse::parse_analysis(r, doc, threshold, prompts)?;
            match parse::parse_emotion_clause(r, doc, threshold) {
                Ok(clause) => Ok((Some(clause), analysis)),
                Err(_) if analysis == Analysis::NoCause => Ok((None, analysis)),
                Err(e) => Err(e),
            }
        })?;
        if self.continuing() && !turn.is_empty() {
            self.branches.insert(branch.to_string(), [history, turn].concat());
        }
        let (clause, answer) = match answer {
            Answer::Parsed((Some(clause), analysis), text) => (clause, Answer::Parsed(analysis, text)),
            Answer::Parsed((None, _), _) => {
                candidate.status = CandidateStatus::Pruned;
                self.trace.prune(candidate.branch.clone(), Step::Analyze, PruneReason::NoAttributableCause, None);
                return Ok((candidate, None));
            }
            Answer::Unparseable(e) => {
                candidate.status = CandidateStatus::Pruned;
                self.trace.prune(candidate.branch.clone(), Step::Analyze, PruneReason::ParseFailure, Some(e));
                return Ok((candidate, None));
            }
        };
        candidate.status = CandidateStatus::Located;
        candidate.located_clause = Some(clause);
        candidate.implicit = !contains_normalized(doc.clause_text(clause).unwrap_or(""), &candidate.keyword);
        let mut chain = AnalysisChain {
            branch: branch.to_string(),
            emotion_clause: clause,
            keywords: vec![candidate.keyword.clone()],
            rationale: String::new(),
            attributed_clause: None,
            status: ChainStatus::Open,
        };
        self.apply_analysis(&mut chain, answer);
        Ok((candidate, Some(chain)))
    }

    /// Step 4: one cause clause for the chain, or a prune.
    pub fn summarize(&mut self, chain: &mut AnalysisChain) -> Result<Option<EmotionCausePair>, ChainError> {
        let prompts = self.prompts;
        let doc = self.doc;
        let threshold = self.cfg.fuzzy_locate_threshold;
        let index = chain.emotion_clause.to_string();
        let analyzed = self.cfg.has(Step::Analyze);
        let (history, prompt) = if !analyzed {
            let prompt = render(
                &prompts.summarize_direct,
                &[("index", &index), ("clause", doc.clause_text(chain.emotion_clause).unwrap_or(""))],
            );
            (self.shared_history(), prompt)
        } else if self.continuing() {
            let history = self.branches.get(&chain.branch).cloned().unwrap_or_else(|| self.prefix.clone());
            (history, render(&prompts.summarize, &[("index", &index)]))
        } else {
            let context = render(&prompts.summarize_context, &[("index", &index), ("rationale", &chain.rationale)]);
            (Vec::new(), context + &render(&prompts.summarize, &[("index", &index)]))
        };
        let branch = chain.branch.clone();
        let (answer, _) = self.ask(Some(Step::Summarize), &branch, &history, prompt, "summarize", |r| {
            parse::parse_summary(r, doc, threshold, prompts)
        })?;
        match answer {
            Answer::Parsed(summary, text) => {
                if !analyzed {
                    chain.rationale = text;
                }
                match summary {
                    Summary::Cause { index, span } => {
                        chain.status = ChainStatus::Attributed;
                        chain.attributed_clause = Some(index);
                        let span = (!span.is_empty()).then_some(span);
                        Ok(self.pair_of(chain, index, Step::Summarize, span))
                    }
                    Summary::NotSingle => {
                        chain.status = ChainStatus::Pruned;
                        self.trace.prune(branch, Step::Summarize, PruneReason::NotASingleClause, None);
                        Ok(None)
                    }
                }
            }
            Answer::Unparseable(e) => {
                if !analyzed {
                    chain.rationale = e.clone();
                }
                chain.status = ChainStatus::Pruned;
                self.trace.prune(branch, Step::Summarize, PruneReason::ParseFailure, Some(e));
                Ok(None)
            }
        }
    }

    fn pair_of(&self, chain: &AnalysisChain, cause: usize, step: Step, span: Option<String>) -> Option<EmotionCausePair> {
        let provenance = Provenance {
            step: Some(step),
            chain: Some(chain.branch.clone()),
            emotion_span: (!chain.keywords.is_empty()).then(|| chain.keywords.join(", ")),
            cause_span: span,
        };
        self.doc.pair(chain.emotion_clause, cause).map(|p| p.with_provenance(provenance))
    }

    /// Finishes a chain: summarizes it (or takes its attributed clause when
    /// summarizing is off), records it and emits its pair.
    fn conclude(&mut self, mut chain: AnalysisChain) -> Result<(), ChainError> {
        let pair = match chain.status {
            ChainStatus::Pruned => None,
            _ if self.cfg.has(Step::Summarize) => self.summarize(&mut chain)?,
            ChainStatus::Attributed => {
                let cause = chain.attributed_clause.expect("attributed chain has a clause");
                self.pair_of(&chain, cause, Step::Analyze, None)
            }
            ChainStatus::Open => {
                chain.status = ChainStatus::Pruned;
                self.trace.prune(
                    chain.branch.clone(),
                    Step::Summarize,
                    PruneReason::NotASingleClause,
                    Some("analysis did not settle on one clause".into()),
                );
                None
            }
        };
        if let Some(pair) = pair {
            if !self.pairs.iter().any(|p| p.indices() == pair.indices()) {
                self.trace.pairs.push(TracedPair {
                    chain: chain.branch.clone(),
                    emotion_index: pair.emotion_index,
                    cause_index: pair.cause_index,
                });
                self.pairs.push(pair);
            }
        }
        self.trace.chains.push(chain);
        Ok(())
    }

    /// One chain per emotion clause, in clause order.
    fn analyze_clauses(&mut self) -> Result<(), ChainError> {
        self.emotion_clauses = filter_emotion_clauses(&self.trace.candidates);
        let clauses: Vec<usize> = self.emotion_clauses.iter().copied().collect();
        for (n, clause) in clauses.into_iter().enumerate() {
            let mut keywords: Vec<String> = Vec::new();
            for c in self.trace.candidates.iter().filter(|c| c.is_located() && c.located_clause == Some(clause)) {
                if !keywords.contains(&c.keyword) {
                    keywords.push(c.keyword.clone());
                }
            }
            let branch = format!("ac{}", n + 1);
            let chain = if self.cfg.has(Step::Analyze) {
                self.analyze(&branch, clause, &keywords)?
            } else {
                AnalysisChain {
                    branch,
                    emotion_clause: clause,
                    keywords,
                    rationale: String::new(),
                    attributed_clause: None,
                    status: ChainStatus::Open,
                }
            };
            self.conclude(chain)?;
        }
        Ok(())
    }

    fn drive(&mut self) -> Result<(), ChainError> {
        if !self.cfg.has(Step::Recognize) {
            let Some(candidates) = self.locate_direct()? else { return Ok(()) };
            self.trace.candidates = candidates;
            return self.analyze_clauses();
        }
        let Some(candidates) = self.recognize()? else { return Ok(()) };
        if self.cfg.has(Step::Locate) {
            for candidate in candidates {
                let located = self.locate(candidate)?;
                self.trace.candidates.extend(located);
            }
            return self.analyze_clauses();
        }
        for (n, candidate) in candidates.into_iter().enumerate() {
            let (candidate, chain) = self.analyze_keyword(candidate, &format!("ac{}", n + 1))?;
            if let Some(clause) = candidate.located_clause {
                self.emotion_clauses.insert(clause);
            }
            self.trace.candidates.push(candidate);
            if let Some(chain) = chain {
                self.conclude(chain)?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> DocumentRun {
        self.trace.emotion_clauses = self.emotion_clauses.iter().copied().collect();
        DocumentRun { pairs: self.pairs, trace: self.trace }
    }

    fn interrupted(&mut self, e: ChainError) -> Result<(), ChainError> {
        match e {
            ChainError::Backend(e) => self.trace.failure = Some(format!("backend: {e}")),
            ChainError::Demonstrations(e) => self.trace.failure = Some(format!("demonstrations: {e}")),
            e @ ChainError::Config(_) => return Err(e),
        }
        Ok(())
    }
}

/// Runs the enabled steps on one document.
///
/// A backend failure stops the document: the trace keeps everything done so
/// far plus a failure marker, and only chains that finished emit pairs.
pub fn run_document(doc: &Document, cfg: &ChainConfig, backend: &dyn ChatBackend) -> Result<DocumentRun, ChainError> {
    cfg.validate()?;
    Ok(run_validated(doc, cfg, backend))
}

fn run_validated(doc: &Document, cfg: &ChainConfig, backend: &dyn ChatBackend) -> DocumentRun {
    let mut session = DocumentSession::new(doc, cfg, backend);
    if let Err(e) = session.drive() {
        // config errors were ruled out by validation
        let _ = session.interrupted(e);
    }
    session.finish()
}

/// Extracts all pairs with one prompt.
pub fn run_naive_baseline(doc: &Document, cfg: &ChainConfig, backend: &dyn ChatBackend) -> Result<DocumentRun, ChainError> {
    cfg.validate()?;
    Ok(naive_validated(doc, cfg, backend))
}

fn naive_validated(doc: &Document, cfg: &ChainConfig, backend: &dyn ChatBackend) -> DocumentRun {
    let mut session = DocumentSession::new(doc, cfg, backend);
    session.trace.variant = "naive".to_string();
    let prompts = session.prompts;
    let threshold = cfg.fuzzy_locate_threshold;
    let result = session.ask(None, "doc", &[], prompts.naive.clone(), "naive", |r| {
        let list = parse::parse_pairs(r, doc, threshold, prompts);
        if list.is_failure() {
            Err("no pair cited".to_string())
        } else {
            Ok(list)
        }
    });
    match result {
        Ok((Answer::Parsed(list, _), _)) => {
            if list.dropped > 0 {
                log::debug!("{}: dropped {} out-of-range pairs", doc.id(), list.dropped);
            }
            session.pairs = list
                .pairs
                .iter()
                .filter_map(|&(e, c)| doc.pair(e, c))
                .map(|p| p.with_provenance(Provenance { step: None, chain: None, emotion_span: None, cause_span: None }))
                .collect();
        }
        Ok((Answer::Unparseable(e), _)) => session.trace.failure = Some(format!("unparseable pair list: {e}")),
        Err(e) => {
            let _ = session.interrupted(e);
        }
    }
    session.finish()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RunMode {
    #[default]
    Chain,
    Naive,
}

/// Runs every document, up to `cfg.parallelism` at a time. Results follow
/// document order.
pub fn run_corpus(
    documents: &[Document],
    cfg: &ChainConfig,
    backend: &dyn ChatBackend,
    mode: RunMode,
) -> Result<Vec<DocumentRun>, ChainError> {
    cfg.validate()?;
    let run = |doc: &Document| match mode {
        RunMode::Chain => run_validated(doc, cfg, backend),
        RunMode::Naive => naive_validated(doc, cfg, backend),
    };
    Ok(parallel_map(documents, cfg.parallelism, run))
}

fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                results.lock()[i] = Some(r);
            });
        }
    });
    results.into_inner().into_iter().map(|r| r.expect("every item processed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Script, ScriptedBackend};
    use crate::types::{validate_document, Language, RawClause, RawDocument};

    fn doc(id: &str, clauses: &[&str], pairs: &[(i64, i64)]) -> Document {
        validate_document(RawDocument {
            id: id.into(),
            language: Some(Language::En),
            clauses: clauses.iter().map(|t| RawClause { index: None, text: t.to_string() }).collect(),
            pairs: pairs.to_vec(),
        })
        .unwrap()
    }

    fn figure1() -> Document {
        doc(
            "fig1",
            &[
                "Last Sunday afternoon",
                "Tom was happy to finish the marathon himself",
                "on the way home",
                "he found that his wallet had been stolen",
                "which made him very angry",
                "he reported it to the police",
                "the police promised to look into it",
            ],
            &[(2, 2), (5, 4)],
        )
    }

    fn figure1_script() -> Script {
        Script::default()
            .rule(None, &["Please recognize emotions"], "happy, angry")
            .rule(None, &["Emotion clause: clause 2."], "Finishing the marathon by himself made Tom happy. Cause: clause 2")
            .rule(None, &["Emotion clause: clause 5."], "His wallet had been stolen on the way home. Cause: clause 4")
            .rule(None, &["For the emotion in clause 2"], "Cause clause: clause 2")
            .rule(None, &["For the emotion in clause 5"], "Cause clause: clause 4")
    }

    #[test]
    fn full_chain_on_figure1() {
        let d = figure1();
        let backend = ScriptedBackend::new(figure1_script());
        let run = run_document(&d, &ChainConfig::default(), &backend).unwrap();
        let pairs: Vec<_> = run.pairs.iter().map(|p| p.indices()).collect();
        assert_eq!(pairs, vec![(2, 2), (5, 4)]);
        assert!(run.pairs.iter().all(|p| p.is_well_formed(&d)));
        run.trace.check(&d).unwrap();
        // both keywords are literal: no locating call
        assert!(run.trace.exchanges.iter().all(|e| e.step != Some(Step::Locate)));
        assert_eq!(run.trace.exchanges.len(), 5);
    }

    #[test]
    fn continuing_session_carries_history() {
        let d = figure1();
        let backend = crate::llm::RecordingBackend::new(ScriptedBackend::new(figure1_script()));
        run_document(&d, &ChainConfig::default(), &backend).unwrap();
        let t = backend.into_transcript();
        let last = &t.entries().last().unwrap().request.messages;
        // system, recognize Q/A, analyze Q/A, summarize Q
        assert_eq!(last.len(), 6);
        assert!(last[1].content.starts_with("Please recognize emotions"));
        assert_eq!(last[2].content, "happy, angry");
    }

    #[test]
    fn per_step_session_embeds_rationale() {
        let d = figure1();
        let backend = crate::llm::RecordingBackend::new(ScriptedBackend::new(figure1_script()));
        let cfg = ChainConfig { session: SessionMode::PerStep, ..Default::default() };
        let run = run_document(&d, &cfg, &backend).unwrap();
        assert_eq!(run.pairs.len(), 2);
        let t = backend.into_transcript();
        for e in t.entries() {
            assert_eq!(e.request.messages.len(), 2);
        }
        let last = t.entries().last().unwrap().request.last_user().to_string();
        assert!(last.starts_with("Analysis of the emotion in clause 5:\nHis wallet had been stolen"));
    }

    #[test]
    fn literal_fan_out() {
        let d = doc("f", &["she was sad", "the rain fell", "he was sad too"], &[]);
        let script = Script::default()
            .rule(None, &["recognize"], "sad")
            .rule(None, &["Emotion clause: clause 1."], "Cause: clause 2")
            .rule(None, &["Emotion clause: clause 3."], "Cause: clause 2")
            .rule(None, &["clause 1"], "Cause clause: clause 2")
            .rule(None, &["clause 3"], "Cause clause: clause 2");
        let run = run_document(&d, &ChainConfig::default(), &ScriptedBackend::new(script)).unwrap();
        let branches: Vec<_> = run.trace.candidates.iter().map(|c| c.branch.as_str()).collect();
        assert_eq!(branches, vec!["e1.1", "e1.2"]);
        assert_eq!(run.trace.emotion_clauses, vec![1, 3]);
        assert_eq!(run.pairs.iter().map(|p| p.indices()).collect::<Vec<_>>(), vec![(1, 2), (3, 2)]);
        run.trace.check(&d).unwrap();
    }

    #[test]
    fn strict_containment_prunes_without_asking() {
        let d = doc("s", &["the crowd cheered", "the team won"], &[]);
        let script = Script::default().rule(None, &["recognize"], "joy, cheered");
        let cfg = ChainConfig { allow_implicit: false, enabled_steps: Ablation::NoSummarize.steps(), ..Default::default() };
        let backend = ScriptedBackend::new(script.rule(None, &["Emotion clause: clause 1."], "Cause: clause 2"));
        let run = run_document(&d, &cfg, &backend).unwrap();
        let joy = run.trace.candidate("joy").unwrap();
        assert_eq!(joy.status, CandidateStatus::Pruned);
        assert_eq!(run.trace.prune_of("e1").unwrap().reason, PruneReason::NotLocated);
        assert_eq!(run.pairs.iter().map(|p| p.indices()).collect::<Vec<_>>(), vec![(1, 2)]);
        assert!(!run.trace.exchanges.iter().any(|e| e.step == Some(Step::Locate)));
    }

    #[test]
    fn no_emotion_document() {
        let d = doc("t", &["today is Tuesday"], &[]);
        let backend = ScriptedBackend::new(Script::default().rule(None, &["recognize"], "none"));
        let run = run_document(&d, &ChainConfig::default(), &backend).unwrap();
        assert!(run.pairs.is_empty());
        assert!(run.trace.candidates.is_empty());
        assert!(run.trace.failure.is_none());
    }

    #[test]
    fn retries_then_document_failure() {
        let d = doc("t", &["today is Tuesday"], &[]);
        let backend = ScriptedBackend::new(Script::default().rule(None, &[], "Well, it is hard to say what the author of this text may be feeling today"));
        let run = run_document(&d, &ChainConfig::default(), &backend).unwrap();
        assert!(run.pairs.is_empty());
        assert!(run.trace.failure.as_deref().unwrap().contains("unparseable recognition"));
        assert_eq!(run.trace.exchanges.len(), 3);
        assert!(run.trace.exchanges[1].prompt.starts_with("Your previous answer did not follow"));
    }

    #[test]
    fn retry_recovers() {
        let d = figure1();
        let script = figure1_script();
        let mut rules = script.rules.clone();
        rules.insert(
            0,
            crate::llm::ScriptRule {
                context: None,
                prompt: vec!["For the emotion in clause 5".into()],
                response: "It is the wallet.".into(),
            },
        );
        // the reminder is the last user message on the retry
        rules.insert(
            0,
            crate::llm::ScriptRule {
                context: None,
                prompt: vec!["did not follow".into()],
                response: "Cause clause: clause 4".into(),
            },
        );
        let backend = ScriptedBackend::new(Script { rules, ..Default::default() });
        let run = run_document(&d, &ChainConfig::default(), &backend).unwrap();
        assert_eq!(run.pairs.iter().map(|p| p.indices()).collect::<Vec<_>>(), vec![(2, 2), (5, 4)]);
        assert!(run.trace.prunes.is_empty());
    }

    #[test]
    fn backend_failure_is_marked() {
        let d = figure1();
        let backend = ScriptedBackend::new(Script::default().rule(None, &["recognize"], "happy, angry"));
        let run = run_document(&d, &ChainConfig::default(), &backend).unwrap();
        assert!(run.pairs.is_empty());
        assert!(run.trace.failure.as_deref().unwrap().starts_with("backend: scripted backend has no response"));
        run.trace.check(&d).unwrap();
    }

    #[test]
    fn config_validation() {
        let only_sum = ChainConfig { enabled_steps: [Step::Summarize].into_iter().collect(), ..Default::default() };
        assert!(only_sum.validate().unwrap_err().to_string().contains("summarize requires at least one upstream step"));
        for a in Ablation::ALL {
            ChainConfig::ablation(a).validate().unwrap();
        }
        let shots = ChainConfig { shots: 2, ..Default::default() };
        assert!(shots.validate().is_err());
        let thr = ChainConfig { fuzzy_locate_threshold: 1.5, ..Default::default() };
        assert!(thr.validate().is_err());
    }

    #[test]
    fn ablation_labels_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(Ablation::of_steps(&a.steps()), Some(a));
        }
        assert_eq!(ChainConfig::ablation(Ablation::NoAnalyze).variant(), "w/o analysing");
    }

    #[test]
    fn corpus_results_keep_document_order() {
        let docs: Vec<Document> = (0..12).map(|i| doc(&format!("d{i:02}"), &["nothing here"], &[])).collect();
        let backend = ScriptedBackend::new(Script::default().rule(None, &["recognize"], "none"));
        let cfg = ChainConfig { parallelism: 4, ..Default::default() };
        let runs = run_corpus(&docs, &cfg, &backend, RunMode::Chain).unwrap();
        let ids: Vec<_> = runs.iter().map(|r| r.trace.document_id.clone()).collect();
        assert_eq!(ids, docs.iter().map(|d| d.id().to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn naive_baseline_parses_pairs() {
        let d = figure1();
        let backend = ScriptedBackend::new(Script::default().rule(
            None,
            &["Extract all emotion-cause pairs"],
            "(emotion clause 2, cause clause 2)\n(emotion clause 5, cause clause 4)\n(emotion clause 5, cause clause 5)\n(emotion clause 6, cause clause 4)\n(emotion clause 12, cause clause 4)",
        ));
        let run = run_naive_baseline(&d, &ChainConfig::default(), &backend).unwrap();
        assert_eq!(
            run.pairs.iter().map(|p| p.indices()).collect::<Vec<_>>(),
            vec![(2, 2), (5, 4), (5, 5), (6, 4)]
        );
        assert_eq!(run.trace.exchanges[0].step, None);
    }
}
