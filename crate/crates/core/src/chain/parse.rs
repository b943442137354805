//! Parsers for model answers at each step.
//!
//! Clauses are cited as `clause N` (also `c7`, `子句N`, `第N句`, or a leading
//! `N.`). A cited answer resolves directly; otherwise the text is matched
//! verbatim against clause texts and finally by token-Jaccard overlap.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

use crate::prompts::PromptSet;
use crate::text::{normalize_text, strip_quotes, token_jaccard, tokens};
use crate::types::Document;

static CITATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:\bclause\s*#?\s*(\d+)|\bc(\d+)\b|子句\s*(\d+)|第\s*(\d+)\s*个?(?:子句|句))").unwrap()
});
static LEADING_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.)、:：]").unwrap());
static LIST_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.)、]|[-*•])\s*").unwrap());
static CAUSE_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:\bcause(?:\s+clause)?|原因子句|原因)\s*(?:is\b|[:：\-–])?").unwrap());
static EMOTION_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:\bemotion\s+clause|情感子句)\s*(?:is\b|[:：\-–])?").unwrap());
static PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\(\s*(?:emotion\s+clause\s*|情感子句\s*|clause\s*|c)?(\d+)\s*[,，]\s*(?:cause\s+clause\s*|原因子句\s*|clause\s*|c)?(\d+)\s*\)",
    )
    .unwrap()
});

/// Longest keyword accepted before an item is treated as prose.
const MAX_KEYWORD_TOKENS: usize = 6;

/// Clause indices cited in `text`, in order of appearance.
pub fn citations(text: &str) -> Vec<usize> {
    CITATION
        .captures_iter(text)
        .filter_map(|c| (1..=4).find_map(|g| c.get(g)).and_then(|m| m.as_str().parse().ok()))
        .collect()
}

fn contains_marker(text: &str, markers: &[String]) -> bool {
    let norm = normalize_text(text);
    markers.iter().any(|m| norm.contains(&normalize_text(m)))
}

/// Whether the whole answer means "nothing".
pub fn is_none_answer(text: &str, prompts: &PromptSet) -> bool {
    let norm = normalize_text(strip_quotes(text));
    let norm = norm.trim_matches(|c: char| !c.is_alphanumeric() && !crate::text::is_cjk(c));
    prompts.none_markers.iter().any(|m| {
        let m = normalize_text(m);
        norm == m
            || norm
                .strip_prefix(m.as_str())
                .is_some_and(|rest| rest.starts_with(|c: char| !c.is_alphanumeric()))
    })
}

/// Emotional keywords from a recognition answer, normalized and
/// deduplicated in order. `Ok(vec![])` means the model found no emotion.
pub fn parse_keywords(text: &str, prompts: &PromptSet) -> Result<Vec<String>, String> {
    if text.trim().is_empty() {
        return Err("empty answer".into());
    }
    if is_none_answer(text, prompts) {
        return Ok(Vec::new());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let body = match line.split_once([':', '：']) {
            Some((label, rest)) if is_label(label) => rest,
            _ => line,
        };
        for item in body.split([',', '，', '、', ';', '；']) {
            let item = LIST_MARKER.replace(item, "");
            let item = normalize_text(strip_quotes(&item));
            if item.is_empty() || is_none_answer(&item, prompts) {
                continue;
            }
            if tokens(&item).len() > MAX_KEYWORD_TOKENS && !item.chars().any(crate::text::is_cjk) {
                return Err(format!("{item:?} is not a keyword"));
            }
            if item.chars().count() > 16 && item.chars().all(|c| crate::text::is_cjk(c) || !c.is_alphanumeric()) {
                return Err(format!("{item:?} is not a keyword"));
            }
            if seen.insert(item.clone()) {
                out.push(item);
            }
        }
    }
    if out.is_empty() {
        return Err("no keywords found".into());
    }
    Ok(out)
}

fn is_label(label: &str) -> bool {
    let l = normalize_text(label);
    tokens(&l).len() <= 3 && (l.contains("emotion") || l.contains("keyword") || l.contains("情感") || l.contains("情绪"))
}

/// Substring test that respects word boundaries outside CJK text.
fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.chars().any(crate::text::is_cjk) {
        return haystack.contains(needle);
    }
    format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Outcome of resolving free text to a single clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Index(usize),
    OutOfRange(usize),
    /// Several clauses fit equally well.
    Ambiguous,
    Unresolved,
}

/// Resolves an answer fragment to one clause: explicit citation, then
/// verbatim text, then token overlap of at least `threshold`.
pub fn resolve_clause(segment: &str, doc: &Document, threshold: f64) -> Resolution {
    let mut cited: Vec<usize> = citations(segment);
    if let Some(c) = LEADING_NUMBER.captures(segment) {
        if let Ok(n) = c[1].parse() {
            cited.insert(0, n);
        }
    }
    let distinct: BTreeSet<usize> = cited.iter().copied().collect();
    match distinct.len() {
        1 => {
            let i = cited[0];
            return if doc.contains_index(i) { Resolution::Index(i) } else { Resolution::OutOfRange(i) };
        }
        n if n > 1 => return Resolution::Ambiguous,
        _ => {}
    }

    let span = normalize_text(strip_quotes(segment));
    if span.is_empty() {
        return Resolution::Unresolved;
    }
    let clauses: Vec<(usize, String)> = doc.clauses().iter().map(|c| (c.index, normalize_text(&c.text))).collect();

    let exact: Vec<usize> = clauses.iter().filter(|(_, t)| *t == span).map(|(i, _)| *i).collect();
    match exact.as_slice() {
        [i] => return Resolution::Index(*i),
        [_, _, ..] => return Resolution::Ambiguous,
        [] => {}
    }

    // clause quoted inside the answer, or the answer quoting part of a clause
    let mut contained: Vec<(usize, usize)> = clauses
        .iter()
        .filter(|(_, t)| !t.is_empty() && (contains_phrase(&span, t) || contains_phrase(t, &span)))
        .map(|(i, t)| (*i, t.chars().count().min(span.chars().count())))
        .collect();
    contained.sort_by_key(|c| std::cmp::Reverse(c.1));
    match contained.as_slice() {
        [(i, _)] => return Resolution::Index(*i),
        [(i, a), (_, b), ..] if a > b => return Resolution::Index(*i),
        [_, _, ..] => return Resolution::Ambiguous,
        [] => {}
    }

    let mut best: Option<(f64, usize)> = None;
    let mut tied = false;
    for (i, c) in doc.clauses().iter().map(|c| (c.index, &c.text)) {
        let score = token_jaccard(&span, c);
        if score < threshold {
            continue;
        }
        match best {
            Some((b, _)) if (score - b).abs() < 1e-12 => tied = true,
            Some((b, _)) if score < b => {}
            _ => {
                best = Some((score, i));
                tied = false;
            }
        }
    }
    match best {
        Some(_) if tied => Resolution::Ambiguous,
        Some((_, i)) => Resolution::Index(i),
        None => Resolution::Unresolved,
    }
}

/// Answer to an implicit locating question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocateAnswer {
    NoClause,
    Clause(usize),
}

pub fn parse_locate(text: &str, doc: &Document, prompts: &PromptSet) -> Result<LocateAnswer, String> {
    if text.trim().is_empty() {
        return Err("empty answer".into());
    }
    if is_none_answer(text, prompts) {
        return Ok(LocateAnswer::NoClause);
    }
    let cited = citations(text);
    match cited.first() {
        Some(&i) if doc.contains_index(i) => Ok(LocateAnswer::Clause(i)),
        Some(&i) => Err(format!("clause {i} is outside 1..={}", doc.len())),
        None => match resolve_clause(text, doc, 1.0) {
            Resolution::Index(i) => Ok(LocateAnswer::Clause(i)),
            _ => Err("no clause cited".into()),
        },
    }
}

/// `clause N: emotion` lines from a direct locating answer.
pub fn parse_direct_locations(text: &str, doc: &Document, prompts: &PromptSet) -> Result<Vec<(usize, String)>, String> {
    if text.trim().is_empty() {
        return Err("empty answer".into());
    }
    if is_none_answer(text, prompts) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut bad = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (head, keyword) = match line.split_once([':', '：']) {
            Some((h, k)) => (h, normalize_text(strip_quotes(k))),
            None => (line, String::new()),
        };
        let index = citations(head).first().copied().or_else(|| match resolve_clause(head, doc, 1.0) {
            Resolution::Index(i) | Resolution::OutOfRange(i) => Some(i),
            _ => None,
        });
        match index {
            Some(i) if doc.contains_index(i) => {
                if !out.iter().any(|(j, k)| *j == i && *k == keyword) {
                    out.push((i, keyword));
                }
            }
            Some(i) => bad = Some(format!("clause {i} is outside 1..={}", doc.len())),
            None => {}
        }
    }
    if out.is_empty() {
        return Err(bad.unwrap_or_else(|| "no clause cited".into()));
    }
    Ok(out)
}

/// Outcome of a step-3 analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Analysis {
    /// The mandated no-cause phrase.
    NoCause,
    /// The rationale commits to one clause.
    Attributed(usize),
    /// A rationale with no single grounded clause.
    Open,
}

pub fn parse_analysis(text: &str, doc: &Document, threshold: f64, prompts: &PromptSet) -> Result<Analysis, String> {
    if text.trim().is_empty() {
        return Err("empty answer".into());
    }
    if contains_marker(text, &prompts.no_cause) {
        return Ok(Analysis::NoCause);
    }
    if let Some(segment) = after_last(&CAUSE_MARKER, text) {
        return match resolve_clause(first_line(segment), doc, threshold) {
            Resolution::Index(i) => Ok(Analysis::Attributed(i)),
            Resolution::OutOfRange(i) => Err(format!("cause clause {i} is outside 1..={}", doc.len())),
            Resolution::Ambiguous | Resolution::Unresolved => Ok(Analysis::Open),
        };
    }
    match citations(text).into_iter().rev().find(|i| doc.contains_index(*i)) {
        Some(i) => Ok(Analysis::Attributed(i)),
        None => Ok(Analysis::Open),
    }
}

/// Emotion clause named by an analysis written without a locating step.
pub fn parse_emotion_clause(text: &str, doc: &Document, threshold: f64) -> Result<usize, String> {
    let segment = after_first(&EMOTION_MARKER, text).map(first_line).unwrap_or_else(|| first_line(text));
    match resolve_clause(segment, doc, threshold) {
        Resolution::Index(i) => Ok(i),
        Resolution::OutOfRange(i) => Err(format!("emotion clause {i} is outside 1..={}", doc.len())),
        _ => match citations(text).first() {
            Some(&i) if doc.contains_index(i) => Ok(i),
            _ => Err("no emotion clause cited".into()),
        },
    }
}

/// Outcome of a summarizing answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Summary {
    /// The cause cannot be pinned to one clause.
    NotSingle,
    Cause { index: usize, span: String },
}

pub fn parse_summary(text: &str, doc: &Document, threshold: f64, prompts: &PromptSet) -> Result<Summary, String> {
    if text.trim().is_empty() {
        return Err("empty answer".into());
    }
    if contains_marker(text, &prompts.not_single_clause) {
        return Ok(Summary::NotSingle);
    }
    let segment = after_last(&CAUSE_MARKER, text).map(first_line).unwrap_or_else(|| text.trim());
    match resolve_clause(segment, doc, threshold) {
        Resolution::Index(index) => Ok(Summary::Cause { index, span: cause_span(segment) }),
        Resolution::Ambiguous => Ok(Summary::NotSingle),
        Resolution::OutOfRange(i) => Err(format!("cause clause {i} is outside 1..={}", doc.len())),
        Resolution::Unresolved => Err("cause does not match any clause".into()),
    }
}

/// The model's wording of the cause with clause citations removed.
fn cause_span(segment: &str) -> String {
    let s = CITATION.replace_all(segment, "");
    let s = LEADING_NUMBER.replace(&s, "");
    strip_quotes(s.trim().trim_start_matches(['.', ':', '：', '-', ' '])).to_string()
}

fn after_last<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.find_iter(text).last().map(|m| &text[m.end()..])
}

fn after_first<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.find(text).map(|m| &text[m.end()..])
}

fn first_line(s: &str) -> &str {
    s.trim_start().lines().next().unwrap_or("").trim()
}

/// Pairs from a single-prompt answer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<(usize, usize)>,
    /// Cited pairs dropped for referencing clauses outside the document.
    pub dropped: usize,
    /// The answer explicitly reported no pairs.
    pub none: bool,
}

impl PairList {
    /// Nothing usable and no explicit "none".
    pub fn is_failure(&self) -> bool {
        self.pairs.is_empty() && self.dropped == 0 && !self.none
    }
}

pub fn parse_pairs(text: &str, doc: &Document, threshold: f64, prompts: &PromptSet) -> PairList {
    let mut list = PairList { none: is_none_answer(text, prompts), ..Default::default() };
    let push = |list: &mut PairList, e: usize, c: usize| {
        if !doc.contains_index(e) || !doc.contains_index(c) {
            list.dropped += 1;
        } else if !list.pairs.contains(&(e, c)) {
            list.pairs.push((e, c));
        }
    };
    for line in text.lines() {
        let mut found = false;
        for cap in PAIR.captures_iter(line) {
            found = true;
            let (Ok(e), Ok(c)) = (cap[1].parse(), cap[2].parse()) else { continue };
            push(&mut list, e, c);
        }
        if found {
            continue;
        }
        // "Emotion clause: ... Cause clause: ..." on one line
        let (Some(em), Some(cm)) = (EMOTION_MARKER.find(line), CAUSE_MARKER.find_iter(line).last()) else {
            continue;
        };
        if cm.start() <= em.end() {
            continue;
        }
        let emotion = &line[em.end()..cm.start()];
        let cause = &line[cm.end()..];
        match (resolve_clause(emotion, doc, threshold), resolve_clause(cause, doc, threshold)) {
            (Resolution::Index(e), Resolution::Index(c)) => push(&mut list, e, c),
            (Resolution::OutOfRange(_), _) | (_, Resolution::OutOfRange(_)) => list.dropped += 1,
            _ => {}
        }
    }
    list
}
