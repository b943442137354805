//! Corpus loading, canonical JSONL serialization and gold-label statistics.
//!
//! The canonical format is one JSON object per line:
//! `{"id": "...", "language": "zh"|"en", "clauses": ["..."], "pairs": [[e, c]]}`
//! with 1-based pair indices. The raw adapters read the block layout the
//! published ECPE corpora use:
//!
//! ```text
//! <doc id> <clause count>
//!  (e, c), (e, c)
//! <clause index>,<emotion>,<keyword>,<clause text>
//! ...
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::types::{validate_document, Document, DocumentRecord, Language, RawClause, RawDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    CanonicalJsonl,
    Xia2019Raw,
    Singh2021Raw,
    RebalancedRaw,
}

impl FromStr for CorpusFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical-jsonl" | "jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "xia2019-raw" => Ok(CorpusFormat::Xia2019Raw),
            "singh2021-raw" => Ok(CorpusFormat::Singh2021Raw),
            "rebalanced-raw" => Ok(CorpusFormat::RebalancedRaw),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::CanonicalJsonl => "canonical-jsonl",
            CorpusFormat::Xia2019Raw => "xia2019-raw",
            CorpusFormat::Singh2021Raw => "singh2021-raw",
            CorpusFormat::RebalancedRaw => "rebalanced-raw",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    documents: Vec<Document>,
}

impl Corpus {
    /// Fails on duplicate document ids.
    pub fn new(name: impl Into<String>, split: Split, documents: Vec<Document>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, doc) in documents.iter().enumerate() {
            if !seen.insert(doc.id().to_string()) {
                return Err(DatasetError::DuplicateId { line: i + 1, id: doc.id().to_string() });
            }
        }
        Ok(Corpus { name: name.into(), split, documents })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id() == id)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Keeps the documents satisfying `pred`, preserving order.
    pub fn filter(&self, pred: impl Fn(&Document) -> bool) -> Corpus {
        Corpus {
            name: self.name.clone(),
            split: self.split,
            documents: self.documents.iter().filter(|d| pred(d)).cloned().collect(),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, DatasetError> {
    let content = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    parse_corpus(&name, &content, format)
}

/// Parses corpus text already in memory.
pub fn parse_corpus(name: &str, content: &str, format: CorpusFormat) -> Result<Corpus, DatasetError> {
    let records = match format {
        CorpusFormat::CanonicalJsonl => parse_canonical(content)?,
        CorpusFormat::Xia2019Raw | CorpusFormat::RebalancedRaw => parse_blocks(content, Some(Language::Zh))?,
        CorpusFormat::Singh2021Raw => parse_blocks(content, Some(Language::En))?,
    };

    let mut documents = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    let mut untagged: Option<(Language, usize)> = None;
    for (line, raw) in records {
        let tagged = raw.language.is_some();
        let doc = validate_document(raw).map_err(|source| DatasetError::Invalid { line, source })?;
        if !tagged {
            match untagged {
                None => untagged = Some((doc.language(), line)),
                Some((lang, _)) if lang != doc.language() => return Err(DatasetError::MixedLanguage { line }),
                Some(_) => {}
            }
        }
        if !seen.insert(doc.id().to_string()) {
            return Err(DatasetError::DuplicateId { line, id: doc.id().to_string() });
        }
        documents.push(doc);
    }
    Ok(Corpus { name: name.to_string(), split: Split::All, documents })
}

fn parse_canonical(content: &str) -> Result<Vec<(usize, RawDocument)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::Malformed { line: line_no, message: e.to_string() })?;
        out.push((line_no, RawDocument::from(rec)));
    }
    Ok(out)
}

fn parse_pairs_line(line: &str, line_no: usize) -> Result<Vec<(i64, i64)>, DatasetError> {
    let malformed = |message: String| DatasetError::Malformed { line: line_no, message };
    let mut pairs = Vec::new();
    let mut rest = line.trim();
    while let Some(open) = rest.find('(') {
        let close = rest[open..]
            .find(')')
            .map(|c| open + c)
            .ok_or_else(|| malformed(format!("unterminated pair in {line:?}")))?;
        let inner = &rest[open + 1..close];
        let mut parts = inner.split(',').map(str::trim);
        let (Some(e), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(malformed(format!("expected (e, c), got ({inner})")));
        };
        let e = e.parse().map_err(|_| malformed(format!("bad emotion index {e:?}")))?;
        let c = c.parse().map_err(|_| malformed(format!("bad cause index {c:?}")))?;
        pairs.push((e, c));
        rest = &rest[close + 1..];
    }
    if pairs.is_empty() && !line.trim().is_empty() {
        return Err(malformed(format!("no pairs in {line:?}")));
    }
    Ok(pairs)
}

fn parse_blocks(content: &str, language: Option<Language>) -> Result<Vec<(usize, RawDocument)>, DatasetError> {
    let lines: Vec<&str> = content.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let header_line = i + 1;
        let mut header = lines[i].split_whitespace();
        let (Some(id), Some(count), None) = (header.next(), header.next(), header.next()) else {
            return Err(DatasetError::Malformed {
                line: header_line,
                message: format!("expected '<doc id> <clause count>', got {:?}", lines[i]),
            });
        };
        let count: usize = count.parse().map_err(|_| DatasetError::Malformed {
            line: header_line,
            message: format!("bad clause count {count:?}"),
        })?;
        let pairs_line = lines.get(i + 1).ok_or(DatasetError::Malformed {
            line: header_line + 1,
            message: "missing pairs line".into(),
        })?;
        let pairs = parse_pairs_line(pairs_line, header_line + 1)?;

        let mut clauses = Vec::with_capacity(count);
        for k in 0..count {
            let line_no = header_line + 2 + k;
            let line = lines.get(i + 2 + k).ok_or(DatasetError::Malformed {
                line: line_no,
                message: format!("document {id} declares {count} clauses but the file ends"),
            })?;
            let mut fields = line.splitn(4, ',');
            let (Some(idx), Some(_emotion), Some(_keyword), Some(text)) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(DatasetError::Malformed {
                    line: line_no,
                    message: format!("expected '<index>,<emotion>,<keyword>,<text>', got {line:?}"),
                });
            };
            let index: i64 = idx.trim().parse().map_err(|_| DatasetError::Malformed {
                line: line_no,
                message: format!("bad clause index {idx:?}"),
            })?;
            let text = if language == Some(Language::Zh) {
                crate::text::join_cjk_segments(text)
            } else {
                text.trim().to_string()
            };
            clauses.push(RawClause { index: Some(index), text });
        }
        out.push((header_line, RawDocument { id: id.to_string(), language, clauses, pairs }));
        i += 2 + count;
    }
    Ok(out)
}

/// Serializes a corpus in the canonical format, one document per line.
pub fn write_corpus(corpus: &Corpus, mut out: impl Write) -> std::io::Result<()> {
    for doc in corpus.documents() {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_documents: usize,
    pub one_pair_documents: usize,
    pub multi_pair_documents: usize,
    pub total_pairs: usize,
}

pub fn stats(corpus: &Corpus) -> CorpusStats {
    let mut s = CorpusStats { total_documents: corpus.len(), ..Default::default() };
    for doc in corpus.documents() {
        match doc.gold_pairs().len() {
            0 => {}
            1 => s.one_pair_documents += 1,
            _ => s.multi_pair_documents += 1,
        }
        s.total_pairs += doc.gold_pairs().len();
    }
    s
}

/// Pair counts keyed by `emotion_index - cause_index`; positive offsets mean
/// the cause precedes its emotion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionHistogram {
    pub counts: BTreeMap<i64, usize>,
}

impl PositionHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Share of pairs whose cause is the emotion clause or one of its
    /// neighbours.
    pub fn adjacent_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let near: usize = (-1..=1).filter_map(|o| self.counts.get(&o)).sum();
        near as f64 / total as f64
    }
}

pub fn position_histogram(corpus: &Corpus) -> PositionHistogram {
    let mut hist = PositionHistogram::default();
    for doc in corpus.documents() {
        for &(e, c) in doc.gold_pairs() {
            *hist.counts.entry(e as i64 - c as i64).or_default() += 1;
        }
    }
    hist
}

/// Documents carrying at least two gold pairs.
pub fn filter_multipair(corpus: &Corpus) -> Corpus {
    corpus.filter(|d| d.gold_pairs().len() >= 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = r#"{"id":"fig1","language":"en","clauses":["a","b","c","d","e","f","g"],"pairs":[[2,2],[5,4]]}"#;

    fn corpus(lines: &[&str]) -> Corpus {
        parse_corpus("t", &lines.join("\n"), CorpusFormat::CanonicalJsonl).unwrap()
    }

    #[test]
    fn loads_three_documents() {
        let c = corpus(&[
            r#"{"id":"a","language":"en","clauses":["x"],"pairs":[[1,1]]}"#,
            r#"{"id":"b","language":"en","clauses":["x","y"],"pairs":[[2,1]]}"#,
            r#"{"id":"c","language":"en","clauses":["x"],"pairs":[]}"#,
        ]);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn clause_zero_is_rejected_at_its_line() {
        let content = [r#"{"id":"a","language":"en","clauses":["x"],"pairs":[[1,1]]}"#,
            r#"{"id":"b","language":"en","clauses":["x","y"],"pairs":[[0,1]]}"#].join("\n");
        let err = parse_corpus("t", &content, CorpusFormat::CanonicalJsonl).unwrap_err();
        assert!(matches!(err, DatasetError::Invalid { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_corpus("t", "\n{nope", CorpusFormat::CanonicalJsonl).unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
    }

    #[test]
    fn unknown_format() {
        assert!(matches!("csv".parse::<CorpusFormat>(), Err(DatasetError::UnknownFormat(_))));
    }

    #[test]
    fn mixed_untagged_languages_are_rejected() {
        let content = [r#"{"id":"a","clauses":["he was happy"],"pairs":[]}"#,
            r#"{"id":"b","clauses":["我很高兴"],"pairs":[]}"#].join("\n");
        let err = parse_corpus("t", &content, CorpusFormat::CanonicalJsonl).unwrap_err();
        assert!(matches!(err, DatasetError::MixedLanguage { line: 2 }), "{err}");
        // tagged documents may mix freely
        let content = [r#"{"id":"a","language":"en","clauses":["he was happy"]}"#,
            r#"{"id":"b","language":"zh","clauses":["我很高兴"]}"#].join("\n");
        assert_eq!(parse_corpus("t", &content, CorpusFormat::CanonicalJsonl).unwrap().len(), 2);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let content = [FIG1, FIG1].join("\n");
        assert!(matches!(
            parse_corpus("t", &content, CorpusFormat::CanonicalJsonl),
            Err(DatasetError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn parses_block_layout() {
        let raw = "1 3\n (3, 2), (3, 3)\n1,null,null,当 我 看到\n2,null,null,建议 被 采纳\n3,happiness,激动,我 激动 得 不能 自已\n\
                   2 2\n (1, 1)\n1,surprise,surprised,He was surprised, and glad\n2,null,null,she left\n";
        let zh = parse_corpus("zh", raw, CorpusFormat::Xia2019Raw).unwrap();
        let doc = &zh.documents()[0];
        assert_eq!(doc.clause_text(1), Some("当我看到"));
        assert_eq!(doc.gold_pairs(), &[(3, 2), (3, 3)]);
        assert_eq!(doc.language(), Language::Zh);
        let en = parse_corpus("en", raw, CorpusFormat::Singh2021Raw).unwrap();
        assert_eq!(en.documents()[1].clause_text(1), Some("He was surprised, and glad"));
    }

    #[test]
    fn block_layout_zero_based_is_renumbered() {
        let raw = "7 2\n (1, 0)\n0,null,null,he lost\n1,sadness,sad,he was sad\n";
        let c = parse_corpus("r", raw, CorpusFormat::RebalancedRaw).unwrap();
        assert_eq!(c.documents()[0].gold_pairs(), &[(2, 1)]);
    }

    #[test]
    fn truncated_block_is_malformed() {
        let err = parse_corpus("r", "1 3\n (1, 1)\n1,a,b,c\n", CorpusFormat::Xia2019Raw).unwrap_err();
        assert!(matches!(err, DatasetError::Malformed { line: 4, .. }), "{err}");
    }

    #[test]
    fn stats_of_two_pair_document() {
        let c = corpus(&[r#"{"id":"a","language":"en","clauses":["x","y"],"pairs":[[1,1],[2,1]]}"#]);
        assert_eq!(
            stats(&c),
            CorpusStats { total_documents: 1, one_pair_documents: 0, multi_pair_documents: 1, total_pairs: 2 }
        );
    }

    #[test]
    fn histogram_of_figure_one_pairs() {
        let h = position_histogram(&corpus(&[FIG1]));
        assert_eq!(h.counts, BTreeMap::from([(0, 1), (1, 1)]));
        assert_eq!(h.adjacent_share(), 1.0);
    }

    #[test]
    fn same_clause_pairs_put_all_mass_at_zero() {
        let c = corpus(&[
            r#"{"id":"a","language":"en","clauses":["x","y"],"pairs":[[1,1],[2,2]]}"#,
            r#"{"id":"b","language":"en","clauses":["x"],"pairs":[[1,1]]}"#,
        ]);
        assert_eq!(position_histogram(&c).counts, BTreeMap::from([(0, 3)]));
    }

    #[test]
    fn multipair_filter() {
        let one = r#"{"id":"a","language":"en","clauses":["x"],"pairs":[[1,1]]}"#;
        let two = r#"{"id":"b","language":"en","clauses":["x","y"],"pairs":[[1,1],[2,1]]}"#;
        let f = filter_multipair(&corpus(&[one, two]));
        assert_eq!(f.documents().iter().map(|d| d.id()).collect::<Vec<_>>(), vec!["b"]);
        assert!(filter_multipair(&corpus(&[one])).is_empty());
        assert_eq!(filter_multipair(&f), f);
    }
}
