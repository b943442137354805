//! Versioned prompt templates, one set per language.
//!
//! Templates use `{name}` placeholders. Every DECC step has a template, plus
//! the bridging prompts used when a step is disabled and the single-prompt
//! baseline. Sets serialize to JSON so a deployment can ship its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::types::{Language, Step};

pub const PROMPT_VERSION: &str = "decc-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub language: Language,
    /// `{document}`: numbered clauses.
    pub system: String,
    pub recognize: String,
    /// `{keyword}`
    pub locate_implicit: String,
    /// Used without the recognizing step.
    pub locate_direct: String,
    /// `{index}`, `{clause}`, `{keywords}`
    pub analyze: String,
    /// Used without the locating step. `{keyword}`
    pub analyze_keyword: String,
    /// `{index}`
    pub summarize: String,
    /// Prepended to `summarize` when steps run in separate sessions.
    /// `{index}`, `{rationale}`
    pub summarize_context: String,
    /// Used without the analyzing step. `{index}`, `{clause}`
    pub summarize_direct: String,
    pub naive: String,
    /// `{format}`
    pub reminder: String,
    /// Format hints keyed by step name. `{n}`: clause count.
    pub formats: BTreeMap<String, String>,
    /// `{n}`, `{document}`, `{instruction}`
    pub demo_block: String,
    /// Generic per-step instruction shown in demonstration blocks.
    pub demo_instructions: BTreeMap<String, String>,
    /// Answer meaning "nothing here" (no emotion, no clause, no pair).
    pub none_markers: Vec<String>,
    /// Mandated answer when an emotion has no reason in the document.
    pub no_cause: Vec<String>,
    /// Mandated answer when a cause spans more than one clause.
    pub not_single_clause: Vec<String>,
}

impl PromptSet {
    pub fn english() -> Self {
        let formats = [
            ("recognize", "List only the emotional keywords separated by commas, or \"none\"."),
            ("locate", "Answer only \"clause N\" with N between 1 and {n}, or \"none\"."),
            ("locate_direct", "Answer one line per emotion clause as \"clause N: emotion\" with N between 1 and {n}, or \"none\"."),
            ("analyze", "Give the step-by-step analysis and finish with \"Cause: clause N\", or answer \"no obvious cause\"."),
            ("summarize", "Answer only \"Cause clause: clause N\" with N between 1 and {n}, or \"no single clause\"."),
            ("naive", "Output one pair per line as \"(emotion clause N, cause clause M)\", or \"none\"."),
        ];
        let demo_instructions = [
            ("recognize", "Please recognize emotions referred from the given context"),
            ("locate", "Locate the clauses where emotions occur, we call them emotion clauses, abandon those emotions that have no origin clause"),
            ("analyze", "Based on these emotion clauses, analyze why each one could happen, step by step"),
            ("summarize", "For each emotion, select a most probable clause to be its cause, and output the pair of emotion clause and cause clause"),
        ];
        PromptSet {
            version: PROMPT_VERSION.to_string(),
            language: Language::En,
            system: "Context:\n{document}\nAccording to the given context, each number at the beginning of line represents a clause, complete the following tasks, do not output uncertain answer.".into(),
            recognize: "Please recognize emotions referred from the given context. Answer with the emotional keywords separated by commas, or \"none\" if no emotion is expressed.".into(),
            locate_implicit: "Locate the clause where the emotion \"{keyword}\" occurs. The keyword does not appear literally, so find the clause that implicitly expresses it. Answer \"clause N\", or \"none\" if the emotion has no origin clause.".into(),
            locate_direct: "Locate the clauses where emotions occur, we call them emotion clauses. Answer one per line as \"clause N: emotion\", or \"none\" if no clause expresses an emotion.".into(),
            analyze: "Emotion clause: clause {index}. \"{clause}\" (emotion: {keywords}). Based on this emotion clause, analyze why the emotion could happen, step by step. Finish with \"Cause: clause N\". If the emotion has no obvious reason in the context, answer \"no obvious cause\".".into(),
            analyze_keyword: "Emotion: \"{keyword}\". Find the clause expressing this emotion and analyze why it could happen, step by step. Start with \"Emotion clause: clause N\" and finish with \"Cause: clause N\". If the emotion has no obvious reason in the context, answer \"no obvious cause\".".into(),
            summarize: "For the emotion in clause {index}, select the most probable clause to be its cause and output it as \"Cause clause: clause N\". If the cause cannot be attributed to a single clause, answer \"no single clause\".".into(),
            summarize_context: "Analysis of the emotion in clause {index}:\n{rationale}\n\n".into(),
            summarize_direct: "Emotion clause: clause {index}. \"{clause}\". Select the most probable clause to be its cause and output it as \"Cause clause: clause N\". If the cause cannot be attributed to a single clause, answer \"no single clause\".".into(),
            naive: "Extract all emotion-cause pairs from the given context. Output each pair on its own line as \"(emotion clause N, cause clause M)\", or \"none\" if there is no pair.".into(),
            reminder: "Your previous answer did not follow the required format. {format}".into(),
            formats: formats.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            demo_block: "Example {n}:\nContext:\n{document}\n{instruction}".into(),
            demo_instructions: demo_instructions.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            none_markers: vec!["none".into(), "no emotion".into(), "no emotions".into(), "no pair".into(), "no pairs".into()],
            no_cause: vec!["no obvious cause".into(), "no obvious reason".into()],
            not_single_clause: vec!["no single clause".into(), "none explicitly mentioned".into()],
        }
    }

    pub fn chinese() -> Self {
        let formats = [
            ("recognize", "只输出用逗号分隔的情感关键词，或回答“无”。"),
            ("locate", "只回答“子句N”（N在1到{n}之间），或回答“无”。"),
            ("locate_direct", "每行一个情感子句，格式为“子句N：情感”（N在1到{n}之间），或回答“无”。"),
            ("analyze", "给出逐步分析并以“原因：子句N”结尾，或回答“没有明显原因”。"),
            ("summarize", "只回答“原因子句：子句N”（N在1到{n}之间），或回答“无法归因于单个子句”。"),
            ("naive", "每行输出一对，格式为“(情感子句N, 原因子句M)”，或回答“无”。"),
        ];
        let demo_instructions = [
            ("recognize", "请识别给定文本中涉及的情感"),
            ("locate", "定位情感出现的子句，称为情感子句，舍弃没有来源子句的情感"),
            ("analyze", "基于这些情感子句，逐步分析每个情感产生的原因"),
            ("summarize", "对每个情感，选择最可能的原因子句，输出情感子句与原因子句对"),
        ];
        PromptSet {
            version: PROMPT_VERSION.to_string(),
            language: Language::Zh,
            system: "文本：\n{document}\n根据给定文本，每行开头的数字代表一个子句，完成以下任务，不要输出不确定的答案。".into(),
            recognize: "请识别给定文本中涉及的情感，用逗号分隔输出情感关键词；如果没有情感，回答“无”。".into(),
            locate_implicit: "情感“{keyword}”没有直接出现在文本中，请定位隐含表达该情感的子句，回答“子句N”；如果该情感没有来源子句，回答“无”。".into(),
            locate_direct: "请定位情感出现的子句，称为情感子句。每行一个，格式为“子句N：情感”；如果没有，回答“无”。".into(),
            analyze: "情感子句：子句{index}。“{clause}”（情感：{keywords}）。请基于该情感子句，逐步分析该情感产生的原因，最后以“原因：子句N”结尾。如果文本中该情感没有明显原因，请回答“没有明显原因”。".into(),
            analyze_keyword: "情感：“{keyword}”。请找出表达该情感的子句，并逐步分析其产生的原因。以“情感子句：子句N”开头，以“原因：子句N”结尾。如果没有明显原因，请回答“没有明显原因”。".into(),
            summarize: "对于子句{index}中的情感，选择最可能的原因子句，输出格式为“原因子句：子句N”；如果原因无法归结到单个子句，回答“无法归因于单个子句”。".into(),
            summarize_context: "子句{index}中情感的分析：\n{rationale}\n\n".into(),
            summarize_direct: "情感子句：子句{index}。“{clause}”。选择最可能的原因子句，输出格式为“原因子句：子句N”；如果原因无法归结到单个子句，回答“无法归因于单个子句”。".into(),
            naive: "请抽取给定文本中所有的情感-原因对，每行输出一对，格式为“(情感子句N, 原因子句M)”；如果没有，回答“无”。".into(),
            reminder: "你之前的回答不符合要求的格式。{format}".into(),
            formats: formats.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            demo_block: "示例{n}：\n文本：\n{document}\n{instruction}".into(),
            demo_instructions: demo_instructions.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            none_markers: vec!["无".into(), "没有".into(), "none".into()],
            no_cause: vec!["没有明显原因".into(), "no obvious cause".into()],
            not_single_clause: vec!["无法归因于单个子句".into(), "no single clause".into()],
        }
    }

    pub fn format_hint(&self, key: &str, clauses: usize) -> String {
        self.formats
            .get(key)
            .map(|f| render(f, &[("n", &clauses.to_string())]))
            .unwrap_or_default()
    }

    pub fn demo_instruction(&self, step: Step) -> &str {
        self.demo_instructions.get(step.name()).map(String::as_str).unwrap_or("")
    }
}

/// Prompt sets by language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRegistry {
    sets: BTreeMap<Language, PromptSet>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        let sets = [PromptSet::english(), PromptSet::chinese()]
            .into_iter()
            .map(|s| (s.language, s))
            .collect();
        PromptRegistry { sets }
    }
}

impl PromptRegistry {
    pub fn get(&self, language: Language) -> &PromptSet {
        self.sets
            .get(&language)
            .or_else(|| self.sets.values().next())
            .expect("registry holds at least one prompt set")
    }

    pub fn insert(&mut self, set: PromptSet) {
        self.sets.insert(set.language, set);
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let sets: Vec<PromptSet> = serde_json::from_str(&text).map_err(std::io::Error::other)?;
        let mut registry = PromptRegistry::default();
        for set in sets {
            registry.insert(set);
        }
        Ok(registry)
    }
}

/// Substitutes `{key}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_placeholders() {
        let set = PromptSet::english();
        let s = render(&set.analyze, &[("index", "5"), ("clause", "which made him angry"), ("keywords", "angry")]);
        assert!(s.starts_with("Emotion clause: clause 5. \"which made him angry\""));
        assert!(!s.contains('{'));
    }

    #[test]
    fn both_languages_cover_every_step() {
        let reg = PromptRegistry::default();
        for lang in [Language::En, Language::Zh] {
            let set = reg.get(lang);
            assert_eq!(set.language, lang);
            for step in Step::ALL {
                assert!(!set.demo_instruction(step).is_empty());
            }
            for key in ["recognize", "locate", "locate_direct", "analyze", "summarize", "naive"] {
                assert!(set.formats.contains_key(key), "{lang} {key}");
            }
        }
        assert_ne!(reg.get(Language::En).system, reg.get(Language::Zh).system);
    }

    #[test]
    fn sets_roundtrip_through_json() {
        let set = PromptSet::chinese();
        let back: PromptSet = serde_json::from_str(&serde_json::to_string(&set).unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
