//! Text normalization and token overlap shared by locating, cause resolution
//! and fuzzy pair matching.

use std::collections::BTreeSet;

use unicode_normalization::UnicodeNormalization;

/// Punctuation stripped from the end of a normalized string.
const TERMINAL_PUNCTUATION: &[char] = &[
    '.', ',', '!', '?', ';', ':', '。', '，', '！', '？', '；', '：', '、', '…',
];

/// Canonical form used for containment tests and text equality.
///
/// NFKC, lowercased, interior whitespace collapsed, outer whitespace and
/// trailing punctuation removed. Idempotent.
pub fn normalize_text(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    let mut out = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = out
            .trim_end_matches(|c: char| TERMINAL_PUNCTUATION.contains(&c) || c.is_whitespace())
            .to_string();
        if trimmed == out {
            break;
        }
        out = trimmed;
    }
    out
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

/// Tokens of a string after normalization.
///
/// Latin-script text splits on anything that is not alphanumeric or an
/// apostrophe; every CJK ideograph is a token on its own.
pub fn tokens(s: &str) -> Vec<String> {
    let norm = normalize_text(s);
    let mut out = Vec::new();
    let mut word = String::new();
    for c in norm.chars() {
        if is_cjk(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() || c == '\'' {
            word.push(c);
        } else if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Jaccard similarity between the token sets of two strings. Two empty
/// strings have similarity 0.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokens(a).into_iter().collect();
    let b: BTreeSet<String> = tokens(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Whether `needle` occurs in `haystack` once both are normalized.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = normalize_text(needle);
    !needle.is_empty() && normalize_text(haystack).contains(&needle)
}

/// Strips surrounding quote characters and whitespace.
pub fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '「' | '」' | '《' | '》' | '`'))
        .trim()
}

/// Fraction of non-whitespace characters that are CJK ideographs.
pub fn cjk_ratio(s: &str) -> f64 {
    let mut total = 0usize;
    let mut cjk = 0usize;
    for c in s.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if is_cjk(c) {
            cjk += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        cjk as f64 / total as f64
    }
}

/// Removes the word-segmentation spaces some corpora insert between CJK
/// characters while keeping spaces between Latin words.
pub fn join_cjk_segments(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ' ' {
            let prev = out.chars().last();
            let next = chars[i + 1..].iter().copied().find(|c| *c != ' ');
            let cjk_side = prev.is_some_and(|p| is_cjk(p) || !p.is_ascii())
                || next.is_some_and(|n| is_cjk(n) || !n.is_ascii());
            if cjk_side || prev == Some(' ') {
                continue;
            }
        }
        out.push(c);
    }
    out.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizes_whitespace_and_terminal_punctuation() {
        assert_eq!(normalize_text("  He regretted  the fire. "), "he regretted the fire");
        assert_eq!(normalize_text(""), "");
        assert_eq!(
            normalize_text("Susan's eyes have tears twinkling"),
            "susan's eyes have tears twinkling"
        );
        assert_eq!(normalize_text("我激动得不能自已。"), "我激动得不能自已");
        assert_eq!(normalize_text("what?! ..."), "what");
    }

    #[test]
    fn fullwidth_forms_fold() {
        assert_eq!(normalize_text("ＡＢＣ１"), "abc1");
    }

    #[test]
    fn cjk_tokens_are_characters() {
        assert_eq!(tokens("我 激动"), vec!["我", "激", "动"]);
        assert_eq!(tokens("Susan's eyes, wet"), vec!["susan's", "eyes", "wet"]);
    }

    #[test]
    fn jaccard_of_paraphrased_cause() {
        let j = token_jaccard(
            "achieve the functionality using software",
            "they achieved the functionality solely using software",
        );
        assert!((j - 0.5).abs() < 1e-12);
        assert_eq!(token_jaccard("", ""), 0.0);
    }

    #[test]
    fn joins_segmented_chinese() {
        assert_eq!(join_cjk_segments("当 我 看到 建议 被 采纳"), "当我看到建议被采纳");
        assert_eq!(join_cjk_segments("he  saw it"), "he saw it");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn jaccard_is_symmetric_and_bounded(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
            let x = token_jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, token_jaccard(&b, &a));
        }
    }
}
