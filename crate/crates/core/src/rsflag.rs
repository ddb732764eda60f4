//! Binary flag assignment for LLM-generated class captions.
//!
//! A caption is flagged 1 when it contains at least one domain-positive
//! token, no negative tokens, and its whitespace-delimited word count lies
//! inside the configured bounds. Token matching is case-insensitive and
//! word-boundary aware: a boundary is the start/end of the string or any
//! non-alphanumeric character, so "street" does not match inside
//! "mainstreet", while the hyphen in "close-up" is part of the phrase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POSITIVE_TOKENS: [&str; 7] = [
    "overhead",
    "aerial view",
    "satellite imagery",
    "nadir",
    "orthorectified",
    "multispectral",
    "SAR",
];

pub const DEFAULT_NEGATIVE_TOKENS: [&str; 6] = [
    "street",
    "indoor",
    "selfie",
    "portrait",
    "close-up",
    "ground level",
];

/// Token lists and length bounds for flag assignment. The lists are data,
/// not code: they can be overridden from the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsFlagRuleset {
    pub positive_tokens: Vec<String>,
    pub negative_tokens: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for RsFlagRuleset {
    fn default() -> Self {
        Self {
            positive_tokens: DEFAULT_POSITIVE_TOKENS.iter().map(|s| s.to_string()).collect(),
            negative_tokens: DEFAULT_NEGATIVE_TOKENS.iter().map(|s| s.to_string()).collect(),
            min_words: 6,
            max_words: 20,
        }
    }
}

impl RsFlagRuleset {
    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.max_words == 0 {
            return Err(Error::InvalidParameter(
                "word-count bounds must be positive".into(),
            ));
        }
        if self.min_words > self.max_words {
            return Err(Error::InvalidParameter(format!(
                "min_words {} exceeds max_words {}",
                self.min_words, self.max_words
            )));
        }
        if self
            .positive_tokens
            .iter()
            .chain(&self.negative_tokens)
            .any(|t| t.trim().is_empty())
        {
            return Err(Error::InvalidParameter("empty token phrase".into()));
        }
        Ok(())
    }
}

/// One LLM-generated class description with its flag and cached embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub class_index: usize,
    pub caption_index: usize,
    pub text: String,
    pub rs_flag: Option<u8>,
    pub embedding: Option<Vec<f64>>,
}

impl CaptionCandidate {
    pub fn new(class_index: usize, caption_index: usize, text: impl Into<String>) -> Self {
        Self {
            class_index,
            caption_index,
            text: text.into(),
            rs_flag: None,
            embedding: None,
        }
    }
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn fold(s: &str) -> Vec<char> {
    s.chars().flat_map(char::to_lowercase).collect()
}

/// Case-insensitive, word-boundary-matched phrase search. Multi-word
/// phrases match across single spaces; hyphens inside the phrase are
/// matched literally.
pub fn contains_token(text: &str, phrase: &str) -> bool {
    let t = fold(text);
    let p = fold(phrase);
    if p.is_empty() || p.len() > t.len() {
        return false;
    }
    for start in 0..=(t.len() - p.len()) {
        if t[start..start + p.len()] != p[..] {
            continue;
        }
        let before_ok = start == 0 || !t[start - 1].is_alphanumeric();
        let end = start + p.len();
        let after_ok = end == t.len() || !t[end].is_alphanumeric();
        if before_ok && after_ok {
            return true;
        }
    }
    false
}

/// Returns 1 iff the caption has at least one positive token, no negative
/// tokens, and an in-bounds word count. Class-specific content cues are
/// never enforced.
pub fn assign_flag(text: &str, rules: &RsFlagRuleset) -> u8 {
    let words = word_count(text);
    if words < rules.min_words || words > rules.max_words {
        return 0;
    }
    let has_positive = rules.positive_tokens.iter().any(|p| contains_token(text, p));
    if !has_positive {
        return 0;
    }
    let has_negative = rules.negative_tokens.iter().any(|n| contains_token(text, n));
    u8::from(!has_negative)
}

/// Populate every candidate's flag, preserving order and all other fields.
pub fn annotate_corpus(captions: Vec<CaptionCandidate>, rules: &RsFlagRuleset) -> Vec<CaptionCandidate> {
    captions
        .into_iter()
        .map(|mut c| {
            c.rs_flag = Some(assign_flag(&c.text, rules));
            c
        })
        .collect()
}
