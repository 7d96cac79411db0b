//! Tokenization and the embedded stopword list.

use std::collections::HashSet;
use std::sync::OnceLock;

static STOPWORDS_TXT: &str = include_str!("../data/stopwords_en.txt");

/// Version tag of the embedded stopword list, echoed into artifacts.
pub const STOPWORDS_VERSION: &str = "stopwords-en-v1";

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
///
/// Interior characters are kept, so `v1.2` and `q3-report` survive as single
/// tokens. Tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Unique tokens in order of first appearance.
pub fn unique_in_order<'a, I>(tokens: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut seen = HashSet::new();
    tokens
        .into_iter()
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect()
}
