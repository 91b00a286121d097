use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::lexicon::default_stopwords;

/// Social-media text cleanup applied before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessRules {
    pub strip_urls: bool,
    pub strip_mentions: bool,
    /// Drops the reserved tweet tokens `RT` and `FAV`.
    pub strip_reserved: bool,
    pub drop_digit_tokens: bool,
    pub remove_stopwords: bool,
    /// Overrides the bundled stopword list when set.
    pub stopwords: Option<BTreeSet<String>>,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            strip_urls: true,
            strip_mentions: true,
            strip_reserved: true,
            drop_digit_tokens: true,
            remove_stopwords: true,
            stopwords: None,
        }
    }
}

const RESERVED_WORDS: [&str; 2] = ["rt", "fav"];

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").expect("valid regex"))
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w*").expect("valid regex"))
}

fn bundled_stopwords() -> &'static BTreeSet<String> {
    static SW: OnceLock<BTreeSet<String>> = OnceLock::new();
    SW.get_or_init(default_stopwords)
}

/// A reusable preprocessor; resolves the stopword list once.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    rules: PreprocessRules,
}

impl Preprocessor {
    pub fn new(rules: PreprocessRules) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &PreprocessRules {
        &self.rules
    }

    fn stopwords(&self) -> &BTreeSet<String> {
        self.rules.stopwords.as_ref().unwrap_or_else(|| bundled_stopwords())
    }

    /// URLs, mentions, emoji and punctuation out; lowercase; split on
    /// whitespace; drop digit-bearing tokens, reserved words and stopwords.
    pub fn tokens(&self, raw: &str) -> Vec<String> {
        let mut text = raw.to_owned();
        if self.rules.strip_urls {
            text = url_re().replace_all(&text, " ").into_owned();
        }
        if self.rules.strip_mentions {
            text = mention_re().replace_all(&text, " ").into_owned();
        }
        let cleaned: String = text
            .to_lowercase()
            .chars()
            .filter_map(|c| {
                if c.is_whitespace() {
                    Some(' ')
                } else if c.is_ascii_lowercase() || c.is_ascii_digit() {
                    Some(c)
                } else {
                    None
                }
            })
            .collect();
        let stopwords = self.stopwords();
        cleaned
            .split_whitespace()
            .filter(|t| !(self.rules.drop_digit_tokens && t.bytes().any(|b| b.is_ascii_digit())))
            .filter(|t| !(self.rules.strip_reserved && RESERVED_WORDS.contains(t)))
            .filter(|t| !(self.rules.remove_stopwords && stopwords.contains(*t)))
            .map(str::to_owned)
            .collect()
    }
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(PreprocessRules::default())
    }
}

pub fn preprocess(raw_text: &str, rules: &PreprocessRules) -> Vec<String> {
    Preprocessor::new(rules.clone()).tokens(raw_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tweet_example() {
        let toks = preprocess(
            "I took 2 pills and felt dizzy! http://t.co",
            &PreprocessRules::default(),
        );
        assert_eq!(toks, ["took", "pills", "felt", "dizzy"]);
    }

    #[test]
    fn everything_removed() {
        assert!(preprocess("@user RT 😞", &PreprocessRules::default()).is_empty());
    }

    #[test]
    fn punctuation_and_emoji_deleted_in_place() {
        let toks = preprocess("Can't sleep😞 #insomnia www.x.com/y", &PreprocessRules::default());
        assert_eq!(toks, ["cant", "sleep", "insomnia"]);
    }

    #[test]
    fn rules_can_be_disabled() {
        let rules = PreprocessRules {
            remove_stopwords: false,
            drop_digit_tokens: false,
            ..Default::default()
        };
        assert_eq!(preprocess("I took 2 pills", &rules), ["i", "took", "2", "pills"]);
    }

    #[test]
    fn custom_stopwords() {
        let rules = PreprocessRules {
            stopwords: Some(["pills".to_string()].into_iter().collect()),
            ..Default::default()
        };
        assert_eq!(preprocess("I took pills", &rules), ["i", "took"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn idempotent(line in r"(?:[A-Za-z0-9 @#!?.,:/'😞é-]|https?://|www\.|RT |fav ){0,40}") {
            let rules = PreprocessRules::default();
            let once = preprocess(&line, &rules);
            let twice = preprocess(&once.join(" "), &rules);
            prop_assert_eq!(once, twice);
        }
    }
}
