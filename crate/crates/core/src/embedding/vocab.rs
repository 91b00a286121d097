use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: usize = 4;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

const RESERVED_TOKENS: [&str; RESERVED] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered word list. The first four
    /// entries must be the reserved tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED || words[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Data(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut word_to_id = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary entry {w:?}")));
            }
            if word_to_id.insert(w.clone(), id as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self {
            word_to_id,
            id_to_word: words,
        })
    }

    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_word.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[RESERVED..]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, w) in self.id_to_word.iter().enumerate() {
            out.push_str(w);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses the `word<TAB>id` export. Ids must be dense and in order.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (word, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(idx + 1, "expected `word<TAB>id`"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format(idx + 1, format!("bad id {id:?}")))?;
            if id != words.len() {
                return Err(Error::format(
                    idx + 1,
                    format!("expected id {}, found {id}", words.len()),
                ));
            }
            words.push(word.to_owned());
        }
        Self::from_words(words)
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.id_to_word.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Vocab::from_words(words).map_err(serde::de::Error::custom)
    }
}

/// Builds a vocabulary from training sequences. Ids are assigned by
/// descending frequency, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(sequences: &[Vec<S>], min_freq: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for tok in seq {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let min_freq = min_freq.max(1);
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_freq && !RESERVED_TOKENS.contains(&w))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut words: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    words.extend(entries.into_iter().map(|(w, _)| w.to_owned()));
    Vocab::from_words(words)
}
