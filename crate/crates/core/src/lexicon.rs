//! Domain dictionary construction, trie storage and keyword extraction.
//!
//! The dictionary is built from a side-effect phrase list (one phrase per
//! line). Phrases are cut into words, normalized to lowercase ASCII letters,
//! and filtered by stopword list, digit content and minimum length. Keywords
//! are the input tokens that match a dictionary entry exactly.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// The bundled English stopword list.
pub fn default_stopwords() -> BTreeSet<String> {
    STOPWORDS_EN
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    /// Always the bundled list when deserialized.
    #[serde(skip)]
    pub stopwords: BTreeSet<String>,
    pub filter_stopwords: bool,
    pub min_word_length: usize,
    /// Drop tokens that contain a digit. When false, digits are deleted like
    /// any other non-letter character.
    pub strip_digits: bool,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            stopwords: default_stopwords(),
            filter_stopwords: true,
            min_word_length: 3,
            strip_digits: true,
        }
    }
}

impl DictionaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_word_length == 0 {
            return Err(Error::Config("min_word_length must be at least 1".into()));
        }
        if self.filter_stopwords && self.stopwords.is_empty() {
            return Err(Error::Config(
                "stopword filtering is enabled but the stopword list is empty".into(),
            ));
        }
        Ok(())
    }

    /// Normalizes a single whitespace-delimited token, returning `None` when
    /// the token is filtered out.
    pub fn normalize_word(&self, token: &str) -> Option<String> {
        let lower = token.to_lowercase();
        if self.strip_digits && lower.chars().any(|c| c.is_numeric()) {
            return None;
        }
        let word: String = lower.chars().filter(|c| c.is_ascii_lowercase()).collect();
        if word.len() < self.min_word_length {
            return None;
        }
        if self.filter_stopwords && self.stopwords.contains(&word) {
            return None;
        }
        Some(word)
    }
}

/// Builds the normalized, deduplicated word set from raw phrases.
pub fn build_dictionary<I, S>(raw_phrases: I, cfg: &DictionaryConfig) -> BTreeSet<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut words = BTreeSet::new();
    for phrase in raw_phrases {
        words.extend(
            phrase
                .as_ref()
                .split_whitespace()
                .filter_map(|tok| cfg.normalize_word(tok)),
        );
    }
    words
}

/// Reads phrases line by line. Read failures (including invalid UTF-8)
/// report the 1-based line number.
pub fn build_dictionary_from_reader<R: BufRead>(
    reader: R,
    cfg: &DictionaryConfig,
) -> Result<BTreeSet<String>> {
    let mut phrases = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::format(idx + 1, e.to_string()))?;
        phrases.push(line);
    }
    let words = build_dictionary(&phrases, cfg);
    if words.is_empty() {
        log::warn!("domain dictionary is empty after normalization");
    }
    Ok(words)
}

pub fn load_dictionary_source(path: &Path, cfg: &DictionaryConfig) -> Result<BTreeSet<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut phrases = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::IoAtLine {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        phrases.push(line);
    }
    let words = build_dictionary(&phrases, cfg);
    if words.is_empty() {
        log::warn!("{}: domain dictionary is empty after normalization", path.display());
    }
    Ok(words)
}

/// Writes the compiled dictionary, one word per line in sorted order.
pub fn write_dictionary<'a, I>(words: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut sorted: Vec<&str> = words.into_iter().collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = String::new();
    for w in sorted {
        out.push_str(w);
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

const ALPHABET: usize = 26;
const NO_CHILD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    children: [u32; ALPHABET],
    terminal: bool,
}

impl Node {
    fn new() -> Self {
        Self {
            children: [NO_CHILD; ALPHABET],
            terminal: false,
        }
    }
}

/// Prefix tree over lowercase ASCII words. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconTrie {
    // nodes[0] is the root; child index 0 therefore means "absent".
    nodes: Vec<Node>,
    word_count: usize,
}

impl Default for LexiconTrie {
    fn default() -> Self {
        Self {
            nodes: vec![Node::new()],
            word_count: 0,
        }
    }
}

fn letter_index(b: u8) -> Option<usize> {
    b.is_ascii_lowercase().then(|| (b - b'a') as usize)
}

impl LexiconTrie {
    /// Inserts `word`; words containing anything other than `a-z` (or empty
    /// words) are rejected and `false` is returned.
    fn insert(&mut self, word: &str) -> bool {
        if word.is_empty() || !word.bytes().all(|b| b.is_ascii_lowercase()) {
            return false;
        }
        let mut cur = 0usize;
        for b in word.bytes() {
            let slot = (b - b'a') as usize;
            let next = self.nodes[cur].children[slot];
            cur = if next == NO_CHILD {
                self.nodes.push(Node::new());
                let id = (self.nodes.len() - 1) as u32;
                self.nodes[cur].children[slot] = id;
                id as usize
            } else {
                next as usize
            };
        }
        if !self.nodes[cur].terminal {
            self.nodes[cur].terminal = true;
            self.word_count += 1;
        }
        true
    }

    pub fn lookup(&self, word: &str) -> bool {
        if word.is_empty() {
            return false;
        }
        let mut cur = 0usize;
        for b in word.bytes() {
            let Some(slot) = letter_index(b) else {
                return false;
            };
            match self.nodes[cur].children[slot] {
                NO_CHILD => return false,
                next => cur = next as usize,
            }
        }
        self.nodes[cur].terminal
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn is_empty(&self) -> bool {
        self.word_count == 0
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// All stored words in lexicographic order.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.word_count);
        let mut buf = Vec::new();
        self.collect(0, &mut buf, &mut out);
        out
    }

    fn collect(&self, node: usize, buf: &mut Vec<u8>, out: &mut Vec<String>) {
        if self.nodes[node].terminal {
            out.push(String::from_utf8(buf.clone()).expect("trie stores ASCII"));
        }
        for (slot, &child) in self.nodes[node].children.iter().enumerate() {
            if child != NO_CHILD {
                buf.push(b'a' + slot as u8);
                self.collect(child as usize, buf, out);
                buf.pop();
            }
        }
    }
}

/// Builds a trie from normalized words. Words outside `[a-z]+` cannot come
/// out of [`build_dictionary`] and are skipped with a warning.
pub fn build_trie<I, S>(words: I) -> LexiconTrie
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut trie = LexiconTrie::default();
    for w in words {
        if !trie.insert(w.as_ref()) {
            log::warn!("skipping non-normalized dictionary entry {:?}", w.as_ref());
        }
    }
    trie
}

/// Domain keywords of one text, in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordSet {
    keywords: Vec<String>,
}

impl KeywordSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from an arbitrary list, dropping repeats.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let keywords = words
            .into_iter()
            .map(Into::into)
            .filter(|w: &String| seen.insert(w.clone()))
            .collect();
        Self { keywords }
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.keywords.iter().any(|k| k == word)
    }
}

pub fn extract_keywords<S: AsRef<str>>(tokens: &[S], trie: &LexiconTrie) -> KeywordSet {
    let mut seen = HashSet::new();
    let mut keywords = Vec::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if trie.lookup(tok) && seen.insert(tok) {
            keywords.push(tok.to_owned());
        }
    }
    KeywordSet { keywords }
}
