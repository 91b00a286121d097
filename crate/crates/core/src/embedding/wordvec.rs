use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// Pretrained word vectors loaded from the word2vec text format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    // Row-major, words.len() * dim.
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut table = Self::default();
        for (line, (word, vec)) in entries.into_iter().enumerate() {
            table.push(line + 1, word, &vec)?;
        }
        Ok(table)
    }

    fn push(&mut self, line: usize, word: String, vec: &[f32]) -> Result<()> {
        if vec.is_empty() {
            return Err(Error::format(line, format!("word {word:?} has no vector components")));
        }
        if self.words.is_empty() && self.dim == 0 {
            self.dim = vec.len();
        } else if vec.len() != self.dim {
            return Err(Error::format(
                line,
                format!("expected {} components, found {}", self.dim, vec.len()),
            ));
        }
        if let Some(bad) = vec.iter().find(|x| !x.is_finite()) {
            return Err(Error::format(line, format!("non-finite component {bad}")));
        }
        if self.index.contains_key(&word) {
            log::warn!("line {line}: duplicate word {word:?} ignored (first occurrence wins)");
            return Ok(());
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(vec);
        Ok(())
    }

    /// Parses word2vec text: an optional `count dim` header, then
    /// `word v1 .. vd` per line.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut table = Self::default();
        let mut declared: Option<(usize, usize)> = None;
        let mut first = true;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::format(lineno, e.to_string()))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else {
                continue;
            };
            let rest: Vec<&str> = fields.collect();
            if first {
                first = false;
                if rest.len() == 1 {
                    if let (Ok(count), Ok(dim)) = (word.parse::<usize>(), rest[0].parse::<usize>()) {
                        if dim == 0 {
                            return Err(Error::format(lineno, "header declares dimension 0"));
                        }
                        declared = Some((count, dim));
                        table.dim = dim;
                        continue;
                    }
                }
            }
            let mut vec = Vec::with_capacity(rest.len());
            for field in rest {
                let v: f32 = field.parse().map_err(|_| {
                    Error::format(lineno, format!("non-numeric component {field:?}"))
                })?;
                vec.push(v);
            }
            table.push(lineno, word.to_owned(), &vec)?;
        }
        if let Some((count, _)) = declared {
            if count != table.len() {
                log::warn!("header declares {count} words, file contains {}", table.len());
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file)).map_err(|e| match e {
            Error::Format { line, message } => Error::Format {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| self.row(i))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// A keyword and its nearest neighbours in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct SynonymSet {
    pub keyword: String,
    pub synonyms: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl SynonymSet {
    pub fn len(&self) -> usize {
        self.synonyms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty()
    }
}

/// Cosine similarity in `f64`; zero when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Up to `h_max` words with the highest cosine similarity to `keyword`,
/// excluding the keyword. Ties go to the lexicographically smaller word.
pub fn nearest_synonyms(keyword: &str, table: &EmbeddingTable, h_max: usize) -> SynonymSet {
    let mut set = SynonymSet {
        keyword: keyword.to_owned(),
        synonyms: Vec::new(),
        vectors: Vec::new(),
    };
    let Some(query) = table.get(keyword) else {
        return set;
    };
    if h_max == 0 {
        return set;
    }
    let mut scored: Vec<(f64, usize)> = table
        .words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.as_str() != keyword)
        .map(|(i, _)| (cosine(query, table.row(i)), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| table.words[a.1].cmp(&table.words[b.1]))
    });
    for &(_, i) in scored.iter().take(h_max) {
        set.synonyms.push(table.words[i].clone());
        set.vectors.push(table.row(i).to_vec());
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<EmbeddingTable> {
        EmbeddingTable::from_reader(text.as_bytes())
    }

    #[test]
    fn parses_with_header() {
        let t = parse("2 3\napple 1 0 0\npear 0 1 0").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get("pear"), Some(&[0.0, 1.0, 0.0][..]));
    }

    #[test]
    fn parses_without_header() {
        let t = parse("apple 1 0 0\npear 0 1 0\n").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
    }

    #[test]
    fn short_line_is_error() {
        match parse("2 3\napple 1 0 0\npear 0 1\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_dimension_enforced() {
        assert!(matches!(parse("1 3\napple 1 0\n"), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn non_numeric_is_error() {
        assert!(matches!(parse("apple 1 x 0\n"), Err(Error::Format { line: 1, .. })));
        assert!(matches!(parse("apple 1 nan 0\n"), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn duplicate_first_wins() {
        let t = parse("a 1 0\na 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get("a"), Some(&[1.0, 0.0][..]));
    }

    #[test]
    fn three_hundred_dims() {
        let row: Vec<String> = (0..300).map(|i| format!("{}", i as f32 * 0.01)).collect();
        let text = format!("1 300\nrash {}\n", row.join(" "));
        assert_eq!(parse(&text).unwrap().dim(), 300);
    }

    fn toy() -> EmbeddingTable {
        EmbeddingTable::from_entries([
            ("good".to_string(), vec![1.0, 0.0]),
            ("great".to_string(), vec![0.9, 0.1]),
            ("bad".to_string(), vec![-1.0, 0.0]),
        ])
        .unwrap()
    }

    #[test]
    fn nearest_by_cosine() {
        let s = nearest_synonyms("good", &toy(), 1);
        assert_eq!(s.synonyms, ["great"]);
        assert_eq!(s.vectors, vec![vec![0.9, 0.1]]);
    }

    #[test]
    fn absent_keyword_has_no_synonyms() {
        assert!(nearest_synonyms("awful", &toy(), 5).is_empty());
    }

    #[test]
    fn capped_by_table_size() {
        let s = nearest_synonyms("good", &toy(), 5);
        assert_eq!(s.synonyms, ["great", "bad"]);
    }

    #[test]
    fn ties_lexicographic() {
        let t = EmbeddingTable::from_entries([
            ("q".to_string(), vec![1.0, 0.0]),
            ("zeta".to_string(), vec![2.0, 0.0]),
            ("alpha".to_string(), vec![3.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(nearest_synonyms("q", &t, 2).synonyms, ["alpha", "zeta"]);
    }

    proptest! {
        #[test]
        fn agrees_with_exhaustive_scan(
            rows in proptest::collection::vec(proptest::collection::vec(-3i8..4, 3), 1..25),
            query in 0usize..25,
            h in 1usize..6,
        ) {
            let entries: Vec<(String, Vec<f32>)> = rows.iter().enumerate()
                .map(|(i, r)| (format!("w{i:02}"), r.iter().map(|&x| x as f32).collect()))
                .collect();
            let table = EmbeddingTable::from_entries(entries.clone()).unwrap();
            let key = format!("w{:02}", query % entries.len());
            let got = nearest_synonyms(&key, &table, h);

            // Oracle: repeatedly pick the best remaining candidate.
            let qv = &entries.iter().find(|(w, _)| *w == key).unwrap().1;
            let mut remaining: Vec<&(String, Vec<f32>)> =
                entries.iter().filter(|(w, _)| *w != key).collect();
            let mut want = Vec::new();
            while want.len() < h && !remaining.is_empty() {
                let mut best = 0;
                for j in 1..remaining.len() {
                    let (cb, cj) = (cosine(qv, &remaining[best].1), cosine(qv, &remaining[j].1));
                    if cj > cb || (cj == cb && remaining[j].0 < remaining[best].0) {
                        best = j;
                    }
                }
                want.push(remaining.remove(best).0.clone());
            }
            prop_assert_eq!(got.synonyms, want);
        }
    }
}
