//! Synthetic ADR-like corpora with a known labelling rule: a text is
//! positive when it mentions a drug and a side-effect keyword together.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Example};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::lexicon::default_stopwords;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Number of filler words.
    pub vocab_size: usize,
    /// Probability that an example follows the labelling rule; with 0 the
    /// text is drawn independently of the label.
    pub keyword_signal: f64,
    pub seed: u64,
    pub n_keywords: usize,
    pub n_drugs: usize,
    pub synonyms_per_keyword: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub vector_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pos: 32,
            n_neg: 32,
            vocab_size: 60,
            keyword_signal: 1.0,
            seed: 0,
            n_keywords: 12,
            n_drugs: 6,
            synonyms_per_keyword: 3,
            min_fillers: 3,
            max_fillers: 8,
            vector_dim: 16,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::Config("n_pos and n_neg must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.keyword_signal) {
            return Err(Error::Config("keyword_signal must lie in [0, 1]".into()));
        }
        if self.vocab_size == 0 || self.n_keywords == 0 || self.n_drugs == 0 {
            return Err(Error::Config("vocab_size, n_keywords and n_drugs must be positive".into()));
        }
        if self.min_fillers > self.max_fillers {
            return Err(Error::Config("min_fillers exceeds max_fillers".into()));
        }
        if self.vector_dim == 0 {
            return Err(Error::Config("vector_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Lexicon source phrases (drugs and side-effect keywords), one per entry.
    pub lexicon: Vec<String>,
    pub drugs: Vec<String>,
    pub keywords: Vec<String>,
    pub vectors: EmbeddingTable,
}

impl SyntheticData {
    pub fn write_lexicon<W: Write>(&self, mut w: W) -> Result<()> {
        for phrase in &self.lexicon {
            writeln!(w, "{phrase}").map_err(|e| Error::io("<lexicon output>", e))?;
        }
        Ok(())
    }

    /// word2vec text format with a header line.
    pub fn write_vectors<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<vector output>", e);
        writeln!(w, "{} {}", self.vectors.len(), self.vectors.dim()).map_err(io)?;
        for word in self.vectors.words() {
            let v = self.vectors.get(word).expect("word from table");
            let cols: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{word} {}", cols.join(" ")).map_err(io)?;
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ke", "lo", "mu", "ni", "po", "ra", "si", "tu", "ve", "wo", "xi", "ya", "ze", "fo", "gu",
];

/// Letters-only word generator; each category has a distinct lead syllable so
/// categories never collide.
fn word(lead: &str, mut i: usize) -> String {
    let mut w = lead.to_owned();
    loop {
        w.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
        if i == 0 {
            break;
        }
    }
    w
}

#[derive(Clone, Copy)]
enum Pattern {
    DrugAndKeyword,
    KeywordOnly,
    DrugOnly,
    Neither,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stop = default_stopwords();
    let drugs: Vec<String> = (0..spec.n_drugs).map(|i| word("dru", i)).collect();
    let keywords: Vec<String> = (0..spec.n_keywords).map(|i| word("ache", i)).collect();
    let fillers: Vec<String> = (0..spec.vocab_size)
        .map(|i| word("", i + SYLLABLES.len()))
        .filter(|w| !stop.contains(w))
        .collect();

    let mut examples = Vec::with_capacity(spec.n_pos + spec.n_neg);
    let labels = std::iter::repeat_n(1u8, spec.n_pos).chain(std::iter::repeat_n(0u8, spec.n_neg));
    for label in labels {
        let follows_rule = rng.random::<f64>() < spec.keyword_signal;
        let pattern = if follows_rule {
            if label == 1 {
                Pattern::DrugAndKeyword
            } else {
                [Pattern::KeywordOnly, Pattern::DrugOnly, Pattern::Neither][rng.random_range(0..3)]
            }
        } else {
            [
                Pattern::DrugAndKeyword,
                Pattern::KeywordOnly,
                Pattern::DrugOnly,
                Pattern::Neither,
            ][rng.random_range(0..4)]
        };
        let n = rng.random_range(spec.min_fillers..=spec.max_fillers);
        let mut tokens: Vec<String> = (0..n)
            .map(|_| fillers.choose(&mut rng).expect("nonempty fillers").clone())
            .collect();
        let (drug, kw) = match pattern {
            Pattern::DrugAndKeyword => (true, true),
            Pattern::KeywordOnly => (false, true),
            Pattern::DrugOnly => (true, false),
            Pattern::Neither => (false, false),
        };
        if drug {
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, drugs.choose(&mut rng).expect("nonempty").clone());
        }
        if kw {
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, keywords.choose(&mut rng).expect("nonempty").clone());
        }
        examples.push(Example {
            text: tokens.join(" "),
            label,
        });
    }
    // Interleave classes deterministically.
    for i in (1..examples.len()).rev() {
        let j = rng.random_range(0..=i);
        examples.swap(i, j);
    }

    let vectors = synth_vectors(spec, &mut rng, &drugs, &keywords, &fillers)?;
    let lexicon: Vec<String> = drugs.iter().chain(&keywords).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    Ok(SyntheticData {
        dataset: Dataset::new(format!("synthetic-{}", spec.seed), examples),
        lexicon,
        drugs,
        keywords,
        vectors,
    })
}

/// Clustered vectors: each keyword with its synonyms around one centroid,
/// drugs around a shared centroid, fillers scattered.
fn synth_vectors(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    drugs: &[String],
    keywords: &[String],
    fillers: &[String],
) -> Result<EmbeddingTable> {
    let normal = Normal::new(0.0f32, 1.0).expect("valid normal");
    let mut sample = |center: Option<&[f32]>, spread: f32| -> Vec<f32> {
        (0..spec.vector_dim)
            .map(|d| center.map_or(0.0, |c| c[d]) + spread * normal.sample(rng))
            .collect()
    };
    let mut entries = Vec::new();
    let drug_center = sample(None, 1.0);
    for d in drugs {
        entries.push((d.clone(), sample(Some(&drug_center), 0.2)));
    }
    for (i, k) in keywords.iter().enumerate() {
        let center = sample(None, 1.0);
        entries.push((k.clone(), sample(Some(&center), 0.1)));
        for s in 0..spec.synonyms_per_keyword {
            entries.push((word("syn", i * spec.synonyms_per_keyword.max(1) + s), sample(Some(&center), 0.15)));
        }
    }
    for f in fillers {
        entries.push((f.clone(), sample(None, 1.0)));
    }
    EmbeddingTable::from_entries(entries)
}
