use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, CLS_TOKEN, PAD, PAD_TOKEN, SEP, SEP_TOKEN};
use crate::error::{Error, Result};
use crate::lexicon::KeywordSet;
use crate::real::Real;

/// Which positions get `keyword_mask = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMaskScope {
    /// Keyword occurrences in both the text and the keyword segment.
    #[default]
    Both,
    /// Only the appended keyword segment.
    S2Only,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComposeOptions {
    /// Append the `S2 [SEP]` keyword segment.
    pub include_keywords: bool,
    pub mask_scope: KeywordMaskScope,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            include_keywords: true,
            mask_scope: KeywordMaskScope::Both,
        }
    }
}

/// One composed, padded model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub keyword_mask: Vec<u8>,
    /// Surface token at each position, reserved tokens included.
    pub tokens: Vec<String>,
    pub label: u8,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = label;
        self
    }

    /// Number of non-padding positions.
    pub fn unpadded_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Composes `[CLS] S1 [SEP] S2 [SEP]` with keyword marks in both segments.
pub fn compose_input<S: AsRef<str>>(
    s1_tokens: &[S],
    keywords: &KeywordSet,
    vocab: &Vocab,
    max_len: usize,
) -> Result<ModelInput> {
    compose_input_with(s1_tokens, keywords, vocab, max_len, ComposeOptions::default())
}

/// Like [`compose_input`], optionally without the keyword segment
/// (`[CLS] S1 [SEP]`). S1 is truncated before S2.
pub fn compose_input_with<S: AsRef<str>>(
    s1_tokens: &[S],
    keywords: &KeywordSet,
    vocab: &Vocab,
    max_len: usize,
    opts: ComposeOptions,
) -> Result<ModelInput> {
    if max_len < 4 {
        return Err(Error::Config(format!("max_len must be at least 4, got {max_len}")));
    }
    let (s2, budget): (&[String], usize) = if opts.include_keywords {
        (keywords.keywords(), max_len - 3)
    } else {
        (&[], max_len - 2)
    };
    let s2_kept = s2.len().min(budget);
    let s1_kept = s1_tokens.len().min(budget - s2_kept);

    let mut input = ModelInput {
        token_ids: Vec::with_capacity(max_len),
        segment_ids: Vec::with_capacity(max_len),
        position_ids: (0..max_len as u32).collect(),
        attention_mask: Vec::with_capacity(max_len),
        keyword_mask: Vec::with_capacity(max_len),
        tokens: Vec::with_capacity(max_len),
        label: 0,
    };
    let mut push = |tok: &str, id: u32, seg: u8, kw: bool| {
        input.token_ids.push(id);
        input.segment_ids.push(seg);
        input.attention_mask.push(1);
        input.keyword_mask.push(kw as u8);
        input.tokens.push(tok.to_owned());
    };

    let mark_s1 = opts.mask_scope == KeywordMaskScope::Both;
    push(CLS_TOKEN, CLS, 0, false);
    for tok in &s1_tokens[..s1_kept] {
        let tok = tok.as_ref();
        push(tok, vocab.id(tok), 0, mark_s1 && keywords.contains(tok));
    }
    push(SEP_TOKEN, SEP, 0, false);
    if opts.include_keywords {
        for kw in &s2[..s2_kept] {
            push(kw, vocab.id(kw), 1, true);
        }
        push(SEP_TOKEN, SEP, 1, false);
    }
    while input.token_ids.len() < max_len {
        input.token_ids.push(PAD);
        input.segment_ids.push(0);
        input.attention_mask.push(0);
        input.keyword_mask.push(0);
        input.tokens.push(PAD_TOKEN.to_owned());
    }
    Ok(input)
}

/// Token, segment and position tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T> {
    pub token: Array2<T>,
    pub segment: Array2<T>,
    pub position: Array2<T>,
}

impl<T: Real> EmbeddingParams<T> {
    pub fn zeros(vocab_size: usize, max_len: usize, d_model: usize) -> Self {
        Self {
            token: Array2::zeros((vocab_size, d_model)),
            segment: Array2::zeros((2, d_model)),
            position: Array2::zeros((max_len, d_model)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.token.ncols()
    }
}

fn check_ids<T>(input: &ModelInput, params: &EmbeddingParams<T>) -> Result<()> {
    let vocab = params.token.nrows();
    let positions = params.position.nrows();
    for i in 0..input.len() {
        let (tok, seg, pos) = (
            input.token_ids[i] as usize,
            input.segment_ids[i] as usize,
            input.position_ids[i] as usize,
        );
        if tok >= vocab || seg >= params.segment.nrows() || pos >= positions {
            return Err(Error::Internal(format!(
                "embedding index out of range at position {i}: token {tok}/{vocab}, segment {seg}, position {pos}/{positions}"
            )));
        }
    }
    Ok(())
}

/// `E[i] = token[token_ids[i]] + segment[segment_ids[i]] + position[position_ids[i]]`.
pub fn embed<T: Real>(input: &ModelInput, params: &EmbeddingParams<T>) -> Result<Array2<T>> {
    check_ids(input, params)?;
    let mut out = Array2::zeros((input.len(), params.d_model()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let tok = params.token.row(input.token_ids[i] as usize);
        let seg = params.segment.row(input.segment_ids[i] as usize);
        let pos = params.position.row(input.position_ids[i] as usize);
        ndarray::Zip::from(&mut row)
            .and(&tok)
            .and(&seg)
            .and(&pos)
            .for_each(|o, &a, &b, &c| *o = a + b + c);
    }
    Ok(out)
}

/// Scatters the upstream gradient into the three tables.
pub fn embed_backward<T: Real>(
    input: &ModelInput,
    d_out: &Array2<T>,
    grads: &mut EmbeddingParams<T>,
) {
    for (i, row) in d_out.axis_iter(Axis(0)).enumerate() {
        let mut tok = grads.token.row_mut(input.token_ids[i] as usize);
        tok += &row;
        let mut seg = grads.segment.row_mut(input.segment_ids[i] as usize);
        seg += &row;
        let mut pos = grads.position.row_mut(input.position_ids[i] as usize);
        pos += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::build_vocab;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab_of(words: &[&str]) -> Vocab {
        build_vocab(&[words.iter().map(|w| w.to_string()).collect::<Vec<_>>()], 1).unwrap()
    }

    #[test]
    fn composes_both_segments() {
        let vocab = vocab_of(&["feel", "dizzy"]);
        let kw = KeywordSet::from_words(["dizzy"]);
        let inp = compose_input(&["feel", "dizzy"], &kw, &vocab, 8).unwrap();
        let dizzy = vocab.id("dizzy");
        let feel = vocab.id("feel");
        assert_eq!(inp.token_ids, vec![CLS, feel, dizzy, SEP, dizzy, SEP, PAD, PAD]);
        assert_eq!(inp.segment_ids, vec![0, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(inp.keyword_mask, vec![0, 0, 1, 0, 1, 0, 0, 0]);
        assert_eq!(inp.attention_mask, vec![1, 1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(inp.position_ids, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn empty_keyword_segment() {
        let vocab = vocab_of(&["feel", "fine"]);
        let inp = compose_input(&["feel", "fine"], &KeywordSet::new(), &vocab, 6).unwrap();
        assert_eq!(inp.token_ids[..5], [CLS, vocab.id("feel"), vocab.id("fine"), SEP, SEP]);
        assert!(inp.keyword_mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn truncates_text_before_keywords() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let vocab = vocab_of(&words.iter().map(String::as_str).collect::<Vec<_>>());
        let kw = KeywordSet::from_words(["w1", "w2", "w3"]);
        let inp = compose_input(&words, &kw, &vocab, 16).unwrap();
        assert_eq!(inp.len(), 16);
        // 16 slots = CLS + 10 text + SEP + 3 keywords + SEP
        let text = inp.segment_ids.iter().filter(|&&s| s == 0).count() - 2;
        assert_eq!(text, 10);
        assert_eq!(inp.tokens[12..15], ["w1", "w2", "w3"]);
    }

    #[test]
    fn keyword_segment_truncated_when_alone_too_long() {
        let vocab = vocab_of(&["a", "b", "c", "d"]);
        let kw = KeywordSet::from_words(["a", "b", "c", "d"]);
        let inp = compose_input(&["a", "b", "c", "d"], &kw, &vocab, 5).unwrap();
        assert_eq!(inp.tokens, ["[CLS]", "[SEP]", "a", "b", "[SEP]"]);
    }

    #[test]
    fn single_segment_and_s2_only_mask() {
        let vocab = vocab_of(&["feel", "dizzy"]);
        let kw = KeywordSet::from_words(["dizzy"]);
        let opts = ComposeOptions {
            include_keywords: false,
            mask_scope: KeywordMaskScope::Both,
        };
        let inp = compose_input_with(&["feel", "dizzy"], &kw, &vocab, 6, opts).unwrap();
        assert_eq!(inp.tokens[..4], ["[CLS]", "feel", "dizzy", "[SEP]"]);
        assert_eq!(inp.keyword_mask, vec![0, 0, 1, 0, 0, 0]);
        assert!(inp.segment_ids.iter().all(|&s| s == 0));

        let opts = ComposeOptions {
            include_keywords: true,
            mask_scope: KeywordMaskScope::S2Only,
        };
        let inp = compose_input_with(&["feel", "dizzy"], &kw, &vocab, 8, opts).unwrap();
        assert_eq!(inp.keyword_mask, vec![0, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn max_len_too_small() {
        let vocab = vocab_of(&["a"]);
        assert!(matches!(
            compose_input(&["a"], &KeywordSet::new(), &vocab, 3),
            Err(Error::Config(_))
        ));
    }

    fn random_params(rng: &mut ChaCha8Rng, v: usize, t: usize, d: usize) -> EmbeddingParams<f64> {
        let mut p = EmbeddingParams::<f64>::zeros(v, t, d);
        for x in p
            .token
            .iter_mut()
            .chain(p.segment.iter_mut())
            .chain(p.position.iter_mut())
        {
            *x = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn embed_zero_and_token_only() {
        let vocab = vocab_of(&["feel", "dizzy"]);
        let kw = KeywordSet::from_words(["dizzy"]);
        let inp = compose_input(&["feel", "dizzy"], &kw, &vocab, 8).unwrap();
        let zero = EmbeddingParams::<f64>::zeros(vocab.len(), 8, 3);
        assert!(embed(&inp, &zero).unwrap().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(&mut rng, vocab.len(), 8, 3);
        p.segment.fill(0.0);
        p.position.fill(0.0);
        let e = embed(&inp, &p).unwrap();
        for i in 0..8 {
            assert_eq!(e.row(i), p.token.row(inp.token_ids[i] as usize));
        }
    }

    #[test]
    fn embed_matches_explicit_sum() {
        let vocab = vocab_of(&["feel", "dizzy", "today"]);
        let kw = KeywordSet::from_words(["dizzy"]);
        let inp = compose_input(&["feel", "dizzy", "today"], &kw, &vocab, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, vocab.len(), 9, 5);
        let e = embed(&inp, &p).unwrap();
        for i in 0..9 {
            for k in 0..5 {
                let want = p.token[[inp.token_ids[i] as usize, k]]
                    + p.segment[[inp.segment_ids[i] as usize, k]]
                    + p.position[[i, k]];
                assert_eq!(e[[i, k]], want);
            }
        }
    }

    #[test]
    fn embed_scales_linearly() {
        let vocab = vocab_of(&["feel", "dizzy"]);
        let inp = compose_input(&["feel", "dizzy"], &KeywordSet::new(), &vocab, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, vocab.len(), 6, 4);
        let mut scaled = p.clone();
        scaled.position *= 2.5;
        let diff = embed(&inp, &scaled).unwrap() - embed(&inp, &p).unwrap();
        for i in 0..6 {
            for k in 0..4 {
                assert!((diff[[i, k]] - 1.5 * p.position[[i, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let vocab = vocab_of(&["feel", "dizzy"]);
        let inp = compose_input(&["feel", "dizzy"], &KeywordSet::new(), &vocab, 6).unwrap();
        let small = EmbeddingParams::<f64>::zeros(3, 6, 2);
        assert!(matches!(embed(&inp, &small), Err(Error::Internal(_))));
    }

    proptest! {
        #[test]
        fn composed_inputs_are_well_formed(
            s1 in proptest::collection::vec("[a-e]{1,3}", 0..30),
            kw_pick in proptest::collection::vec(any::<bool>(), 0..30),
            max_len in 4usize..40,
        ) {
            let vocab = vocab_of(&["a", "b", "c"]);
            let kws = KeywordSet::from_words(
                s1.iter().zip(kw_pick.iter().chain(std::iter::repeat(&false)))
                    .filter(|(_, &k)| k).map(|(w, _)| w.clone()));
            let inp = compose_input(&s1, &kws, &vocab, max_len).unwrap();
            let t = inp.len();
            prop_assert_eq!(t, max_len);
            prop_assert_eq!(inp.segment_ids.len(), t);
            prop_assert_eq!(inp.attention_mask.len(), t);
            prop_assert_eq!(inp.keyword_mask.len(), t);
            prop_assert_eq!(inp.position_ids.len(), t);
            let n = inp.unpadded_len();
            prop_assert!(inp.attention_mask[..n].iter().all(|&m| m == 1));
            prop_assert!(inp.attention_mask[n..].iter().all(|&m| m == 0));
            prop_assert!(inp.token_ids[n..].iter().all(|&id| id == PAD));
            prop_assert!(inp.keyword_mask[n..].iter().all(|&m| m == 0));
            prop_assert_eq!(inp.token_ids[0], CLS);
            prop_assert_eq!(inp.token_ids[..n].iter().filter(|&&id| id == SEP).count(), 2);
            prop_assert_eq!(inp.token_ids[..n].iter().filter(|&&id| id == CLS).count(), 1);
            prop_assert_eq!(inp.token_ids[n - 1], SEP);
        }
    }
}
