use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ModelShape};
use crate::classifier::{classify, head_backward, Loss};
use crate::embedding::{
    build_vocab, compose_input_with, embed, embed_backward, nearest_synonyms, ComposeOptions, EmbeddingTable,
    KeywordMaskScope, ModelInput, Vocab,
};
use crate::encoder::{apply_mask, encoder_layer_backward, encoder_layer_cached, Dropout, EncoderConfig, LayerCache};
use crate::error::{Error, Result};
use crate::fusion::{deep_fusion_backward, deep_fusion_cached, FusionCache, FusionContext, FusionSlot};
use crate::harness::preprocess::{PreprocessRules, Preprocessor};
use crate::lexicon::{extract_keywords, KeywordSet, LexiconTrie};
use crate::real::Real;

/// Architecture plus the two knowledge-injection switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub h_max: usize,
    /// Append the `S2 [SEP]` keyword segment.
    pub enable_keywords: bool,
    /// Run synonym fusion after layer `fusion_layer`.
    pub enable_synonyms: bool,
    pub keyword_mask_scope: KeywordMaskScope,
}

/// One example ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub input: ModelInput,
    pub context: FusionContext,
    pub keywords: Vec<String>,
}

impl Encoded {
    pub fn label(&self) -> u8 {
        self.input.label
    }
}

/// Text-to-input machinery fitted on a training set: vocabulary, lexicon
/// and the keyword-to-synonym-rows map.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub config: ModelConfig,
    pub preprocess: PreprocessRules,
    pub vocab: Vocab,
    pub lexicon: LexiconTrie,
    /// Word for each row of the synonym table.
    pub synonym_words: Vec<String>,
    pub synonym_map: BTreeMap<String, Vec<usize>>,
    pub d_w: usize,
}

impl Featurizer {
    /// Fits on preprocessed training token lists. Returns the featurizer and
    /// the initial synonym table (`rows × d_w`).
    pub fn fit(
        config: &ModelConfig,
        preprocess: PreprocessRules,
        lexicon: LexiconTrie,
        train_tokens: &[Vec<String>],
        table: Option<&EmbeddingTable>,
        min_freq: usize,
    ) -> Result<(Self, Array2<f32>)> {
        let vocab = build_vocab(train_tokens, min_freq)?;
        let mut synonym_words = Vec::new();
        let mut synonym_map = BTreeMap::new();
        let mut rows: Vec<f32> = Vec::new();
        let d_w = table.map_or(0, EmbeddingTable::dim);
        if let (true, Some(table)) = (config.enable_synonyms, table) {
            let mut row_of: HashMap<String, usize> = HashMap::new();
            let mut seen = BTreeSet::new();
            for tokens in train_tokens {
                for kw in extract_keywords(tokens, &lexicon).keywords() {
                    if !seen.insert(kw.clone()) {
                        continue;
                    }
                    let set = nearest_synonyms(kw, table, config.h_max);
                    if set.is_empty() {
                        continue;
                    }
                    let ids = set
                        .synonyms
                        .iter()
                        .zip(&set.vectors)
                        .map(|(w, v)| {
                            *row_of.entry(w.clone()).or_insert_with(|| {
                                synonym_words.push(w.clone());
                                rows.extend_from_slice(v);
                                synonym_words.len() - 1
                            })
                        })
                        .collect();
                    synonym_map.insert(kw.clone(), ids);
                }
            }
        }
        let n = synonym_words.len();
        let init = Array2::from_shape_vec((n, d_w), rows).map_err(|e| Error::Internal(e.to_string()))?;
        Ok((
            Self {
                config: config.clone(),
                preprocess,
                vocab,
                lexicon,
                synonym_words,
                synonym_map,
                d_w,
            },
            init,
        ))
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.vocab.len(),
            max_len: self.config.max_len,
            d_model: self.config.encoder.d_model,
            d_ff: self.config.encoder.d_ff,
            layers: self.config.encoder.layers,
            d_w: self.d_w,
            synonym_rows: self.synonym_words.len(),
        }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        Preprocessor::new(self.preprocess.clone()).tokens(text)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S], label: u8) -> Result<Encoded> {
        let cfg = &self.config;
        let keywords = if cfg.enable_keywords || cfg.enable_synonyms {
            extract_keywords(tokens, &self.lexicon)
        } else {
            KeywordSet::new()
        };
        let opts = ComposeOptions {
            include_keywords: cfg.enable_keywords,
            mask_scope: cfg.keyword_mask_scope,
        };
        let input = compose_input_with(tokens, &keywords, &self.vocab, cfg.max_len, opts)?.with_label(label);
        let mut context = FusionContext::default();
        if cfg.enable_synonyms {
            for (p, &m) in input.keyword_mask.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                if let Some(rows) = self.synonym_map.get(&input.tokens[p]) {
                    context.slots.push(FusionSlot {
                        position: p,
                        synonym_rows: rows.clone(),
                    });
                }
            }
        }
        Ok(Encoded {
            input,
            context,
            keywords: keywords.keywords().to_vec(),
        })
    }

    pub fn encode_text(&self, text: &str, label: u8) -> Result<Encoded> {
        self.encode_tokens(&self.tokens(text), label)
    }

    /// Fails if any vocabulary word or synonym key is absent from the
    /// training tokens.
    pub fn assert_fitted_on(&self, train_tokens: &[Vec<String>]) -> Result<()> {
        let seen: BTreeSet<&str> = train_tokens.iter().flatten().map(String::as_str).collect();
        if let Some(w) = self.vocab.words().iter().find(|w| !seen.contains(w.as_str())) {
            return Err(Error::Leakage(format!("vocabulary word {w:?} does not occur in the training portion")));
        }
        if let Some(k) = self.synonym_map.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::Leakage(format!("synonym keyword {k:?} does not occur in the training portion")));
        }
        Ok(())
    }
}

/// Forward bookkeeping for one example.
pub struct ExampleCache<T> {
    embed_mask: Option<Array2<T>>,
    pre: Vec<LayerCache<T>>,
    fusion: Option<FusionCache<T>>,
    post: Vec<LayerCache<T>>,
    x_cls: Array1<T>,
    probs: [T; 2],
    rows: usize,
}

impl<T> ExampleCache<T> {
    pub fn probs(&self) -> [T; 2]
    where
        T: Copy,
    {
        self.probs
    }

    pub fn fusion(&self) -> Option<&FusionCache<T>> {
        self.fusion.as_ref()
    }
}

/// Embed, layers `1..=l`, synonym fusion, layers `l+1..=L`, head at `[CLS]`.
/// Dropout is active iff `dropout` is given.
pub fn forward_example<T: Real>(
    ex: &Encoded,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<ExampleCache<T>> {
    let enc = &cfg.encoder;
    if params.layers.len() != enc.layers {
        return Err(Error::Internal(format!(
            "parameters have {} layers, configuration {}",
            params.layers.len(),
            enc.layers
        )));
    }
    let mut x = embed(&ex.input, &params.embeddings)?;
    let rows = x.nrows();
    let embed_mask = dropout.as_mut().and_then(|d| d.mask(rows, x.ncols()));
    apply_mask(&mut x, &embed_mask);
    let mask = &ex.input.attention_mask;
    let split = enc.fusion_layer.min(enc.layers);
    let mut pre = Vec::with_capacity(split);
    for p in &params.layers[..split] {
        let (y, c) = encoder_layer_cached(&x, mask, p, enc, dropout.as_deref_mut());
        x = y;
        pre.push(c);
    }
    let mut fusion = None;
    if cfg.enable_synonyms && !ex.context.is_empty() {
        let (y, c) = deep_fusion_cached(&x, &ex.input.keyword_mask, &ex.context, &params.fusion, &params.synonyms)?;
        x = y;
        fusion = Some(c);
    }
    let mut post = Vec::with_capacity(enc.layers - split);
    for p in &params.layers[split..] {
        let (y, c) = encoder_layer_cached(&x, mask, p, enc, dropout.as_deref_mut());
        x = y;
        post.push(c);
    }
    let x_cls = x.row(0).to_owned();
    let probs = classify(x_cls.view(), &params.head);
    Ok(ExampleCache {
        embed_mask,
        pre,
        fusion,
        post,
        x_cls,
        probs,
        rows,
    })
}

/// Accumulates `scale · dL/dθ` for one example into `grads`.
pub fn backward_example<T: Real>(
    ex: &Encoded,
    cache: &ExampleCache<T>,
    params: &ModelParams<T>,
    loss: &Loss,
    scale: T,
    grads: &mut ModelParams<T>,
) {
    let dz = loss.grad_logits(cache.probs, ex.label());
    let dz = [dz[0] * scale, dz[1] * scale];
    let dx_cls = head_backward(cache.x_cls.view(), dz, &params.head, &mut grads.head);
    let mut dx = Array2::zeros((cache.rows, params.embeddings.d_model()));
    dx.row_mut(0).assign(&dx_cls);
    let split = cache.pre.len();
    for (i, c) in cache.post.iter().enumerate().rev() {
        dx = encoder_layer_backward(c, &dx, &params.layers[split + i], &mut grads.layers[split + i]);
    }
    if let Some(fc) = &cache.fusion {
        dx = deep_fusion_backward(fc, &dx, &params.fusion, &mut grads.fusion, &mut grads.synonyms);
    }
    for (i, c) in cache.pre.iter().enumerate().rev() {
        dx = encoder_layer_backward(c, &dx, &params.layers[i], &mut grads.layers[i]);
    }
    apply_mask(&mut dx, &cache.embed_mask);
    embed_backward(&ex.input, &dx, &mut grads.embeddings);
}

/// Evaluation-mode class probabilities for one example.
pub fn predict_probs<T: Real>(ex: &Encoded, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<[T; 2]> {
    forward_example(ex, params, cfg, None).map(|c| c.probs)
}

/// Evaluation-mode probabilities for a batch; examples are independent.
pub fn forward<T: Real>(batch: &[Encoded], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<[T; 2]>> {
    batch.par_iter().map(|ex| predict_probs(ex, params, cfg)).collect()
}

/// Examples per parallel gradient chunk. Fixed so the reduction order, and
/// therefore the floating-point result, does not depend on thread count.
const GRAD_CHUNK: usize = 4;

fn mix_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix_seed(acc, p))
}

/// Mean loss over `batch` and its gradient. With `dropout_seed`, example `i`
/// uses a dropout stream derived from `(seed, i)`.
pub fn loss_and_grads<T: Real>(
    batch: &[&Encoded],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    loss: &Loss,
    dropout_seed: Option<u64>,
) -> Result<(T, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Internal("empty batch".into()));
    }
    let scale = T::one() / T::c(batch.len() as f64);
    let partials: Vec<Result<(T, ModelParams<T>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = params.zeros_like();
            let mut total = T::zero();
            for (j, ex) in chunk.iter().enumerate() {
                let idx = (c * GRAD_CHUNK + j) as u64;
                let cache = match dropout_seed {
                    Some(seed) if cfg.encoder.dropout_rate > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, idx]));
                        let mut d = Dropout::new(cfg.encoder.dropout_rate, &mut rng);
                        forward_example(ex, params, cfg, Some(&mut d))?
                    }
                    _ => forward_example(ex, params, cfg, None)?,
                };
                total += loss.value(cache.probs, ex.label());
                backward_example(ex, &cache, params, loss, scale, &mut grads);
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = T::zero();
    let mut grads: Option<ModelParams<T>> = None;
    for part in partials {
        let (l, g) = part?;
        total += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }
    Ok((total * scale, grads.expect("nonempty batch")))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::classifier::{classify, HeadParams};
    use crate::encoder::run_encoder;
    use crate::lexicon::build_trie;
    use rand::Rng;

    pub(crate) fn tiny_config(enable_keywords: bool, enable_synonyms: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 32,
                layers: 2,
                fusion_layer: 1,
                dropout_rate: 0.0,
                layer_norm_eps: 1e-12,
            },
            max_len: 8,
            h_max: 2,
            enable_keywords,
            enable_synonyms,
            keyword_mask_scope: KeywordMaskScope::Both,
        }
    }

    pub(crate) fn tiny_table() -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words = ["dizzy", "nausea", "rash", "vertigo", "giddy", "queasy", "sick", "hives", "itch"];
        EmbeddingTable::from_entries(
            words
                .iter()
                .map(|w| (w.to_string(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())),
        )
        .unwrap()
    }

    pub(crate) fn tiny_corpus() -> Vec<Vec<String>> {
        [
            "took pills felt dizzy",
            "fine day today",
            "nausea rash after dose",
            "slept well",
        ]
        .iter()
        .map(|s| s.split(' ').map(str::to_owned).collect())
        .collect()
    }

    pub(crate) fn tiny_setup(cfg: &ModelConfig, seed: u64, std: f64) -> (Featurizer, ModelParams<f64>, Vec<Encoded>) {
        let corpus = tiny_corpus();
        let trie = build_trie(["dizzy", "nausea", "rash"]);
        let table = tiny_table();
        let (feat, syn) =
            Featurizer::fit(cfg, PreprocessRules::default(), trie, &corpus, Some(&table), 1).unwrap();
        let mut params = ModelParams::<f64>::init(&feat.shape(), std, &mut ChaCha8Rng::seed_from_u64(seed));
        params.synonyms = syn.mapv(f64::from);
        let labels = [1, 0, 1, 0];
        let batch = corpus
            .iter()
            .zip(labels)
            .map(|(t, y)| feat.encode_tokens(t, y).unwrap())
            .collect();
        (feat, params, batch)
    }

    #[test]
    fn featurizer_builds_synonym_slots() {
        let cfg = tiny_config(true, true);
        let (feat, _, batch) = tiny_setup(&cfg, 0, 0.02);
        assert_eq!(feat.synonym_map.len(), 3);
        assert!(feat.synonym_map.values().all(|r| r.len() == 2));
        // "dizzy" in S1 and in S2.
        assert_eq!(batch[0].context.slots.len(), 2);
        assert!(batch[1].context.is_empty());
        assert_eq!(batch[0].keywords, ["dizzy"]);
    }

    #[test]
    fn unseen_keyword_passes_through() {
        let cfg = tiny_config(true, true);
        let corpus = vec![vec!["dizzy".to_string()]];
        let (feat, _) = Featurizer::fit(
            &cfg,
            PreprocessRules::default(),
            build_trie(["dizzy", "rash"]),
            &corpus,
            Some(&tiny_table()),
            1,
        )
        .unwrap();
        let e = feat.encode_tokens(&["rash"], 0).unwrap();
        assert_eq!(e.keywords, ["rash"]);
        assert!(e.context.is_empty());
        assert!(feat.assert_fitted_on(&corpus).is_ok());
        assert!(matches!(feat.assert_fitted_on(&[vec!["other".into()]]), Err(Error::Leakage(_))));
    }

    #[test]
    fn eval_deterministic_and_batch_independent() {
        let cfg = tiny_config(true, true);
        let (_, params, batch) = tiny_setup(&cfg, 1, 0.3);
        let a = forward(&batch, &params, &cfg).unwrap();
        let b = forward(&batch, &params, &cfg).unwrap();
        assert_eq!(a, b);
        let singles: Vec<[f64; 2]> = batch.iter().map(|e| predict_probs(e, &params, &cfg).unwrap()).collect();
        assert_eq!(a, singles);
        for p in a {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synonyms_off_equals_identity_hook() {
        let cfg = tiny_config(true, false);
        let (_, params, batch) = tiny_setup(&cfg, 2, 0.3);
        for ex in &batch {
            let got = predict_probs(ex, &params, &cfg).unwrap();
            let e = embed(&ex.input, &params.embeddings).unwrap();
            let h = run_encoder(&e, &ex.input.attention_mask, &params.layers, &cfg.encoder, |_| {});
            let want = classify(h.row(0), &params.head);
            assert_eq!(got.map(f64::to_bits), want.map(f64::to_bits));
        }
    }

    #[test]
    fn all_off_equals_baseline_encoder_head() {
        let cfg = tiny_config(false, false);
        let (feat, params, batch) = tiny_setup(&cfg, 3, 0.3);
        let baseline_head: HeadParams<f64> = params.head.clone();
        for (ex, toks) in batch.iter().zip(tiny_corpus()) {
            // Plain [CLS] S1 [SEP] input, no keyword marks.
            let plain = compose_input_with(
                &toks,
                &KeywordSet::new(),
                &feat.vocab,
                cfg.max_len,
                ComposeOptions { include_keywords: false, mask_scope: KeywordMaskScope::Both },
            )
            .unwrap();
            assert_eq!(ex.input.token_ids, plain.token_ids);
            assert!(ex.input.keyword_mask.iter().all(|&m| m == 0));
            let e = embed(&plain, &params.embeddings).unwrap();
            let h = run_encoder(&e, &plain.attention_mask, &params.layers, &cfg.encoder, |_| {});
            let want = classify(h.row(0), &baseline_head);
            let got = predict_probs(ex, &params, &cfg).unwrap();
            assert_eq!(got.map(f64::to_bits), want.map(f64::to_bits));
        }
    }

    #[test]
    fn dead_paths_have_zero_gradient() {
        let cfg = tiny_config(true, false);
        let (_, params, batch) = tiny_setup(&cfg, 4, 0.3);
        let refs: Vec<&Encoded> = batch.iter().collect();
        let (_, g) = loss_and_grads(&refs, &params, &cfg, &Loss::focal(2.0), None).unwrap();
        assert!(g.fusion.w1.iter().all(|&x| x == 0.0));
        assert!(g.fusion.w2.iter().all(|&x| x == 0.0));
        assert!(g.synonyms.iter().all(|&x| x == 0.0));
        assert!(g.head.w_class.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn grads_do_not_depend_on_chunking() {
        let cfg = tiny_config(true, true);
        let (_, params, batch) = tiny_setup(&cfg, 5, 0.3);
        let refs: Vec<&Encoded> = batch.iter().collect();
        let loss = Loss::cross_entropy();
        let (l, g) = loss_and_grads(&refs, &params, &cfg, &loss, None).unwrap();
        let mut sum = params.zeros_like();
        let mut lsum = 0.0;
        for ex in &refs {
            let (li, gi) = loss_and_grads(&[*ex], &params, &cfg, &loss, None).unwrap();
            lsum += li;
            sum.add_assign(&gi);
        }
        sum.scale(0.25);
        assert!((l - lsum / 4.0).abs() < 1e-12);
        for ((n, a), (_, b)) in g.tensors().into_iter().zip(sum.tensors()) {
            let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-12, "{n}: {diff}");
        }
    }

    #[test]
    fn dropout_seeded() {
        let mut cfg = tiny_config(true, true);
        cfg.encoder.dropout_rate = 0.3;
        let (_, params, batch) = tiny_setup(&cfg, 6, 0.3);
        let refs: Vec<&Encoded> = batch.iter().collect();
        let loss = Loss::focal(2.0);
        let a = loss_and_grads(&refs, &params, &cfg, &loss, Some(9)).unwrap();
        let b = loss_and_grads(&refs, &params, &cfg, &loss, Some(9)).unwrap();
        let c = loss_and_grads(&refs, &params, &cfg, &loss, Some(10)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.0, c.0);
    }

    /// Toy model with a single trainable scalar: the head bias `b` on the
    /// positive logit, everything else zero. Logits are (0, b), so with
    /// label 1 and cross entropy L = ln(1 + e^-b) and dL/db = -1/(1 + e^b).
    #[test]
    fn scalar_toy_gradient() {
        let cfg = tiny_config(false, false);
        let (_, mut params, batch) = tiny_setup(&cfg, 7, 0.0);
        params.head.w_class.fill(0.0);
        let b = 0.7;
        params.head.b_class[1] = b;
        let (l, g) = loss_and_grads(&[&batch[0]], &params, &cfg, &Loss::cross_entropy(), None).unwrap();
        assert!((l - (1.0 + (-b).exp()).ln()).abs() < 1e-12);
        assert!((g.head.b_class[1] + 1.0 / (1.0 + b.exp())).abs() < 1e-12);
        assert!((g.head.b_class[0] - 1.0 / (1.0 + b.exp())).abs() < 1e-12);
    }
}
