use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::{derive_seed, forward, loss_and_grads, Encoded, Featurizer, ModelConfig};
use super::params::ModelParams;
use crate::classifier::{predict_label, FocalConfig, Loss, LossKind};
use crate::embedding::{EmbeddingTable, KeywordMaskScope};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::metrics::Metrics;
use crate::harness::preprocess::{PreprocessRules, Preprocessor};
use crate::lexicon::{extract_keywords, LexiconTrie};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub min_freq: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub h_max: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub enable_keywords: bool,
    pub enable_synonyms: bool,
    pub keyword_mask_scope: KeywordMaskScope,
    pub init_std: f64,
    pub preprocess: PreprocessRules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            max_len: 64,
            min_freq: 1,
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 15,
            gamma: 2.0,
            h_max: 5,
            seed: 0,
            loss_kind: LossKind::Focal,
            enable_keywords: true,
            enable_synonyms: true,
            keyword_mask_scope: KeywordMaskScope::Both,
            init_std: 0.02,
            preprocess: PreprocessRules::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!("max_len must be at least 4, got {}", self.max_len)));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if self.h_max == 0 {
            return Err(Error::Config("h_max must be at least 1".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be non-negative".into()));
        }
        self.loss().focal.validate()
    }

    pub fn loss(&self) -> Loss {
        Loss {
            kind: self.loss_kind,
            focal: FocalConfig {
                gamma: self.gamma,
                ..Default::default()
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            max_len: self.max_len,
            h_max: self.h_max,
            enable_keywords: self.enable_keywords,
            enable_synonyms: self.enable_synonyms,
            keyword_mask_scope: self.keyword_mask_scope,
        }
    }
}

/// External knowledge: the domain lexicon and optional pretrained vectors.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    pub lexicon: LexiconTrie,
    pub embeddings: Option<EmbeddingTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_precision: Option<f64>,
    pub dev_recall: Option<f64>,
    pub dev_f1: Option<f64>,
}

pub fn write_history<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    for rec in history {
        let line = serde_json::to_string(rec).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<history output>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    /// `(p_negative, p_positive)`.
    pub probabilities: [f32; 2],
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub featurizer: Featurizer,
    pub params: ModelParams<f32>,
}

impl TrainedModel {
    pub fn encode(&self, dataset: &Dataset) -> Result<Vec<Encoded>> {
        dataset
            .examples
            .iter()
            .map(|e| self.featurizer.encode_text(&e.text, e.label))
            .collect()
    }

    pub fn predict(&self, text: &str) -> Result<Prediction> {
        let ex = self.featurizer.encode_text(text, 0)?;
        let p = forward(std::slice::from_ref(&ex), &self.params, &self.featurizer.config)?[0];
        Ok(Prediction {
            label: predict_label(p),
            probabilities: p,
            keywords: ex.keywords,
        })
    }

    pub fn predict_encoded(&self, batch: &[Encoded]) -> Result<Vec<u8>> {
        Ok(forward(batch, &self.params, &self.featurizer.config)?
            .into_iter()
            .map(predict_label)
            .collect())
    }

    pub fn evaluate_encoded(&self, batch: &[Encoded]) -> Result<Metrics> {
        let gold: Vec<u8> = batch.iter().map(Encoded::label).collect();
        Ok(Metrics::from_predictions(&gold, &self.predict_encoded(batch)?))
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<Metrics> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        self.evaluate_encoded(&self.encode(dataset)?)
    }
}

/// What a per-epoch observer can inspect.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a TrainedModel,
    pub train: &'a [Encoded],
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// Preprocessed training texts, as the featurizer saw them.
    pub train_tokens: Vec<Vec<String>>,
}

pub fn train(cfg: &TrainConfig, resources: &Resources, train_set: &Dataset, dev_set: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with_observer(cfg, resources, train_set, dev_set, |_| true)
}

/// Trains for `cfg.epochs` epochs, or until `observer` returns `false`.
pub fn train_with_observer<F>(
    cfg: &TrainConfig,
    resources: &Resources,
    train_set: &Dataset,
    dev_set: Option<&Dataset>,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochView<'_>) -> bool,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let pre = Preprocessor::new(cfg.preprocess.clone());
    let train_tokens: Vec<Vec<String>> = train_set.examples.iter().map(|e| pre.tokens(&e.text)).collect();
    let model_cfg = cfg.model_config();
    let (featurizer, synonym_init) = Featurizer::fit(
        &model_cfg,
        cfg.preprocess.clone(),
        resources.lexicon.clone(),
        &train_tokens,
        resources.embeddings.as_ref(),
        cfg.min_freq,
    )?;
    let train_enc: Vec<Encoded> = train_tokens
        .iter()
        .zip(&train_set.examples)
        .map(|(t, e)| featurizer.encode_tokens(t, e.label))
        .collect::<Result<_>>()?;
    let dev_enc: Option<Vec<Encoded>> = dev_set
        .filter(|d| !d.is_empty())
        .map(|d| d.examples.iter().map(|e| featurizer.encode_text(&e.text, e.label)).collect())
        .transpose()?;
    log::info!(
        "training on {} examples, vocab {}, {} keyword types with synonyms",
        train_enc.len(),
        featurizer.vocab.len(),
        featurizer.synonym_map.len()
    );
    let keyword_hits = train_tokens
        .iter()
        .filter(|t| !extract_keywords(t, &featurizer.lexicon).is_empty())
        .count();
    log::debug!("{keyword_hits} training texts contain lexicon keywords");

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1]));
    let mut params = ModelParams::<f32>::init(&featurizer.shape(), cfg.init_std, &mut init_rng);
    params.synonyms = synonym_init;
    let mut model = TrainedModel {
        config: cfg.clone(),
        featurizer,
        params,
    };
    let mut adam = AdamState::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 2]));
    let loss = cfg.loss();
    let mut order: Vec<usize> = (0..train_enc.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Encoded> = idx.iter().map(|&i| &train_enc[i]).collect();
            let seed = derive_seed(&[cfg.seed, 3, epoch as u64, b as u64]);
            let (l, grads) = loss_and_grads(&batch, &model.params, &model.featurizer.config, &loss, Some(seed))?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            if let Some(tensor) = grads.first_non_finite() {
                return Err(Error::NonFiniteGradient { tensor });
            }
            adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate);
            loss_sum += f64::from(l) * batch.len() as f64;
        }
        let dev = dev_enc.as_deref().map(|d| model.evaluate_encoded(d)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_enc.len() as f64,
            dev_precision: dev.map(|m| m.precision),
            dev_recall: dev.map(|m| m.recall),
            dev_f1: dev.map(|m| m.f1),
        };
        log::info!("epoch {epoch}: loss {:.6}, dev F1 {:?}", record.train_loss, record.dev_f1);
        history.push(record);
        let keep_going = observer(&EpochView {
            record: history.last().expect("just pushed"),
            model: &model,
            train: &train_enc,
        });
        if !keep_going {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        train_tokens,
    })
}
