//! Central finite-difference verification of every analytic gradient, in
//! double precision on a tiny model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grads, Encoded, Featurizer, ModelConfig};
use super::params::ModelParams;
use crate::classifier::Loss;
use crate::embedding::{EmbeddingTable, KeywordMaskScope};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::preprocess::PreprocessRules;
use crate::lexicon::build_trie;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub loss: crate::classifier::LossKind,
    pub gamma: f64,
    /// Finite-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured against this
    /// floor instead of the gradient itself.
    pub floor: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of this tensor (fault injection).
    pub corrupt: Option<String>,
    /// Pushes every example to `p_t = 1`, making the loss exactly zero.
    pub zero_loss: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            loss: crate::classifier::LossKind::Focal,
            gamma: 2.0,
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
            zero_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>12} {:>12}  status\n", "tensor", "elements", "max_rel", "max_abs");
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<24} {:>8} {:>12.3e} {:>12.3e}  {}\n",
                t.name,
                t.elements,
                t.max_rel_error,
                t.max_abs_error,
                if t.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall: {} (tolerance {:.0e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        ));
        out
    }
}

/// Tiny fixture: d_model 8, two heads, two layers with fusion after the
/// first, sequence length 6, two synonyms per keyword.
pub struct GradCheckFixture {
    pub config: ModelConfig,
    pub featurizer: Featurizer,
    pub params: ModelParams<f64>,
    pub batch: Vec<Encoded>,
}

pub fn fixture(seed: u64) -> Result<GradCheckFixture> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 32,
            layers: 2,
            fusion_layer: 1,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-12,
        },
        max_len: 6,
        h_max: 2,
        enable_keywords: true,
        enable_synonyms: true,
        keyword_mask_scope: KeywordMaskScope::Both,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table_words = ["dizzy", "rash", "nausea", "giddy", "vertigo", "hives", "itch", "queasy"];
    let table = EmbeddingTable::from_entries(
        table_words
            .iter()
            .map(|w| (w.to_string(), (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect())),
    )?;
    let corpus: Vec<Vec<String>> = [
        ("dizzy pills", 1u8),
        ("calm day", 0),
        ("rash nausea", 1),
        ("slept", 0),
    ]
    .iter()
    .map(|(t, _)| t.split(' ').map(str::to_owned).collect())
    .collect();
    let labels = [1u8, 0, 1, 0];
    let (featurizer, syn) = Featurizer::fit(
        &config,
        PreprocessRules::default(),
        build_trie(["dizzy", "rash", "nausea"]),
        &corpus,
        Some(&table),
        1,
    )?;
    // Wide init so every nonlinearity operates away from its linear regime.
    let mut params = ModelParams::<f64>::init(&featurizer.shape(), 0.5, &mut rng);
    params.synonyms = syn.mapv(f64::from);
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|x| x + rng.random_range(-0.1..0.1));
    }
    let batch = corpus
        .iter()
        .zip(labels)
        .map(|(t, y)| featurizer.encode_tokens(t, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckFixture {
        config,
        featurizer,
        params,
        batch,
    })
}

pub fn gradient_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let GradCheckFixture {
        config,
        mut params,
        mut batch,
        ..
    } = fixture(opts.seed)?;
    if opts.zero_loss {
        for ex in &mut batch {
            ex.input.label = 1;
        }
        params.head.w_class.fill(0.0);
        params.head.b_class[0] = -60.0;
        params.head.b_class[1] = 60.0;
    }
    let loss = Loss {
        kind: opts.loss,
        focal: crate::classifier::FocalConfig {
            gamma: opts.gamma,
            ..Default::default()
        },
    };
    check_gradients(&config, &params, &batch, &loss, opts)
}

/// Compares `loss_and_grads` against central differences for every element
/// of every tensor of `params`.
pub fn check_gradients(
    config: &ModelConfig,
    params: &ModelParams<f64>,
    batch: &[Encoded],
    loss: &Loss,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let refs: Vec<&Encoded> = batch.iter().collect();
    let f = |p: &ModelParams<f64>| loss_and_grads(&refs, p, config, loss, None).map(|(l, _)| l);
    let (value, mut analytic) = loss_and_grads(&refs, params, config, loss, None)?;
    if let Some(name) = &opts.corrupt {
        let mut tensors = analytic.tensors_mut();
        let (_, t) = tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no tensor named `{name}`")))?;
        t.mapv_inplace(|g| g * 1.1 + 1e-3);
    }
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(names.len());
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let grad: Vec<f64> = analytic.tensors()[ti].1.iter().copied().collect();
        let mut rep = TensorReport {
            name: name.clone(),
            elements: len,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
            passed: true,
        };
        for k in 0..len {
            let orig = nth(&mut probe, ti, k, None);
            nth(&mut probe, ti, k, Some(orig + opts.eps));
            let plus = f(&probe)?;
            nth(&mut probe, ti, k, Some(orig - opts.eps));
            let minus = f(&probe)?;
            nth(&mut probe, ti, k, Some(orig));
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            rep.max_abs_error = rep.max_abs_error.max(abs);
            rep.max_rel_error = rep.max_rel_error.max(rel);
            rep.max_abs_grad = rep.max_abs_grad.max(a.abs());
        }
        rep.passed = rep.max_rel_error <= opts.tolerance;
        reports.push(rep);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        loss: value,
        tensors: reports,
    })
}

/// Reads (and with `set`, overwrites) element `k` of tensor `ti`.
fn nth(p: &mut ModelParams<f64>, ti: usize, k: usize, set: Option<f64>) -> f64 {
    let mut tensors = p.tensors_mut();
    let t = &mut tensors[ti].1;
    let slot = t.iter_mut().nth(k).expect("element in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LossKind;

    #[test]
    fn fixture_exercises_every_path() {
        let fx = fixture(0).unwrap();
        assert_eq!(fx.batch[0].input.len(), 6);
        assert!(fx.batch.iter().any(|e| !e.context.is_empty()));
        assert!(fx.batch.iter().any(|e| e.input.attention_mask.contains(&0)));
        assert!(fx.batch.iter().any(|e| e.label() == 0) && fx.batch.iter().any(|e| e.label() == 1));
    }

    #[test]
    fn focal_passes() {
        let r = gradient_check(&GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        // Every tensor actually receives gradient signal.
        for t in &r.tensors {
            assert!(t.max_abs_grad > 0.0, "{} has no gradient", t.name);
        }
    }

    #[test]
    fn cross_entropy_passes() {
        let opts = GradCheckOptions {
            loss: LossKind::CrossEntropy,
            ..Default::default()
        };
        let r = gradient_check(&opts).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn corrupted_w2_flagged() {
        let opts = GradCheckOptions {
            corrupt: Some("fusion.w2".into()),
            ..Default::default()
        };
        let r = gradient_check(&opts).unwrap();
        assert_eq!(r.failures(), ["fusion.w2"]);
    }

    #[test]
    fn zero_loss_batch() {
        let opts = GradCheckOptions {
            zero_loss: true,
            ..Default::default()
        };
        let r = gradient_check(&opts).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.passed());
        for t in &r.tensors {
            assert!(t.max_abs_grad < 1e-12 && t.max_abs_error < 1e-12, "{}", t.name);
        }
    }
}
