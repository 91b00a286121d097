//! Post-LN transformer encoder:
//!
//! ```text
//! G   = LN(X + MHA(X))
//! X'  = LN(G + FFN(G))
//! ```
//!
//! Every sublayer has a cached forward and a matching backward so the whole
//! stack can be trained without an autodiff tape. [`run_encoder`] exposes the
//! injection point between layer `l` and layer `l + 1` used by deep fusion.

mod attention;
mod ffn;
mod norm;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    masked_softmax_rows, multi_head_attention, multi_head_attention_backward,
    multi_head_attention_cached, AttentionCache, AttentionGrads, AttentionWeights,
};
pub use ffn::{feed_forward, feed_forward_backward, feed_forward_cached, gelu, gelu_grad, FfnCache, FfnGrads, FfnWeights};
pub use norm::{layer_norm, layer_norm_rows, layer_norm_rows_backward, LayerNormCache, DEFAULT_LN_EPS};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Number of layers run before the fusion hook (1-based, `1 <= l < layers`).
    pub fusion_layer: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

impl Default for EncoderConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            layers: 4,
            fusion_layer: 1,
            dropout_rate: 0.1,
            layer_norm_eps: DEFAULT_LN_EPS,
        }
    }
}

impl EncoderConfig {
    /// Twelve layers of width 768 with fusion after the first layer.
    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            layers: 12,
            fusion_layer: 1,
            dropout_rate: 0.1,
            layer_norm_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.layers < 2 || self.fusion_layer < 1 || self.fusion_layer >= self.layers {
            return Err(Error::Config(format!(
                "fusion_layer must satisfy 1 <= l < layers, got l={} layers={}",
                self.fusion_layer, self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return Err(Error::Config("layer_norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub w_ff1: Array2<T>,
    pub b_ff1: Array1<T>,
    pub w_ff2: Array2<T>,
    pub b_ff2: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
}

impl<T: Real> LayerParams<T> {
    /// All-zero weights with layer-norm gains at one.
    pub fn new(d_model: usize, d_ff: usize) -> Self {
        let mut p = Self::zeros(d_model, d_ff);
        p.ln1_gain.fill(T::one());
        p.ln2_gain.fill(T::one());
        p
    }

    /// Every tensor zero, gains included; used as a gradient buffer.
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        let sq = || Array2::zeros((d_model, d_model));
        let v = || Array1::zeros(d_model);
        Self {
            wq: sq(),
            bq: v(),
            wk: sq(),
            bk: v(),
            wv: sq(),
            bv: v(),
            wo: sq(),
            bo: v(),
            ln1_gain: v(),
            ln1_bias: v(),
            w_ff1: Array2::zeros((d_model, d_ff)),
            b_ff1: Array1::zeros(d_ff),
            w_ff2: Array2::zeros((d_ff, d_model)),
            b_ff2: v(),
            ln2_gain: v(),
            ln2_bias: v(),
        }
    }

    pub fn attention(&self) -> AttentionWeights<'_, T> {
        AttentionWeights {
            wq: &self.wq,
            bq: &self.bq,
            wk: &self.wk,
            bk: &self.bk,
            wv: &self.wv,
            bv: &self.bv,
            wo: &self.wo,
            bo: &self.bo,
        }
    }

    pub fn ffn(&self) -> FfnWeights<'_, T> {
        FfnWeights {
            w1: &self.w_ff1,
            b1: &self.b_ff1,
            w2: &self.w_ff2,
            b2: &self.b_ff2,
        }
    }
}

/// Inverted dropout driven by a caller-owned RNG.
pub struct Dropout<'a> {
    rate: f64,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Dropout<'a> {
    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    /// A scaled keep-mask, or `None` when the rate is zero.
    pub fn mask<T: Real>(&mut self, rows: usize, cols: usize) -> Option<Array2<T>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = T::c(1.0 / (1.0 - self.rate));
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if self.rng.random::<f64>() < self.rate {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

pub(crate) fn apply_mask<T: Real>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    attn: AttentionCache<T>,
    attn_mask: Option<Array2<T>>,
    ln1: LayerNormCache<T>,
    ffn: FfnCache<T>,
    ffn_mask: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
}

/// One post-LN layer in evaluation mode.
pub fn encoder_layer<T: Real>(
    x: &Array2<T>,
    mask: &[u8],
    params: &LayerParams<T>,
    cfg: &EncoderConfig,
) -> Array2<T> {
    encoder_layer_cached(x, mask, params, cfg, None).0
}

/// One layer with backward bookkeeping; dropout is applied to the attention
/// and feed-forward outputs when `dropout` is given.
pub fn encoder_layer_cached<T: Real>(
    x: &Array2<T>,
    mask: &[u8],
    params: &LayerParams<T>,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<T>, LayerCache<T>) {
    let (rows, cols) = x.dim();
    let (mut a, attn) = multi_head_attention_cached(x, mask, &params.attention(), cfg.n_heads);
    let attn_mask = dropout.as_mut().and_then(|d| d.mask(rows, cols));
    apply_mask(&mut a, &attn_mask);
    a += x;
    let (g, ln1) = layer_norm_rows(&a, &params.ln1_gain, &params.ln1_bias, cfg.layer_norm_eps);

    let (mut f, ffn) = feed_forward_cached(&g, &params.ffn());
    let ffn_mask = dropout.as_mut().and_then(|d| d.mask(rows, cols));
    apply_mask(&mut f, &ffn_mask);
    f += &g;
    let (out, ln2) = layer_norm_rows(&f, &params.ln2_gain, &params.ln2_bias, cfg.layer_norm_eps);
    (
        out,
        LayerCache {
            attn,
            attn_mask,
            ln1,
            ffn,
            ffn_mask,
            ln2,
        },
    )
}

pub fn encoder_layer_backward<T: Real>(
    cache: &LayerCache<T>,
    d_out: &Array2<T>,
    params: &LayerParams<T>,
    grads: &mut LayerParams<T>,
) -> Array2<T> {
    let d_res2 = layer_norm_rows_backward(
        &cache.ln2,
        d_out,
        &params.ln2_gain,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    );
    let mut d_f = d_res2.clone();
    apply_mask(&mut d_f, &cache.ffn_mask);
    let ffn_grads = FfnGrads {
        w1: &mut grads.w_ff1,
        b1: &mut grads.b_ff1,
        w2: &mut grads.w_ff2,
        b2: &mut grads.b_ff2,
    };
    let d_g = d_res2 + feed_forward_backward(&cache.ffn, &d_f, &params.ffn(), ffn_grads);

    let d_res1 = layer_norm_rows_backward(
        &cache.ln1,
        &d_g,
        &params.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    let mut d_a = d_res1.clone();
    apply_mask(&mut d_a, &cache.attn_mask);
    let attn_grads = AttentionGrads {
        wq: &mut grads.wq,
        bq: &mut grads.bq,
        wk: &mut grads.wk,
        bk: &mut grads.bk,
        wv: &mut grads.wv,
        bv: &mut grads.bv,
        wo: &mut grads.wo,
        bo: &mut grads.bo,
    };
    d_res1 + multi_head_attention_backward(&cache.attn, &d_a, &params.attention(), attn_grads)
}

/// Runs layers `1..=l`, applies `fusion_hook` to the hidden states, then runs
/// layers `l+1..=L` (evaluation mode).
pub fn run_encoder<T, F>(
    embedded: &Array2<T>,
    mask: &[u8],
    layers: &[LayerParams<T>],
    cfg: &EncoderConfig,
    fusion_hook: F,
) -> Array2<T>
where
    T: Real,
    F: FnOnce(&mut Array2<T>),
{
    let split = cfg.fusion_layer.min(layers.len());
    let mut x = embedded.clone();
    for p in &layers[..split] {
        x = encoder_layer(&x, mask, p, cfg);
    }
    fusion_hook(&mut x);
    for p in &layers[split..] {
        x = encoder_layer(&x, mask, p, cfg);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Axis};
    use rand::SeedableRng;

    fn cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: d,
            n_heads: 2,
            d_ff: 4 * d,
            layers: 2,
            fusion_layer: 1,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-12,
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> LayerParams<f64> {
        let mut p = LayerParams::new(d, 4 * d);
        for a in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut p.w_ff1, &mut p.w_ff2] {
            a.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
        for b in [&mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo, &mut p.b_ff1, &mut p.b_ff2, &mut p.ln1_bias, &mut p.ln2_bias] {
            b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        for g in [&mut p.ln1_gain, &mut p.ln2_gain] {
            g.mapv_inplace(|_| rng.random_range(0.8..1.2));
        }
        p
    }

    fn rand_x(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::full_scale().validate().is_ok());
        let mut c = cfg(8);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(8);
        c.fusion_layer = 2;
        assert!(c.validate().is_err());
        let mut c = cfg(8);
        c.fusion_layer = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(8);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_x(&mut rng, 5, 8);
        let p = LayerParams::<f64>::new(8, 32);
        let c = cfg(8);
        let y = encoder_layer(&x, &[1, 1, 1, 1, 0], &p, &c);
        let (want, _) = layer_norm_rows(&x, &p.ln1_gain, &p.ln1_bias, c.layer_norm_eps);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_x(&mut rng, 6, 8);
        let p = random_layer(&mut rng, 8, 0.5);
        let c = cfg(8);
        let a = encoder_layer(&x, &[1, 1, 1, 1, 1, 0], &p, &c);
        let b = encoder_layer(&x, &[1, 1, 1, 1, 1, 0], &p, &c);
        assert_eq!(a, b);
    }

    #[test]
    fn stack_is_composition_of_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_x(&mut rng, 6, 8);
        let layers = vec![random_layer(&mut rng, 8, 0.5), random_layer(&mut rng, 8, 0.5)];
        let c = cfg(8);
        let mask = [1, 1, 1, 1, 0, 0];
        let stacked = run_encoder(&x, &mask, &layers, &c, |_| {});
        let manual = encoder_layer(&encoder_layer(&x, &mask, &layers[0], &c), &mask, &layers[1], &c);
        assert_eq!(stacked, manual);
        let zero_hook = run_encoder(&x, &mask, &layers, &c, |h| *h += 0.0);
        assert_eq!(stacked, zero_hook);
    }

    #[test]
    fn hook_perturbation_spreads_through_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_x(&mut rng, 6, 8);
        let layers = vec![random_layer(&mut rng, 8, 0.5), random_layer(&mut rng, 8, 0.5)];
        let c = cfg(8);
        let mask = [1, 1, 1, 1, 0, 0];
        let base = run_encoder(&x, &mask, &layers, &c, |_| {});
        let bumped = run_encoder(&x, &mask, &layers, &c, |h| {
            h.row_mut(2).mapv_inplace(|v| v + 0.5);
        });
        // every unmasked row changes because every row attends to row 2
        for i in 0..4 {
            let diff: f64 = (&base.row(i) - &bumped.row(i)).mapv(f64::abs).sum();
            assert!(diff > 1e-6, "row {i} unchanged");
        }

        // With a zero query/key/value path in the last layer, only row 2 moves.
        let mut isolated = layers.clone();
        isolated[1].wv.fill(0.0);
        isolated[1].wo.fill(0.0);
        let base = run_encoder(&x, &mask, &isolated, &c, |_| {});
        let bumped = run_encoder(&x, &mask, &isolated, &c, |h| {
            h.row_mut(2).mapv_inplace(|v| v + 0.5);
        });
        for i in 0..6 {
            let same = base.row(i) == bumped.row(i);
            assert_eq!(same, i != 2, "row {i}");
        }
    }

    #[test]
    fn padding_never_changes_unmasked_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = rand_x(&mut rng, 6, 8);
        let layers = vec![random_layer(&mut rng, 8, 0.5), random_layer(&mut rng, 8, 0.5)];
        let c = cfg(8);
        let mask = [1, 1, 1, 0, 0, 0];
        let before = run_encoder(&x, &mask, &layers, &c, |_| {});
        x.slice_mut(s![3.., ..]).fill(-7.0);
        let after = run_encoder(&x, &mask, &layers, &c, |_| {});
        assert_eq!(before.slice(s![..3, ..]), after.slice(s![..3, ..]));
    }

    #[test]
    fn output_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_x(&mut rng, 6, 8);
        let mut layer = random_layer(&mut rng, 8, 0.5);
        layer.ln2_gain.fill(1.0);
        layer.ln2_bias.fill(0.0);
        let y = encoder_layer(&x, &[1; 6], &layer, &cfg(8));
        for row in y.axis_iter(Axis(0)) {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    fn loss(y: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (y * probe).sum()
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_x(&mut rng, 6, 8);
        let params = random_layer(&mut rng, 8, 0.5);
        let probe = rand_x(&mut rng, 6, 8);
        let mask = [1, 1, 1, 1, 1, 0];
        let c = cfg(8);

        let (_, cache) = encoder_layer_cached(&x, &mask, &params, &c, None);
        let mut grads = LayerParams::zeros(8, 32);
        let dx = encoder_layer_backward(&cache, &probe, &params, &mut grads);

        let eps = 1e-5;
        let f = |xx: &Array2<f64>, pp: &LayerParams<f64>| loss(&encoder_layer(xx, &mask, pp, &c), &probe);
        for idx in [(0, 0), (2, 3), (5, 7), (4, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (f(&xp, &params) - f(&xm, &params)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7 * (1.0 + fd.abs()), "dx{idx:?}: {fd} vs {}", dx[idx]);
        }
        let checks: [(&str, fn(&mut LayerParams<f64>) -> &mut f64, f64); 6] = [
            ("wq", |p| &mut p.wq[[1, 2]], 0.0),
            ("wk", |p| &mut p.wk[[3, 0]], 0.0),
            ("wv", |p| &mut p.wv[[7, 7]], 0.0),
            ("w_ff1", |p| &mut p.w_ff1[[2, 9]], 0.0),
            ("ln1_gain", |p| &mut p.ln1_gain[4], 0.0),
            ("b_ff2", |p| &mut p.b_ff2[5], 0.0),
        ];
        for (name, get, _) in checks {
            let mut pp = params.clone();
            *get(&mut pp) += eps;
            let plus = f(&x, &pp);
            *get(&mut pp) -= 2.0 * eps;
            let minus = f(&x, &pp);
            let fd = (plus - minus) / (2.0 * eps);
            let mut g = grads.clone();
            let analytic = *get(&mut g);
            assert!((fd - analytic).abs() < 1e-7 * (1.0 + fd.abs()), "{name}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn dropout_masks_scale_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d = Dropout::new(0.25, &mut rng);
        let m: Array2<f64> = d.mask(100, 100).unwrap();
        let kept = m.iter().filter(|&&v| v != 0.0).count();
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        assert!((kept as f64 / 10_000.0 - 0.75).abs() < 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(Dropout::new(0.0, &mut rng).mask::<f64>(2, 2).is_none());
    }
}
