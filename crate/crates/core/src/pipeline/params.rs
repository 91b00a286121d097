use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::HeadParams;
use crate::embedding::EmbeddingParams;
use crate::encoder::LayerParams;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::real::Real;

/// Every dimension needed to allocate a [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Width of the pretrained synonym vectors.
    pub d_w: usize,
    pub synonym_rows: usize,
}

impl ModelShape {
    /// Total scalar count, or `None` on overflow.
    pub fn num_parameters(&self) -> Option<usize> {
        let (d, f) = (self.d_model, self.d_ff);
        let layer = (|| {
            let sq = d.checked_mul(d)?.checked_mul(4)?;
            let ff = d.checked_mul(f)?.checked_mul(2)?;
            sq.checked_add(ff)?.checked_add(d.checked_mul(9)?)?.checked_add(f)
        })()?;
        let parts = [
            self.vocab_size.checked_add(self.max_len)?.checked_add(2)?.checked_mul(d)?,
            layer.checked_mul(self.layers)?,
            d.checked_mul(self.d_w)?.checked_add(d)?.checked_add(d.checked_mul(d)?)?,
            d.checked_mul(2)?.checked_add(2)?,
            self.synonym_rows.checked_mul(self.d_w)?,
        ];
        parts.iter().try_fold(0usize, |acc, &p| acc.checked_add(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embeddings: EmbeddingParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub fusion: FusionParams<T>,
    pub head: HeadParams<T>,
    /// Trainable synonym vectors, `synonym_rows × d_w`.
    pub synonyms: Array2<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, w_ff1, b_ff1, w_ff2, b_ff2, ln2_gain, ln2_bias)
    };
}

impl<T: Real> ModelParams<T> {
    /// All tensors zero (layer-norm gains included); a gradient buffer.
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            embeddings: EmbeddingParams::zeros(shape.vocab_size, shape.max_len, shape.d_model),
            layers: (0..shape.layers)
                .map(|_| LayerParams::zeros(shape.d_model, shape.d_ff))
                .collect(),
            fusion: FusionParams::zeros(shape.d_model, shape.d_w),
            head: HeadParams::zeros(shape.d_model),
            synonyms: Array2::zeros((shape.synonym_rows, shape.d_w)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    /// Truncated-normal weights (resampled beyond two standard deviations),
    /// zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(shape: &ModelShape, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let mut draw = |r: usize, c: usize| -> Array2<T> {
            Array2::from_shape_fn((r, c), |_| loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= 2.0 * std {
                    break T::c(x);
                }
            })
        };
        let (d, f) = (shape.d_model, shape.d_ff);
        let embeddings = EmbeddingParams {
            token: draw(shape.vocab_size, d),
            segment: draw(2, d),
            position: draw(shape.max_len, d),
        };
        let layers = (0..shape.layers)
            .map(|_| {
                let mut p = LayerParams::new(d, f);
                p.wq = draw(d, d);
                p.wk = draw(d, d);
                p.wv = draw(d, d);
                p.wo = draw(d, d);
                p.w_ff1 = draw(d, f);
                p.w_ff2 = draw(f, d);
                p
            })
            .collect();
        let fusion = FusionParams {
            w1: draw(d, shape.d_w),
            b1: Array1::zeros(d),
            w2: draw(d, d),
        };
        let head = HeadParams {
            w_class: draw(2, d),
            b_class: Array1::zeros(2),
        };
        let synonyms = draw(shape.synonym_rows, shape.d_w);
        Self {
            embeddings,
            layers,
            fusion,
            head,
            synonyms,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.embeddings.token.nrows(),
            max_len: self.embeddings.position.nrows(),
            d_model: self.embeddings.token.ncols(),
            d_ff: self.layers.first().map_or(0, |l| l.w_ff1.ncols()),
            layers: self.layers.len(),
            d_w: self.synonyms.ncols(),
            synonym_rows: self.synonyms.nrows(),
        }
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), self.embeddings.token.view().into_dyn()),
            ("embeddings.segment".to_string(), self.embeddings.segment.view().into_dyn()),
            ("embeddings.position".to_string(), self.embeddings.position.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push((format!("layers.{i}.{}", stringify!($f)), l.$f.view().into_dyn()));)*
                };
            }
            layer_fields!(push);
        }
        out.push(("fusion.w1".into(), self.fusion.w1.view().into_dyn()));
        out.push(("fusion.b1".into(), self.fusion.b1.view().into_dyn()));
        out.push(("fusion.w2".into(), self.fusion.w2.view().into_dyn()));
        out.push(("head.w_class".into(), self.head.w_class.view().into_dyn()));
        out.push(("head.b_class".into(), self.head.b_class.view().into_dyn()));
        out.push(("synonyms".into(), self.synonyms.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), self.embeddings.token.view_mut().into_dyn()),
            ("embeddings.segment".to_string(), self.embeddings.segment.view_mut().into_dyn()),
            ("embeddings.position".to_string(), self.embeddings.position.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push((format!("layers.{i}.{}", stringify!($f)), l.$f.view_mut().into_dyn()));)*
                };
            }
            layer_fields!(push);
        }
        out.push(("fusion.w1".into(), self.fusion.w1.view_mut().into_dyn()));
        out.push(("fusion.b1".into(), self.fusion.b1.view_mut().into_dyn()));
        out.push(("fusion.w2".into(), self.fusion.w2.view_mut().into_dyn()));
        out.push(("head.w_class".into(), self.head.w_class.view_mut().into_dyn()));
        out.push(("head.b_class".into(), self.head.b_class.view_mut().into_dyn()));
        out.push(("synonyms".into(), self.synonyms.view_mut().into_dyn()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, mut a) in self.tensors_mut() {
            a.mapv_inplace(|x| x * s);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.shape());
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            ndarray::Zip::from(&mut dst)
                .and(&src)
                .for_each(|d, &s| *d = U::c(s.to_f64_lossy()));
        }
        out
    }

    /// Copies `data` into the named tensor; shape must match exactly.
    pub fn set_tensor(&mut self, name: &str, dims: &[usize], data: &[T]) -> Result<()> {
        let mut tensors = self.tensors_mut();
        let (_, view) = tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if view.shape() != dims {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, expected {:?}",
                view.shape()
            )));
        }
        let src = ArrayViewD::from_shape(IxDyn(dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        view.assign(&src);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ModelShape {
        ModelShape {
            vocab_size: 10,
            max_len: 6,
            d_model: 8,
            d_ff: 32,
            layers: 2,
            d_w: 4,
            synonym_rows: 3,
        }
    }

    #[test]
    fn init_scheme() {
        let p = ModelParams::<f64>::init(&shape(), 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.shape(), shape());
        assert!(p.embeddings.token.iter().all(|x| x.abs() <= 0.04));
        assert!(p.embeddings.token.iter().any(|&x| x != 0.0));
        for l in &p.layers {
            assert!(l.ln1_gain.iter().all(|&g| g == 1.0));
            assert!(l.bq.iter().all(|&b| b == 0.0));
        }
        assert!(p.head.b_class.iter().all(|&b| b == 0.0));
        let all: Vec<f64> = p.tensors().iter().filter(|(n, _)| n.contains("w")).flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect();
        let var = all.iter().map(|x| x * x).sum::<f64>() / all.len() as f64;
        // Truncation at 2 sigma shrinks the variance to about 0.774 sigma^2.
        assert!((var.sqrt() - 0.02 * 0.774f64.sqrt()).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn tensor_names_unique_and_complete() {
        let p = ModelParams::<f32>::zeros(&shape());
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 3 + 16 * 2 + 3 + 2 + 1);
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"fusion.w2".to_string()));
        assert!(names.contains(&"layers.1.ln2_bias".to_string()));
    }

    #[test]
    fn shape_counts_parameters() {
        let p = ModelParams::<f32>::zeros(&shape());
        assert_eq!(shape().num_parameters(), Some(p.num_parameters()));
        let huge = ModelShape { vocab_size: usize::MAX, ..shape() };
        assert_eq!(huge.num_parameters(), None);
    }

    #[test]
    fn cast_round_trip() {
        let p = ModelParams::<f32>::init(&shape(), 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
    }

    #[test]
    fn add_scale_and_set() {
        let mut a = ModelParams::<f64>::zeros(&shape());
        let mut b = a.zeros_like();
        b.head.b_class[1] = 2.0;
        a.add_assign(&b);
        a.scale(0.5);
        assert_eq!(a.head.b_class[1], 1.0);
        a.set_tensor("head.b_class", &[2], &[3.0, 4.0]).unwrap();
        assert_eq!(a.head.b_class.to_vec(), [3.0, 4.0]);
        assert!(a.set_tensor("head.b_class", &[3], &[0.0; 3]).is_err());
        assert!(a.set_tensor("nope", &[1], &[0.0]).is_err());
        a.synonyms[[0, 0]] = f64::NAN;
        assert_eq!(a.first_non_finite().as_deref(), Some("synonyms"));
    }
}
