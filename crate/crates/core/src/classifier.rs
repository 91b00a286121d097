//! Two-way softmax head on the `[CLS]` state, focal loss and cross entropy.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `2 × d_model`
    pub w_class: Array2<T>,
    pub b_class: Array1<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_class: Array2::zeros((2, d_model)),
            b_class: Array1::zeros(2),
        }
    }
}

pub fn logits<T: Real>(x_cls: ArrayView1<T>, params: &HeadParams<T>) -> [T; 2] {
    let z = params.w_class.dot(&x_cls) + &params.b_class;
    [z[0], z[1]]
}

pub fn softmax2<T: Real>(z: [T; 2]) -> [T; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Class probabilities `(p0, p1)`.
pub fn classify<T: Real>(x_cls: ArrayView1<T>, params: &HeadParams<T>) -> [T; 2] {
    softmax2(logits(x_cls, params))
}

/// Argmax prediction; ties go to the negative class.
pub fn predict_label<T: Real>(p: [T; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

/// Accumulates head gradients from `dL/dlogits` and returns `dL/dx_cls`.
pub fn head_backward<T: Real>(
    x_cls: ArrayView1<T>,
    d_logits: [T; 2],
    params: &HeadParams<T>,
    grads: &mut HeadParams<T>,
) -> Array1<T> {
    for (k, &d) in d_logits.iter().enumerate() {
        grads.w_class.row_mut(k).scaled_add(d, &x_cls);
        grads.b_class[k] += d;
    }
    let d = Array1::from(d_logits.to_vec());
    params.w_class.t().dot(&d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Focal,
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(LossKind::Focal),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected `focal` or `cross_entropy`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    pub gamma: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_PROB_FLOOR
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            floor: DEFAULT_PROB_FLOOR,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Config(format!(
                "probability floor must be in (0, 1), got {}",
                self.floor
            )));
        }
        Ok(())
    }
}

fn true_class_prob<T: Real>(p: [T; 2], y: u8, floor: f64) -> (T, bool) {
    let pt = p[usize::from(y != 0)];
    let floor = T::c(floor);
    if pt < floor {
        (floor, true)
    } else {
        (pt, false)
    }
}

/// `-(1 - p_t)^gamma * ln p_t`, with `p_t` the probability of the true class.
pub fn focal_loss<T: Real>(p: [T; 2], y: u8, cfg: &FocalConfig) -> T {
    let (pt, _) = true_class_prob(p, y, cfg.floor);
    let modulator = if cfg.gamma == 0.0 {
        T::one()
    } else {
        (T::one() - pt).powf(T::c(cfg.gamma))
    };
    -modulator * pt.ln()
}

/// `-ln p_t`.
pub fn cross_entropy<T: Real>(p: [T; 2], y: u8) -> T {
    cross_entropy_with_floor(p, y, DEFAULT_PROB_FLOOR)
}

pub fn cross_entropy_with_floor<T: Real>(p: [T; 2], y: u8, floor: f64) -> T {
    let (pt, _) = true_class_prob(p, y, floor);
    -pt.ln()
}

/// Loss selection for training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub kind: LossKind,
    pub focal: FocalConfig,
}

impl Loss {
    pub fn focal(gamma: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            focal: FocalConfig {
                gamma,
                ..Default::default()
            },
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            focal: FocalConfig::default(),
        }
    }

    pub fn value<T: Real>(&self, p: [T; 2], y: u8) -> T {
        match self.kind {
            LossKind::Focal => focal_loss(p, y, &self.focal),
            LossKind::CrossEntropy => cross_entropy_with_floor(p, y, self.focal.floor),
        }
    }

    /// `dL/dp_t`; zero when `p_t` sits on the clamp.
    fn d_pt<T: Real>(&self, p: [T; 2], y: u8) -> T {
        let (pt, clamped) = true_class_prob(p, y, self.focal.floor);
        if clamped {
            return T::zero();
        }
        let gamma = match self.kind {
            LossKind::CrossEntropy => 0.0,
            LossKind::Focal => self.focal.gamma,
        };
        if gamma == 0.0 {
            return -T::one() / pt;
        }
        let g = T::c(gamma);
        let one_minus = T::one() - pt;
        // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        let first = if one_minus == T::zero() {
            T::zero()
        } else {
            g * one_minus.powf(g - T::one()) * pt.ln()
        };
        first - one_minus.powf(g) / pt
    }

    /// Gradient of the loss with respect to the two logits.
    pub fn grad_logits<T: Real>(&self, p: [T; 2], y: u8) -> [T; 2] {
        let t = usize::from(y != 0);
        let dpt = self.d_pt(p, y);
        let pt = p[t];
        let mut out = [T::zero(); 2];
        for (k, o) in out.iter_mut().enumerate() {
            let delta = if k == t { T::one() } else { T::zero() };
            *o = dpt * pt * (delta - p[k]);
        }
        out
    }
}
