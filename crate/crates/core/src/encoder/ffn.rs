use ndarray::{Array1, Array2, Axis};

use crate::real::Real;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_COEF) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c(SQRT_2_OVER_PI);
    let k = T::c(GELU_COEF);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * x * x)
}

pub struct FfnWeights<'a, T> {
    pub w1: &'a Array2<T>,
    pub b1: &'a Array1<T>,
    pub w2: &'a Array2<T>,
    pub b2: &'a Array1<T>,
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

/// `gelu(X W1 + b1) W2 + b2`, row-wise.
pub fn feed_forward<T: Real>(x: &Array2<T>, w: &FfnWeights<'_, T>) -> Array2<T> {
    feed_forward_cached(x, w).0
}

pub fn feed_forward_cached<T: Real>(x: &Array2<T>, w: &FfnWeights<'_, T>) -> (Array2<T>, FfnCache<T>) {
    let pre = x.dot(w.w1) + w.b1;
    let act = pre.mapv(gelu);
    let out = act.dot(w.w2) + w.b2;
    (
        out,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub struct FfnGrads<'a, T> {
    pub w1: &'a mut Array2<T>,
    pub b1: &'a mut Array1<T>,
    pub w2: &'a mut Array2<T>,
    pub b2: &'a mut Array1<T>,
}

pub fn feed_forward_backward<T: Real>(
    cache: &FfnCache<T>,
    d_out: &Array2<T>,
    w: &FfnWeights<'_, T>,
    g: FfnGrads<'_, T>,
) -> Array2<T> {
    *g.w2 += &cache.act.t().dot(d_out);
    *g.b2 += &d_out.sum_axis(Axis(0));
    let mut d_pre = d_out.dot(&w.w2.t());
    d_pre.zip_mut_with(&cache.pre, |d, &p| *d *= gelu_grad(p));
    *g.w1 += &cache.x.t().dot(&d_pre);
    *g.b1 += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&w.w1.t())
}
