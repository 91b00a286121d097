use ndarray::{ArrayD, Zip};

use super::params::ModelParams;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`; β1 = 0.9, β2 = 0.999, eps = 1e-8.
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<ArrayD<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(state.beta1), T::c(state.beta2));
    let c1 = T::c(1.0 - state.beta1.powi(t));
    let c2 = T::c(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::c(lr), T::c(state.eps));
    let one = T::one();
    for (((_, mut p), (_, g)), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}
