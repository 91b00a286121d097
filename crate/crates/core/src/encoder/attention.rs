use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::real::Real;

pub struct AttentionWeights<'a, T> {
    pub wq: &'a Array2<T>,
    pub bq: &'a Array1<T>,
    pub wk: &'a Array2<T>,
    pub bk: &'a Array1<T>,
    pub wv: &'a Array2<T>,
    pub bv: &'a Array1<T>,
    pub wo: &'a Array2<T>,
    pub bo: &'a Array1<T>,
}

pub struct AttentionGrads<'a, T> {
    pub wq: &'a mut Array2<T>,
    pub bq: &'a mut Array1<T>,
    pub wk: &'a mut Array2<T>,
    pub bk: &'a mut Array1<T>,
    pub wv: &'a mut Array2<T>,
    pub bv: &'a mut Array1<T>,
    pub wo: &'a mut Array2<T>,
    pub bo: &'a mut Array1<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `T × T` weight matrix per head.
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

impl<T> AttentionCache<T> {
    pub fn probs(&self) -> &[Array2<T>] {
        &self.probs
    }
}

/// Softmax over the unmasked keys of every query row. Masked keys get weight
/// exactly zero; a row with no unmasked key is all zeros.
pub fn masked_softmax_rows<T: Real>(scores: &Array2<T>, mask: &[u8]) -> Array2<T> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m != 0)
            .map(|(&s, _)| s)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for (j, (&s, &m)) in row.iter().zip(mask).enumerate() {
            if m != 0 {
                let e = (s - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}

fn head_cols(h: usize, d_head: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * d_head..(h + 1) * d_head]
}

pub fn multi_head_attention<T: Real>(
    x: &Array2<T>,
    mask: &[u8],
    w: &AttentionWeights<'_, T>,
    n_heads: usize,
) -> Array2<T> {
    multi_head_attention_cached(x, mask, w, n_heads).0
}

/// Scaled dot-product attention per head (`1/sqrt(d_head)`), concatenated
/// and projected by `wo`.
pub fn multi_head_attention_cached<T: Real>(
    x: &Array2<T>,
    mask: &[u8],
    w: &AttentionWeights<'_, T>,
    n_heads: usize,
) -> (Array2<T>, AttentionCache<T>) {
    let d_model = x.ncols();
    let d_head = d_model / n_heads;
    let scale = T::one() / T::c(d_head as f64).sqrt();

    let q = x.dot(w.wq) + w.bq;
    let k = x.dot(w.wk) + w.bk;
    let v = x.dot(w.wv) + w.bv;
    let mut context = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = head_cols(h, d_head);
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let p = masked_softmax_rows(&scores, mask);
        context.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    let out = context.dot(w.wo) + w.bo;
    (
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            context,
        },
    )
}

/// Returns `dX` and accumulates parameter gradients.
pub fn multi_head_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    d_out: &Array2<T>,
    w: &AttentionWeights<'_, T>,
    g: AttentionGrads<'_, T>,
) -> Array2<T> {
    let n_heads = cache.probs.len();
    let d_head = cache.x.ncols() / n_heads;
    let scale = T::one() / T::c(d_head as f64).sqrt();

    *g.wo += &cache.context.t().dot(d_out);
    *g.bo += &d_out.sum_axis(Axis(0));
    let d_context = d_out.dot(&w.wo.t());

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = head_cols(h, d_head);
        let dctx: ArrayView2<T> = d_context.slice(cols);
        let dp = dctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx));
        // softmax backward, row by row
        let mut ds = Array2::zeros(p.raw_dim());
        for i in 0..p.nrows() {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot: T = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..p.ncols() {
                ds[[i, j]] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }

    *g.wq += &cache.x.t().dot(&dq);
    *g.bq += &dq.sum_axis(Axis(0));
    *g.wk += &cache.x.t().dot(&dk);
    *g.bk += &dk.sum_axis(Axis(0));
    *g.wv += &cache.x.t().dot(&dv);
    *g.bv += &dv.sum_axis(Axis(0));
    dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t())
}
