//! Synonym deep fusion, applied to the hidden states after encoder layer `l`.
//!
//! For a keyword position `i` with synonym vectors `v_i1..v_ih`:
//!
//! ```text
//! u_ij = W1 v_ij + b1                  (align to the model width)
//! r_i  = softmax_j(x_i^T W2 u_ij)      (character-to-word attention, unscaled)
//! x~_i = x_i + sum_j r_ij u_ij         (residual enrichment)
//! ```
//!
//! Positions without a synonym set pass through untouched.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `d_model × d_w`
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// `d_model × d_model`
    pub w2: Array2<T>,
}

impl<T: Real> FusionParams<T> {
    pub fn zeros(d_model: usize, d_w: usize) -> Self {
        Self {
            w1: Array2::zeros((d_model, d_w)),
            b1: Array1::zeros(d_model),
            w2: Array2::zeros((d_model, d_model)),
        }
    }
}

/// Synonym rows attached to one sequence position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionSlot {
    pub position: usize,
    /// Row indices into the trainable synonym table.
    pub synonym_rows: Vec<usize>,
}

/// Per-example fusion plan: which positions are enriched and with which
/// synonym vectors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FusionContext {
    pub slots: Vec<FusionSlot>,
}

impl FusionContext {
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Checks slot positions against the keyword mask and the table size.
    pub fn validate(&self, keyword_mask: &[u8], table_rows: usize, h_max: usize) -> Result<()> {
        let mut seen = vec![false; keyword_mask.len()];
        for slot in &self.slots {
            let p = slot.position;
            if p >= keyword_mask.len() || keyword_mask[p] == 0 {
                return Err(Error::Internal(format!(
                    "fusion slot at position {p} is not a keyword position"
                )));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Internal(format!("duplicate fusion slot at position {p}")));
            }
            if slot.synonym_rows.is_empty() || slot.synonym_rows.len() > h_max {
                return Err(Error::Internal(format!(
                    "fusion slot at position {p} has {} synonyms (expected 1..={h_max})",
                    slot.synonym_rows.len()
                )));
            }
            if let Some(&r) = slot.synonym_rows.iter().find(|&&r| r >= table_rows) {
                return Err(Error::Internal(format!(
                    "synonym row {r} out of range ({table_rows} rows)"
                )));
            }
        }
        Ok(())
    }
}

/// `u_j = W1 v_j + b1` for every synonym vector.
pub fn align_synonyms<T: Real>(vectors: ArrayView2<T>, params: &FusionParams<T>) -> Result<Array2<T>> {
    if vectors.ncols() != params.w1.ncols() {
        return Err(Error::Config(format!(
            "synonym vectors have dimension {}, alignment expects {}",
            vectors.ncols(),
            params.w1.ncols()
        )));
    }
    Ok(vectors.dot(&params.w1.t()) + &params.b1)
}

fn softmax<T: Real>(scores: &Array1<T>) -> Array1<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e = scores.mapv(|s| (s - max).exp());
    let z = e.sum();
    e / z
}

/// Attention weights of one position over its aligned synonyms:
/// `softmax_j(x^T W2 u_j)`.
pub fn char_to_word_attention<T: Real>(x: ArrayView1<T>, u: &Array2<T>, w2: &Array2<T>) -> Array1<T> {
    let q = w2.t().dot(&x);
    softmax(&u.dot(&q))
}

/// `x + sum_j r_j u_j`.
pub fn fuse_position<T: Real>(x: ArrayView1<T>, u: &Array2<T>, r: &Array1<T>) -> Array1<T> {
    let mixed = u.t().dot(r);
    &x + &mixed
}

fn gather_rows<T: Real>(table: &Array2<T>, rows: &[usize]) -> Array2<T> {
    table.select(Axis(0), rows)
}

/// Applies fusion at every slot of `ctx`; all other rows are copied.
pub fn deep_fusion<T: Real>(
    hidden: &Array2<T>,
    keyword_mask: &[u8],
    ctx: &FusionContext,
    params: &FusionParams<T>,
    synonym_table: &Array2<T>,
) -> Result<Array2<T>> {
    Ok(deep_fusion_cached(hidden, keyword_mask, ctx, params, synonym_table)?.0)
}

#[derive(Debug, Clone)]
struct SlotCache<T> {
    position: usize,
    rows: Vec<usize>,
    x: Array1<T>,
    v: Array2<T>,
    u: Array2<T>,
    q: Array1<T>,
    r: Array1<T>,
}

#[derive(Debug, Clone, Default)]
pub struct FusionCache<T> {
    slots: Vec<SlotCache<T>>,
}

impl<T> FusionCache<T> {
    /// Attention weights per fused position, in slot order.
    pub fn weights(&self) -> impl Iterator<Item = (usize, &Array1<T>)> {
        self.slots.iter().map(|s| (s.position, &s.r))
    }
}

pub fn deep_fusion_cached<T: Real>(
    hidden: &Array2<T>,
    keyword_mask: &[u8],
    ctx: &FusionContext,
    params: &FusionParams<T>,
    synonym_table: &Array2<T>,
) -> Result<(Array2<T>, FusionCache<T>)> {
    if keyword_mask.len() != hidden.nrows() {
        return Err(Error::Internal(format!(
            "keyword mask length {} does not match {} hidden rows",
            keyword_mask.len(),
            hidden.nrows()
        )));
    }
    ctx.validate(keyword_mask, synonym_table.nrows(), usize::MAX)?;
    let mut out = hidden.clone();
    let mut cache = FusionCache {
        slots: Vec::with_capacity(ctx.slots.len()),
    };
    for slot in &ctx.slots {
        let x = hidden.row(slot.position).to_owned();
        let v = gather_rows(synonym_table, &slot.synonym_rows);
        let u = align_synonyms(v.view(), params)?;
        let q = params.w2.t().dot(&x);
        let r = softmax(&u.dot(&q));
        out.row_mut(slot.position).assign(&fuse_position(x.view(), &u, &r));
        cache.slots.push(SlotCache {
            position: slot.position,
            rows: slot.synonym_rows.clone(),
            x,
            v,
            u,
            q,
            r,
        });
    }
    Ok((out, cache))
}

/// Backward through [`deep_fusion_cached`]. Accumulates into the fusion
/// parameter gradients and the synonym-table gradient; returns `dX`.
pub fn deep_fusion_backward<T: Real>(
    cache: &FusionCache<T>,
    d_out: &Array2<T>,
    params: &FusionParams<T>,
    grads: &mut FusionParams<T>,
    d_synonym_table: &mut Array2<T>,
) -> Array2<T> {
    let mut dx_all = d_out.clone();
    for s in &cache.slots {
        let dxt = d_out.row(s.position);
        // x~ = x + u^T r
        let mut du = Array2::zeros(s.u.raw_dim());
        for (j, mut row) in du.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&(&dxt * s.r[j]));
        }
        let dr = s.u.dot(&dxt);
        let dot = s.r.dot(&dr);
        let ds = Array1::from_shape_fn(s.r.len(), |j| s.r[j] * (dr[j] - dot));
        // s_j = u_j . q, q = W2^T x
        let dq = s.u.t().dot(&ds);
        for (j, mut row) in du.axis_iter_mut(Axis(0)).enumerate() {
            row.scaled_add(ds[j], &s.q);
        }
        for a in 0..s.x.len() {
            let xa = s.x[a];
            grads.w2.row_mut(a).scaled_add(xa, &dq);
        }
        let mut dx = dx_all.row_mut(s.position);
        dx += &params.w2.dot(&dq);
        // u = v W1^T + b1
        grads.w1 += &du.t().dot(&s.v);
        grads.b1 += &du.sum_axis(Axis(0));
        let dv = du.dot(&params.w1);
        for (j, &row) in s.rows.iter().enumerate() {
            let mut target = d_synonym_table.row_mut(row);
            target += &dv.row(j);
        }
    }
    dx_all
}
