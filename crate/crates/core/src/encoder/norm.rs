use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

use crate::real::Real;

pub const DEFAULT_LN_EPS: f64 = 1e-12;

/// Normalizes one feature vector: `gain * (x - mean) / sqrt(var + eps) + bias`
/// with the population variance.
pub fn layer_norm<T: Real>(
    x: ArrayView1<T>,
    gain: ArrayView1<T>,
    bias: ArrayView1<T>,
    eps: f64,
) -> Array1<T> {
    let (xhat, _) = standardize(x, eps);
    Zip::from(&xhat)
        .and(&gain)
        .and(&bias)
        .map_collect(|&h, &g, &b| g * h + b)
}

fn standardize<T: Real>(x: ArrayView1<T>, eps: f64) -> (Array1<T>, T) {
    let n = T::c(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::c(eps)).sqrt();
    (x.mapv(|v| (v - mean) * inv_std), inv_std)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

/// Row-wise layer norm over a `T × d` matrix.
pub fn layer_norm_rows<T: Real>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
    eps: f64,
) -> (Array2<T>, LayerNormCache<T>) {
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let (h, s) = standardize(row, eps);
        xhat.row_mut(i).assign(&h);
        inv_std[i] = s;
    }
    let mut y = xhat.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row)
            .and(gain)
            .and(bias)
            .for_each(|o, &g, &b| *o = g * *o + b);
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dX` and accumulates into the gain/bias gradients.
pub fn layer_norm_rows_backward<T: Real>(
    cache: &LayerNormCache<T>,
    d_out: &Array2<T>,
    gain: &Array1<T>,
    d_gain: &mut Array1<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    let d = T::c(gain.len() as f64);
    let mut dx = Array2::zeros(d_out.raw_dim());
    for i in 0..d_out.nrows() {
        let dy = d_out.row(i);
        let xhat = cache.xhat.row(i);
        Zip::from(&mut *d_gain)
            .and(&dy)
            .and(&xhat)
            .for_each(|dg, &g, &h| *dg += g * h);
        *d_bias += &dy;
        let dxhat = &dy * gain;
        let mean_dxhat = dxhat.sum() / d;
        let mean_dxhat_xhat = Zip::from(&dxhat).and(&xhat).fold(T::zero(), |acc, &a, &b| acc + a * b) / d;
        let s = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(&dxhat)
            .and(&xhat)
            .for_each(|o, &a, &h| *o = s * (a - mean_dxhat - h * mean_dxhat_xhat));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_maps_to_zero() {
        let y = layer_norm(array![5.0, 5.0, 5.0].view(), array![1.0, 1.0, 1.0].view(), array![0.0, 0.0, 0.0].view(), DEFAULT_LN_EPS);
        assert_eq!(y, array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalized_row_is_fixed_point() {
        let y = layer_norm(array![1.0, -1.0].view(), array![1.0, 1.0].view(), array![0.0, 0.0].view(), 0.0);
        assert_eq!(y, array![1.0, -1.0]);
    }

    #[test]
    fn random_rows_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((20, 16), |_| rng.random_range(-10.0..10.0f64));
        let (y, _) = layer_norm_rows(&x, &Array1::ones(16), &Array1::zeros(16), DEFAULT_LN_EPS);
        for row in y.axis_iter(Axis(0)) {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_match_vector_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0f64));
        let g = Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5f64));
        let b = Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5f64));
        let (y, _) = layer_norm_rows(&x, &g, &b, 1e-5);
        for i in 0..4 {
            let yi = layer_norm(x.row(i), g.view(), b.view(), 1e-5);
            for k in 0..6 {
                assert!((yi[k] - y[[i, k]]).abs() < 1e-14);
            }
        }
    }
}
