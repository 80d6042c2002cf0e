//! Small dense kernels shared by the embedding and transformer code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Real;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(GELU_CUBIC) * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Cached statistics from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise layer norm with affine parameters.
pub fn layer_norm<T: Real>(
    x: ArrayView2<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let (rows, d) = x.dim();
    let dn = T::of(d as f64);
    let mut normalized = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / dn;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + T::of(LN_EPS)).sqrt();
        inv_std[r] = is;
        for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
            *o = (*v - mean) * is;
        }
    }
    let out = &normalized * &gamma + &beta;
    (out, LayerNormCache { normalized, inv_std })
}

/// Backward of [`layer_norm`]: returns `dx` and accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward<T: Real>(
    dy: ArrayView2<T>,
    cache: &LayerNormCache<T>,
    gamma: ArrayView1<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array2<T> {
    let (rows, d) = dy.dim();
    let dn = T::of(d as f64);
    *dgamma += &(&dy * &cache.normalized).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros((rows, d));
    for r in 0..rows {
        let g = dxhat.row(r);
        let xh = cache.normalized.row(r);
        let mean_g = g.sum() / dn;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / dn;
        let is = cache.inv_std[r];
        for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = is * (*gv - mean_g - *xv * mean_gx);
        }
    }
    dx
}

/// Numerically stable log-softmax of a vector.
pub fn log_softmax<T: Real>(x: ArrayView1<T>) -> Array1<T> {
    let max = x.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
    let lse = x.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    x.mapv(|v| v - lse)
}
