//! Align-corners linear and bilinear resampling.
//!
//! Interpolation uses the `a + f·(b − a)` form, so constant inputs come back
//! exactly and resampling to the source size is the identity.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::scalar::Real;

/// For each destination index: `(lower, upper, fraction)` source taps.
pub(crate) fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    a + f * (b - a)
}

/// Resample rows of an `N × C` array to `dst` rows.
pub fn linear<T: Real>(src: ArrayView2<T>, dst: usize) -> Array2<T> {
    let (n, c) = src.dim();
    let taps = taps(n, dst);
    Array2::from_shape_fn((dst, c), |(i, k)| {
        let (lo, hi, f) = taps[i];
        lerp(src[[lo, k]], src[[hi, k]], T::of(f))
    })
}

/// Resample a `Y × X × C` array to `dst_y × dst_x × C`.
pub fn bilinear<T: Real>(src: ArrayView3<T>, dst_y: usize, dst_x: usize) -> Array3<T> {
    let (ny, nx, c) = src.dim();
    let ty = taps(ny, dst_y);
    let tx = taps(nx, dst_x);
    Array3::from_shape_fn((dst_y, dst_x, c), |(y, x, k)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let fx = T::of(fx);
        let top = lerp(src[[y0, x0, k]], src[[y0, x1, k]], fx);
        let bottom = lerp(src[[y1, x0, k]], src[[y1, x1, k]], fx);
        lerp(top, bottom, T::of(fy))
    })
}
