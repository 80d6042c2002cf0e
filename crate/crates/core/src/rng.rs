//! Seeded random initialization.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Real;

pub type Rng = ChaCha8Rng;

/// Standard deviation of learnable position tables at initialization.
pub const INIT_STD: f64 = 0.02;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Array of i.i.d. `N(0, std²)` draws, filled in logical order.
pub fn gaussian<T: Real, Sh: ShapeBuilder>(rng: &mut Rng, shape: Sh, std: f64) -> Array<T, Sh::Dim>
where
    Sh::Dim: Dimension,
{
    let normal = Normal::new(0.0, std).expect("standard deviation is finite and nonnegative");
    Array::from_shape_simple_fn(shape, || T::of(normal.sample(rng)))
}
