//! Axial 2D rotary position embedding.
//!
//! Channel pairs `(2p, 2p+1)` of a query or key are rotated by an angle that
//! depends on the token's lattice position. The first `D_H/4` pairs use the
//! 0-based row `i_y − 1`, the remaining pairs the column `i_x − 1`; within an
//! axis, pair `t` has frequency `base^(−4t/D_H)`. The CLS token is never
//! rotated.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{PatchGrid, CLS_INDEX};
use crate::scalar::Real;

/// Default base frequency at the training resolution.
pub const DEFAULT_BASE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    pub head_dim: usize,
    pub base_freq: f64,
    pub grid: PatchGrid,
}

impl RotaryConfig {
    pub fn new(head_dim: usize, base_freq: f64, grid: PatchGrid) -> Result<Self> {
        let cfg = Self { head_dim, base_freq, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return invalid(format!("rotary head_dim must be a positive multiple of 4, got {}", self.head_dim));
        }
        if !(self.base_freq > 0.0 && self.base_freq.is_finite()) {
            return invalid(format!("rotary base frequency must be positive, got {}", self.base_freq));
        }
        Ok(())
    }

    /// Same configuration with a new base frequency.
    pub fn retune_base(&self, new_base: f64) -> Result<Self> {
        Self::new(self.head_dim, new_base, self.grid)
    }

    /// Same configuration on another grid.
    pub fn with_grid(&self, grid: PatchGrid) -> Self {
        Self { grid, ..*self }
    }

    /// Per-axis pair frequencies `base^(−4t/D_H)`, `t = 0..D_H/4`.
    pub fn frequencies(&self) -> Vec<f64> {
        let quarter = self.head_dim / 4;
        (0..quarter)
            .map(|t| self.base_freq.powf(-4.0 * t as f64 / self.head_dim as f64))
            .collect()
    }
}

/// Rotation angles, `n × D_H/2`: row `k` is patch token `k + 1`.
pub fn rotary_angles(cfg: &RotaryConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let freqs = cfg.frequencies();
    let quarter = freqs.len();
    let mut angles = Array2::zeros((cfg.grid.n(), 2 * quarter));
    for (i, y, x) in cfg.grid.patches() {
        for (t, f) in freqs.iter().enumerate() {
            angles[[i - 1, t]] = (y - 1) as f64 * f;
            angles[[i - 1, quarter + t]] = (x - 1) as f64 * f;
        }
    }
    Ok(angles)
}

#[inline]
fn rotate_pairs<T: Real>(v: ArrayView1<T>, cos: ArrayView1<T>, sin: ArrayView1<T>, out: &mut [T]) {
    for p in 0..cos.len() {
        let (a, b) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = a * cos[p] - b * sin[p];
        out[2 * p + 1] = a * sin[p] + b * cos[p];
    }
}

/// Rotate a single `D_H` vector for token `token` (CLS is returned unchanged).
pub fn apply_rotary<T: Real>(v: ArrayView1<T>, token: usize, cfg: &RotaryConfig) -> Result<Array1<T>> {
    if v.len() != cfg.head_dim {
        return invalid(format!("vector of length {} for head_dim {}", v.len(), cfg.head_dim));
    }
    if token == CLS_INDEX {
        return Ok(v.to_owned());
    }
    cfg.grid.coords(token)?;
    let angles = rotary_angles(cfg)?;
    let row = angles.row(token - 1);
    let cos = row.mapv(|a| T::of(a.cos()));
    let sin = row.mapv(|a| T::of(a.sin()));
    let mut out = Array1::zeros(v.len());
    rotate_pairs(v, cos.view(), sin.view(), out.as_slice_mut().expect("fresh array is contiguous"));
    Ok(out)
}

/// Precomputed `cos`/`sin` tables over all tokens (CLS row is the identity).
#[derive(Clone, Debug)]
pub struct Rotary<T> {
    cfg: RotaryConfig,
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Real> Rotary<T> {
    pub fn new(cfg: RotaryConfig) -> Result<Self> {
        let angles = rotary_angles(&cfg)?;
        let pairs = cfg.head_dim / 2;
        let mut cos = Array2::ones((cfg.grid.tokens(), pairs));
        let mut sin = Array2::zeros((cfg.grid.tokens(), pairs));
        for k in 0..cfg.grid.n() {
            for p in 0..pairs {
                cos[[k + 1, p]] = T::of(angles[[k, p]].cos());
                sin[[k + 1, p]] = T::of(angles[[k, p]].sin());
            }
        }
        Ok(Self { cfg, cos, sin })
    }

    pub fn config(&self) -> &RotaryConfig {
        &self.cfg
    }

    pub fn tokens(&self) -> usize {
        self.cos.nrows()
    }

    /// Rotate every row of a `T × D_H` matrix.
    pub fn rotate(&self, x: ArrayView2<T>) -> Array2<T> {
        self.rotate_signed(x, false)
    }

    /// Apply the inverse (transpose) rotation; this is the backward map.
    pub fn rotate_inverse(&self, x: ArrayView2<T>) -> Array2<T> {
        self.rotate_signed(x, true)
    }

    fn rotate_signed(&self, x: ArrayView2<T>, inverse: bool) -> Array2<T> {
        let mut out = Array2::zeros(x.raw_dim());
        for (r, mut o) in out.rows_mut().into_iter().enumerate() {
            let sin = if inverse { self.sin.row(r).mapv(|s| -s) } else { self.sin.row(r).to_owned() };
            rotate_pairs(
                x.row(r),
                self.cos.row(r),
                sin.view(),
                o.as_slice_mut().expect("fresh array is contiguous"),
            );
        }
        out
    }
}
