//! Absolute position embeddings added to patch embeddings before the first
//! layer, and their resampling to a new grid.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::PatchGrid;
use crate::interp;
use crate::ops::gelu;
use crate::rng;
use crate::scalar::Real;

/// Base of the sinusoid frequency ladder.
pub const SINCOS_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFamily {
    Learned1d,
    Sincos2d,
    Factorized,
    Fourier,
}

/// Learnable per-axis tables of a factorized embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTables<T> {
    /// `n_y × D`.
    pub y: Array2<T>,
    /// `n_x × D`.
    pub x: Array2<T>,
}

/// An `n × D` table of position embeddings, row `k` for patch token `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    grid: PatchGrid,
    family: EmbeddingFamily,
    values: Array2<T>,
    axes: Option<AxisTables<T>>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(grid: PatchGrid, family: EmbeddingFamily, values: Array2<T>) -> Result<Self> {
        if values.nrows() != grid.n() || values.ncols() == 0 {
            return invalid(format!("{} rows for a grid with {} patches", values.nrows(), grid.n()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("position embeddings must be finite");
        }
        Ok(Self { grid, family, values, axes: None })
    }

    /// Factorized table from its axis tables.
    pub fn from_axes(grid: PatchGrid, axes: AxisTables<T>) -> Result<Self> {
        if axes.y.nrows() != grid.n_y() || axes.x.nrows() != grid.n_x() || axes.y.ncols() != axes.x.ncols() {
            return invalid("axis tables do not match the grid");
        }
        let d = axes.y.ncols();
        let mut values = Array2::zeros((grid.n(), d));
        for (i, y, x) in grid.patches() {
            let row = &axes.y.row(y - 1) + &axes.x.row(x - 1);
            values.row_mut(i - 1).assign(&row);
        }
        let mut t = Self::new(grid, EmbeddingFamily::Factorized, values)?;
        t.axes = Some(axes);
        Ok(t)
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn family(&self) -> EmbeddingFamily {
        self.family
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<T> {
        &mut self.values
    }

    pub fn axes(&self) -> Option<&AxisTables<T>> {
        self.axes.as_ref()
    }
}

/// Fixed 2D sinusoidal table: the first `D/2` channels encode `i_y`, the
/// last `D/2` encode `i_x`. Each half is `[sin(p·ω_k)…, cos(p·ω_k)…]` with
/// `ω_k = 10000^(−k/(D/4))` and 0-based position `p`.
pub fn sincos_2d<T: Real>(grid: PatchGrid, d: usize) -> Result<EmbeddingTable<T>> {
    if d == 0 || d % 4 != 0 {
        return invalid(format!("sincos width must be a positive multiple of 4, got {d}"));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| SINCOS_BASE.powf(-(k as f64) / quarter as f64)).collect();
    let mut values = Array2::zeros((grid.n(), d));
    for (i, y, x) in grid.patches() {
        let mut row = values.row_mut(i - 1);
        for (block, pos) in [(0, (y - 1) as f64), (d / 2, (x - 1) as f64)] {
            for (k, w) in omega.iter().enumerate() {
                row[block + k] = T::of((pos * w).sin());
                row[block + quarter + k] = T::of((pos * w).cos());
            }
        }
    }
    EmbeddingTable::new(grid, EmbeddingFamily::Sincos2d, values)
}

/// Seeded `N(0, 0.02²)` table, one row per patch.
pub fn learned_1d_init<T: Real>(grid: PatchGrid, d: usize, seed: u64) -> Result<EmbeddingTable<T>> {
    if d == 0 {
        return invalid("embedding width must be positive");
    }
    let mut r = rng::seeded(seed);
    EmbeddingTable::new(grid, EmbeddingFamily::Learned1d, rng::gaussian(&mut r, (grid.n(), d), rng::INIT_STD))
}

/// Seeded factorized table: row `(y, x)` is `Y[y] + X[x]`.
pub fn factorized_init<T: Real>(grid: PatchGrid, d: usize, seed: u64) -> Result<EmbeddingTable<T>> {
    if d == 0 {
        return invalid("embedding width must be positive");
    }
    let mut r = rng::seeded(seed);
    let y = rng::gaussian(&mut r, (grid.n_y(), d), rng::INIT_STD);
    let x = rng::gaussian(&mut r, (grid.n_x(), d), rng::INIT_STD);
    EmbeddingTable::from_axes(grid, AxisTables { y, x })
}

/// Shape of a Fourier-feature embedding network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    /// Number of random frequencies; the feature vector has twice as many entries.
    pub features: usize,
    pub hidden: usize,
    /// Standard deviation of the random frequencies.
    pub sigma: f64,
}

impl FourierConfig {
    /// `D/2` frequencies (at least one), hidden width `D`, `σ = 1`.
    pub fn for_width(d: usize) -> Self {
        Self { features: (d / 2).max(1), hidden: d, sigma: 1.0 }
    }
}

/// Fourier features of fractional coordinates followed by a one-hidden-layer
/// GELU MLP.
///
/// The input for patch `(i_y, i_x)` is `(i_y/n_y, i_x/n_x)`, so the same
/// parameters evaluate on any grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEmbedding<T> {
    /// `F × 2` frequency matrix.
    pub frequencies: Array2<T>,
    /// `2F × hidden`.
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// `hidden × D`.
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> FourierEmbedding<T> {
    pub fn init(d: usize, cfg: FourierConfig, seed: u64) -> Result<Self> {
        if d == 0 || cfg.hidden == 0 || cfg.features == 0 {
            return invalid("Fourier embedding needs positive width, hidden width and feature count");
        }
        if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
            return invalid("Fourier bandwidth must be positive");
        }
        let mut r = rng::seeded(seed);
        let f = cfg.features;
        Ok(Self {
            frequencies: rng::gaussian(&mut r, (f, 2), cfg.sigma),
            w1: rng::gaussian(&mut r, (2 * f, cfg.hidden), (1.0 / (2 * f) as f64).sqrt()),
            b1: Array1::zeros(cfg.hidden),
            w2: rng::gaussian(&mut r, (cfg.hidden, d), (1.0 / cfg.hidden as f64).sqrt() * rng::INIT_STD),
            b2: Array1::zeros(d),
        })
    }

    pub fn width(&self) -> usize {
        self.w2.ncols()
    }

    /// Embed a single fractional coordinate `(u, v)`.
    pub fn embed_point(&self, u: f64, v: f64) -> Array1<T> {
        let f = self.frequencies.nrows();
        let mut feats = Array1::zeros(2 * f);
        for k in 0..f {
            let phase = 2.0 * PI * (self.frequencies[[k, 0]].f64() * u + self.frequencies[[k, 1]].f64() * v);
            feats[k] = T::of(phase.sin());
            feats[f + k] = T::of(phase.cos());
        }
        let hidden = (feats.dot(&self.w1) + &self.b1).mapv(gelu);
        hidden.dot(&self.w2) + &self.b2
    }

    pub fn evaluate(&self, grid: PatchGrid) -> Result<EmbeddingTable<T>> {
        let mut values = Array2::zeros((grid.n(), self.width()));
        for (i, y, x) in grid.patches() {
            let (u, v) = (y as f64 / grid.n_y() as f64, x as f64 / grid.n_x() as f64);
            values.row_mut(i - 1).assign(&self.embed_point(u, v));
        }
        EmbeddingTable::new(grid, EmbeddingFamily::Fourier, values)
    }
}

/// Seeded Fourier embedding evaluated on `grid`.
pub fn fourier_embed<T: Real>(grid: PatchGrid, d: usize, hidden: usize, seed: u64) -> Result<EmbeddingTable<T>> {
    let cfg = FourierConfig { hidden, ..FourierConfig::for_width(d) };
    FourierEmbedding::init(d, cfg, seed)?.evaluate(grid)
}

/// Bilinear (align-corners) resampling of a learned-1D or sincos table.
pub fn resize_bilinear<T: Real>(table: &EmbeddingTable<T>, new_grid: PatchGrid) -> Result<EmbeddingTable<T>> {
    match table.family {
        EmbeddingFamily::Learned1d | EmbeddingFamily::Sincos2d => {}
        other => return invalid(format!("bilinear resize does not apply to {other:?} embeddings")),
    }
    let g = table.grid;
    let d = table.width();
    let cube = table
        .values
        .view()
        .into_shape_with_order((g.n_y(), g.n_x(), d))
        .map_err(|e| crate::Error::Internal(e.to_string()))?;
    let out = interp::bilinear(cube, new_grid.n_y(), new_grid.n_x());
    let values = out
        .into_shape_with_order((new_grid.n(), d))
        .map_err(|e| crate::Error::Internal(e.to_string()))?;
    EmbeddingTable::new(new_grid, table.family, values)
}

/// Per-axis linear resampling of a factorized table, then re-summation.
pub fn resize_factorized<T: Real>(table: &EmbeddingTable<T>, new_grid: PatchGrid) -> Result<EmbeddingTable<T>> {
    let Some(axes) = table.axes.as_ref().filter(|_| table.family == EmbeddingFamily::Factorized) else {
        return invalid(format!("per-axis resize needs a factorized table, got {:?}", table.family));
    };
    let resampled = AxisTables {
        y: interp::linear(axes.y.view(), new_grid.n_y()),
        x: interp::linear(axes.x.view(), new_grid.n_x()),
    };
    EmbeddingTable::from_axes(new_grid, resampled)
}
