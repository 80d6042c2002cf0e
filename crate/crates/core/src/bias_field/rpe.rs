//! Learned relative-position bias tables.

use ndarray::{s, Array3, Array4, ArrayView2};

use super::{BiasField, FieldKind};
use crate::error::{invalid, Result};
use crate::grid::PatchGrid;
use crate::rng;
use crate::scalar::Real;

/// Per-head biases indexed by `(i_y − j_y, i_x − j_x)`.
///
/// Shape `heads × (2·n_y − 1) × (2·n_x − 1)`; the zero displacement sits at
/// the center cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBiasTable<T> {
    values: Array3<T>,
}

impl<T: Real> RelativeBiasTable<T> {
    pub fn zeros(grid: PatchGrid, heads: usize) -> Self {
        Self { values: Array3::zeros((heads, 2 * grid.n_y() - 1, 2 * grid.n_x() - 1)) }
    }

    /// Both spatial extents must be odd.
    pub fn from_values(values: Array3<T>) -> Result<Self> {
        let (h, ey, ex) = values.dim();
        if h == 0 || ey % 2 == 0 || ex % 2 == 0 {
            return invalid(format!("relative bias table {:?} needs odd spatial extents", values.dim()));
        }
        Ok(Self { values })
    }

    pub fn heads(&self) -> usize {
        self.values.dim().0
    }

    /// `(2·n_y − 1, 2·n_x − 1)`.
    pub fn extent(&self) -> (usize, usize) {
        let (_, ey, ex) = self.values.dim();
        (ey, ex)
    }

    /// Largest grid whose displacements the table covers.
    pub fn max_grid(&self) -> PatchGrid {
        let (ey, ex) = self.extent();
        PatchGrid::new(ey.div_ceil(2), ex.div_ceil(2)).expect("extent is nonzero")
    }

    pub fn values(&self) -> &Array3<T> {
        &self.values
    }

    pub fn head(&self, h: usize) -> ArrayView2<'_, T> {
        self.values.slice(s![h, .., ..])
    }

    /// Bias for head `h` at displacement `(i_y − j_y, i_x − j_x)`.
    pub fn lookup(&self, h: usize, dy: isize, dx: isize) -> Result<T> {
        let (ey, ex) = self.extent();
        let (cy, cx) = ((ey / 2) as isize, (ex / 2) as isize);
        if h >= self.heads() || dy.abs() > cy || dx.abs() > cx {
            return invalid(format!("displacement ({dy}, {dx}) for head {h} is outside the table"));
        }
        Ok(self.values[[h, (dy + cy) as usize, (dx + cx) as usize]])
    }
}

/// Seeded `N(0, 0.02²)` table covering every displacement of `grid`.
pub fn init_rpe_table<T: Real>(grid: PatchGrid, heads: usize, seed: u64) -> Result<RelativeBiasTable<T>> {
    if heads == 0 {
        return invalid("heads must be positive");
    }
    let mut r = rng::seeded(seed);
    let values = rng::gaussian(&mut r, (heads, 2 * grid.n_y() - 1, 2 * grid.n_x() - 1), rng::INIT_STD);
    RelativeBiasTable::from_values(values)
}

/// Expand a table into a field, identical across `depth` layers.
pub fn rpe_to_field<T: Real>(table: &RelativeBiasTable<T>, grid: PatchGrid, depth: usize) -> Result<BiasField<T>> {
    let cover = table.max_grid();
    if grid.n_y() > cover.n_y() || grid.n_x() > cover.n_x() {
        return invalid(format!("table covering {cover} cannot serve grid {grid}"));
    }
    if depth == 0 {
        return invalid("depth must be positive");
    }
    let heads = table.heads();
    let t = grid.tokens();
    let mut values = Array4::<T>::zeros((depth, heads, t, t));
    for h in 0..heads {
        for (i, iy, ix) in grid.patches() {
            for (j, jy, jx) in grid.patches() {
                let b = table.lookup(h, iy as isize - jy as isize, ix as isize - jx as isize)?;
                for l in 0..depth {
                    values[[l, h, i, j]] = b;
                }
            }
        }
    }
    BiasField::from_values(grid, FieldKind::RpeLearn, values)
}
