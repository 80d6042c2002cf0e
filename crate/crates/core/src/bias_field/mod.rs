//! Additive attention bias tensors: LookHere masks and penalties, 2D-ALiBi,
//! and relative-position bias tables.
//!
//! A [`BiasField`] stores values that are *subtracted* from attention logits.
//! Masked entries hold `+∞`; the attention module excludes them from the
//! softmax. The CLS row and column are zero in every layer and head.

mod config;
mod heads;
mod rpe;

pub use config::{DistanceExponent, MaskMode, PenaltyConfig, SlopeConfig};
pub use heads::{replace_undirected, Direction, Fov, HeadSpec, LookHereVariant, Wedge, WedgeHalf};
pub use rpe::{init_rpe_table, rpe_to_field, RelativeBiasTable};

use ndarray::{s, Array2, Array4, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{euclidean, ModelDims, PatchGrid};
use crate::scalar::Real;

/// Which construction produced a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    LookHere,
    Alibi2d,
    RpeLearn,
    /// Read back from a file without provenance.
    Loaded,
}

/// Fixed bias tensor of shape `depth × heads × (n+1) × (n+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField<T> {
    grid: PatchGrid,
    kind: FieldKind,
    values: Array4<T>,
}

impl<T: Real> BiasField<T> {
    /// Wrap raw values; shape must be `(L, H, n+1, n+1)` for `grid`.
    pub fn from_values(grid: PatchGrid, kind: FieldKind, values: Array4<T>) -> Result<Self> {
        let (l, h, t, t2) = values.dim();
        if t != grid.tokens() || t2 != grid.tokens() || l == 0 || h == 0 {
            return invalid(format!("bias values {:?} do not fit grid {grid}", values.dim()));
        }
        Ok(Self { grid, kind, values })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.values.dim().0
    }

    pub fn heads(&self) -> usize {
        self.values.dim().1
    }

    pub fn tokens(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array4<T> {
        &self.values
    }

    pub fn into_values(self) -> Array4<T> {
        self.values
    }

    /// Learned relative biases may be negative; every other field is nonnegative.
    pub fn allows_negative(&self) -> bool {
        self.kind == FieldKind::RpeLearn || self.kind == FieldKind::Loaded
    }

    #[inline]
    pub fn get(&self, l: usize, h: usize, i: usize, j: usize) -> T {
        self.values[[l, h, i, j]]
    }

    #[inline]
    pub fn is_masked(&self, l: usize, h: usize, i: usize, j: usize) -> bool {
        self.values[[l, h, i, j]] == T::infinity()
    }

    /// `H × T × T` slice for layer `l`.
    pub fn layer(&self, l: usize) -> ArrayView3<'_, T> {
        self.values.slice(s![l, .., .., ..])
    }

    /// `T × T` slice for layer `l`, head `h`.
    pub fn head(&self, l: usize, h: usize) -> ArrayView2<'_, T> {
        self.values.slice(s![l, h, .., ..])
    }

    /// Fraction of patch-pair entries (CLS excluded) holding the mask sentinel.
    pub fn masked_fraction(&self, l: usize, h: usize) -> Result<f64> {
        if l >= self.depth() || h >= self.heads() {
            return invalid(format!("slice ({l}, {h}) out of range"));
        }
        let slice = self.head(l, h);
        let masked = slice.slice(s![1.., 1..]).iter().filter(|v| **v == T::infinity()).count();
        Ok(masked as f64 / (self.grid.n() * self.grid.n()) as f64)
    }

    /// Check the structural invariants: finite diagonal, zero CLS row and
    /// column, and nonnegative finite entries where required.
    pub fn check_invariants(&self) -> Result<()> {
        let t = self.tokens();
        for l in 0..self.depth() {
            for h in 0..self.heads() {
                let slice = self.head(l, h);
                for i in 0..t {
                    if !slice[[i, i]].is_finite() {
                        return invalid(format!("diagonal entry ({l},{h},{i}) is masked"));
                    }
                    if slice[[0, i]] != T::zero() || slice[[i, 0]] != T::zero() {
                        return invalid(format!("CLS entry nonzero at ({l},{h},{i})"));
                    }
                }
                if slice.iter().any(|v| v.is_nan()) {
                    return invalid(format!("NaN in slice ({l},{h})"));
                }
                if !self.allows_negative() && slice.iter().any(|v| *v < T::zero()) {
                    return invalid(format!("negative entry in slice ({l},{h})"));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BiasField<U> {
        BiasField {
            grid: self.grid,
            kind: self.kind,
            values: self.values.mapv(|v| U::of(v.f64())),
        }
    }
}

/// Table of values indexed by displacement, offset so `(0, 0)` is the center.
struct DisplacementTable {
    ny: usize,
    nx: usize,
    values: Array2<f64>,
}

impl DisplacementTable {
    fn build(grid: PatchGrid, mut f: impl FnMut(isize, isize) -> f64) -> Self {
        let (ny, nx) = (grid.n_y(), grid.n_x());
        let values = Array2::from_shape_fn((2 * ny - 1, 2 * nx - 1), |(a, b)| {
            f(a as isize - (ny as isize - 1), b as isize - (nx as isize - 1))
        });
        Self { ny, nx, values }
    }

    /// Values for keys `(ky, 1..=n_x)` seen from query `(qy, qx)`, in key order.
    #[inline]
    fn key_row(&self, qy: usize, qx: usize, ky: usize) -> ArrayView1<'_, f64> {
        let a = ky + self.ny - 1 - qy;
        let b = self.nx - qx;
        self.values.slice(s![a, b..b + self.nx])
    }
}

/// Fill a field by evaluating, per `(l, h)`, a function of displacement.
fn fill_by_displacement<T: Real>(
    grid: PatchGrid,
    depth: usize,
    heads: usize,
    kind: FieldKind,
    mut table_for: impl FnMut(usize, usize) -> Result<DisplacementTable>,
) -> Result<BiasField<T>> {
    let t = grid.tokens();
    let mut values = Array4::<T>::zeros((depth, heads, t, t));
    let nx = grid.n_x();
    for l in 0..depth {
        for h in 0..heads {
            let table = table_for(l, h)?;
            let mut slice = values.slice_mut(s![l, h, .., ..]);
            for (qi, qy, qx) in grid.patches() {
                let mut row = slice.row_mut(qi);
                for ky in 1..=grid.n_y() {
                    let start = (ky - 1) * nx + 1;
                    let src = table.key_row(qy, qx, ky);
                    for (dst, &v) in row.slice_mut(s![start..start + nx]).iter_mut().zip(src) {
                        *dst = T::of(v);
                    }
                }
            }
        }
    }
    BiasField::from_values(grid, kind, values)
}

/// Build the LookHere field.
///
/// For patch pair `(i, j)` in head `h` of layer `l`: if `j` is visible to
/// `i`, the entry is `m(l, h) · Distance(i, j)^p` (subject to the ablation
/// switches in `penalty`); otherwise it is the mask value.
pub fn build_lookhere<T: Real>(
    grid: PatchGrid,
    dims: &ModelDims,
    specs: &[HeadSpec],
    slopes: &SlopeConfig,
    penalty: &PenaltyConfig,
) -> Result<BiasField<T>> {
    if specs.len() != dims.heads {
        return invalid(format!("{} head specs for {} heads", specs.len(), dims.heads));
    }
    if dims.depth == 0 {
        return invalid("depth must be positive");
    }
    slopes.validate()?;
    let masked = penalty.masked_value();
    fill_by_displacement(grid, dims.depth, dims.heads, FieldKind::LookHere, |l, h| {
        let m = slopes.slope(l, h, dims.depth, specs)?;
        let spec = specs[h];
        Ok(DisplacementTable::build(grid, |dy, dx| {
            if spec.visible((dy, dx)) {
                penalty.penalty(m, euclidean(dy, dx), spec.is_directed())
            } else {
                masked
            }
        }))
    })
}

/// Build a 2D-ALiBi field: `s_g · slope_h · Distance(i, j)`, same in every layer.
pub fn build_alibi_2d<T: Real>(
    grid: PatchGrid,
    dims: &ModelDims,
    head_slopes: &[f64],
    s_g: f64,
) -> Result<BiasField<T>> {
    if head_slopes.len() != dims.heads {
        return invalid(format!("{} slopes for {} heads", head_slopes.len(), dims.heads));
    }
    if let Some(bad) = head_slopes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return invalid(format!("ALiBi slopes must be positive, got {bad}"));
    }
    if !(s_g > 0.0 && s_g.is_finite()) {
        return invalid(format!("global slope must be positive, got {s_g}"));
    }
    fill_by_displacement(grid, dims.depth, dims.heads, FieldKind::Alibi2d, |_, h| {
        let m = s_g * head_slopes[h];
        Ok(DisplacementTable::build(grid, |dy, dx| m * euclidean(dy, dx)))
    })
}

/// Geometric ALiBi slopes `2^(-8k/H)`, `k = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|k| 2f64.powf(-8.0 * k as f64 / heads as f64)).collect()
}

/// Visible fraction (self included) of one query's row for a single head.
///
/// Evaluated directly from the predicate, so it works on grids far too
/// large to materialize a field for.
pub fn query_visible_fraction(grid: PatchGrid, spec: &HeadSpec, query: usize) -> Result<f64> {
    let (qy, qx) = grid.coords(query)?;
    let visible = grid
        .patches()
        .filter(|&(_, y, x)| spec.visible((y as isize - qy as isize, x as isize - qx as isize)))
        .count();
    Ok(visible as f64 / grid.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(depth: usize, heads: usize) -> ModelDims {
        ModelDims { depth, heads, width: heads * 4, head_dim: 4, patch_size: 16 }
    }

    #[test]
    fn directed_visible_entry_is_slope_times_distance() {
        let g = PatchGrid::new(6, 6).unwrap();
        let specs = LookHereVariant::Lh90.head_specs(12);
        let f: BiasField<f64> =
            build_lookhere(g, &dims(12, 12), &specs, &SlopeConfig::default(), &PenaltyConfig::default()).unwrap();
        // head 0 looks up; (5,2) -> (1,5) is displacement (-4, 3), distance 5
        let i = g.index(5, 2).unwrap();
        let j = g.index(1, 5).unwrap();
        assert_eq!(f.get(0, 0, i, j), 7.5);
        assert!(f.is_masked(0, 0, j, i));
        f.check_invariants().unwrap();
    }

    #[test]
    fn mask_zero_has_no_sentinel() {
        let g = PatchGrid::new(5, 7).unwrap();
        let specs = LookHereVariant::Lh45.head_specs(12);
        let penalty = PenaltyConfig { mask_mode: MaskMode::Zero, ..Default::default() };
        let f: BiasField<f32> = build_lookhere(g, &dims(2, 12), &specs, &SlopeConfig::default(), &penalty).unwrap();
        assert!(f.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spec_count_must_match_heads() {
        let g = PatchGrid::new(3, 3).unwrap();
        let specs = LookHereVariant::Lh90.head_specs(8);
        let r: Result<BiasField<f64>> =
            build_lookhere(g, &dims(2, 12), &specs, &SlopeConfig::default(), &PenaltyConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn alibi_examples() {
        let g = PatchGrid::new(4, 4).unwrap();
        let d = dims(2, 2);
        let f: BiasField<f64> = build_alibi_2d(g, &d, &[0.5, 0.25], 1.0).unwrap();
        let i = g.index(1, 1).unwrap();
        let j = g.index(1, 3).unwrap();
        assert_eq!(f.get(0, 0, i, j), 1.0);
        assert_eq!(f.get(1, 0, i, j), 1.0);

        let tuned: BiasField<f64> = build_alibi_2d(g, &d, &[0.5, 0.25], 1.6).unwrap();
        for (a, b) in f.values().iter().zip(tuned.values()) {
            assert!((*b - 1.6 * *a).abs() <= 1e-12 * b.abs().max(1.0));
        }

        assert!(build_alibi_2d::<f64>(g, &d, &[0.5, 0.0], 1.0).is_err());
        assert!(build_alibi_2d::<f64>(g, &d, &[0.5], 1.0).is_err());
    }

    #[test]
    fn equal_alibi_slopes_are_head_permutation_invariant() {
        let g = PatchGrid::new(3, 4).unwrap();
        let f: BiasField<f64> = build_alibi_2d(g, &dims(1, 3), &[0.3; 3], 1.0).unwrap();
        assert_eq!(f.head(0, 0), f.head(0, 2));
        assert_eq!(f.head(0, 1), f.head(0, 2));
    }

    #[test]
    fn masked_fraction_examples() {
        let g = PatchGrid::new(9, 9).unwrap();
        let specs = LookHereVariant::Lh90.head_specs(12);
        let f: BiasField<f32> =
            build_lookhere(g, &dims(1, 12), &specs, &SlopeConfig::default(), &PenaltyConfig::default()).unwrap();
        assert_eq!(f.masked_fraction(0, 11).unwrap(), 0.0);
        assert!(f.masked_fraction(0, 0).unwrap() > 0.5);
        assert!(f.masked_fraction(1, 0).is_err());
    }

    #[test]
    fn lh45_central_query_sees_about_an_eighth() {
        let g = PatchGrid::new(101, 101).unwrap();
        let specs = LookHereVariant::Lh45.head_specs(8);
        for s in &specs {
            let frac = query_visible_fraction(g, s, g.center()).unwrap();
            assert!((0.115..=0.135).contains(&frac), "{} {frac}", s.label());
        }
    }

    #[test]
    fn alibi_slopes_geometric() {
        let s = alibi_slopes(8);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[7], 2f64.powi(-8));
    }
}
