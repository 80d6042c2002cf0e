//! Patch-lattice geometry.
//!
//! Token index 0 is the CLS token. Patch tokens occupy `1..=n` in row-major
//! order (y outer, x inner) and carry 1-based lattice coordinates
//! `(i_y, i_x)`. The y axis grows downward, as in image space.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Token index reserved for the CLS token.
pub const CLS_INDEX: usize = 0;

/// An `n_y × n_x` patch lattice plus a CLS slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    n_y: usize,
    n_x: usize,
}

impl PatchGrid {
    pub fn new(n_y: usize, n_x: usize) -> Result<Self> {
        if n_y == 0 || n_x == 0 {
            return invalid(format!("grid dimensions must be positive, got {n_y}x{n_x}"));
        }
        Ok(Self { n_y, n_x })
    }

    /// Square grid of side `n`.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Number of patches (CLS excluded).
    pub fn n(&self) -> usize {
        self.n_y * self.n_x
    }

    /// Number of tokens including CLS.
    pub fn tokens(&self) -> usize {
        self.n() + 1
    }

    /// Token index of the patch at 1-based `(i_y, i_x)`.
    pub fn index(&self, i_y: usize, i_x: usize) -> Result<usize> {
        if !(1..=self.n_y).contains(&i_y) || !(1..=self.n_x).contains(&i_x) {
            return invalid(format!(
                "coordinates ({i_y}, {i_x}) outside {}x{} grid",
                self.n_y, self.n_x
            ));
        }
        Ok((i_y - 1) * self.n_x + i_x)
    }

    /// 1-based lattice coordinates of patch token `i`.
    pub fn coords(&self, i: usize) -> Result<(usize, usize)> {
        if i == CLS_INDEX {
            return invalid("the CLS token has no lattice position");
        }
        if i > self.n() {
            return invalid(format!("token {i} outside grid with {} patches", self.n()));
        }
        Ok(self.coords_unchecked(i))
    }

    #[inline]
    pub(crate) fn coords_unchecked(&self, i: usize) -> (usize, usize) {
        let k = i - 1;
        (k / self.n_x + 1, k % self.n_x + 1)
    }

    /// Iterator over `(token, i_y, i_x)` for every patch.
    pub fn patches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (1..=self.n()).map(move |i| {
            let (y, x) = self.coords_unchecked(i);
            (i, y, x)
        })
    }

    /// Displacement `(j_y - i_y, j_x - i_x)` from query `i` to key `j`.
    pub fn displacement(&self, i: usize, j: usize) -> Result<(isize, isize)> {
        let (iy, ix) = self.coords(i)?;
        let (jy, jx) = self.coords(j)?;
        Ok((jy as isize - iy as isize, jx as isize - ix as isize))
    }

    /// Euclidean distance between patches `i` and `j`, in patch units.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let (dy, dx) = self.displacement(i, j)?;
        Ok(euclidean(dy, dx))
    }

    /// Largest distance realizable on the grid.
    pub fn diameter(&self) -> f64 {
        euclidean(self.n_y as isize - 1, self.n_x as isize - 1)
    }

    /// Token index of the patch nearest the grid center (upper-left on ties).
    pub fn center(&self) -> usize {
        (self.n_y - 1) / 2 * self.n_x + (self.n_x - 1) / 2 + 1
    }
}

impl std::fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.n_y, self.n_x)
    }
}

impl std::str::FromStr for PatchGrid {
    type Err = crate::Error;

    /// Parses `"NyxNx"`, e.g. `"14x14"`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| crate::Error::InvalidArgument(format!("bad grid `{s}`, expected NyxNx")))
        };
        match s.split_once(['x', 'X']) {
            Some((y, x)) => Self::new(parse(y)?, parse(x)?),
            None => invalid(format!("bad grid `{s}`, expected NyxNx")),
        }
    }
}

#[inline]
pub(crate) fn euclidean(dy: isize, dx: isize) -> f64 {
    ((dy * dy + dx * dx) as f64).sqrt()
}

/// Transformer dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub head_dim: usize,
    pub patch_size: usize,
}

impl ModelDims {
    /// Dimensions with `head_dim = width / heads`.
    pub fn new(depth: usize, heads: usize, width: usize, patch_size: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return invalid(format!("width {width} is not divisible by {heads} heads"));
        }
        let dims = Self { depth, heads, width, head_dim: width / heads, patch_size };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.head_dim == 0 || self.patch_size == 0 {
            return invalid(format!("model dimensions must be positive: {self:?}"));
        }
        if self.width != self.heads * self.head_dim {
            return invalid(format!(
                "width {} != heads {} * head_dim {}",
                self.width, self.heads, self.head_dim
            ));
        }
        Ok(())
    }

    /// ViT-B/16.
    pub fn vit_base() -> Self {
        Self { depth: 12, heads: 12, width: 768, head_dim: 64, patch_size: 16 }
    }
}

/// Split a `Y × X × C` image into non-overlapping `P × P` patches.
///
/// Row `k` of the result is patch token `k + 1`; within a patch, values are
/// ordered `(row, column, channel)`.
pub fn patchify<T: Real>(image: ArrayView3<T>, patch: usize) -> Result<(Array2<T>, PatchGrid)> {
    let (h, w, c) = image.dim();
    if patch == 0 {
        return invalid("patch size must be positive");
    }
    if h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return invalid(format!("image {h}x{w} is not divisible into {patch}px patches"));
    }
    let grid = PatchGrid::new(h / patch, w / patch)?;
    let mut out = Array2::zeros((grid.n(), patch * patch * c));
    for (i, y, x) in grid.patches() {
        let block = image.slice(s![(y - 1) * patch..y * patch, (x - 1) * patch..x * patch, ..]);
        for (dst, src) in out.row_mut(i - 1).iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    patches: ArrayView2<T>,
    grid: PatchGrid,
    patch: usize,
    channels: usize,
) -> Result<Array3<T>> {
    if patches.dim() != (grid.n(), patch * patch * channels) {
        return invalid(format!(
            "patch array {:?} does not match grid {grid} with {patch}px patches and {channels} channels",
            patches.dim()
        ));
    }
    let mut image = Array3::zeros((grid.n_y() * patch, grid.n_x() * patch, channels));
    for (i, y, x) in grid.patches() {
        let mut block = image.slice_mut(s![(y - 1) * patch..y * patch, (x - 1) * patch..x * patch, ..]);
        for (dst, src) in block.iter_mut().zip(patches.row(i - 1).iter()) {
            *dst = *src;
        }
    }
    Ok(image)
}
