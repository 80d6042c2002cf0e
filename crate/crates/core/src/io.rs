//! File formats: the LHBF binary container, per-head CSV dumps and 8-bit PGM renders.
//!
//! LHBF layout (all integers and floats little-endian):
//!
//! ```text
//! magic    b"LHBF"
//! version  u16   1 for a bias field; 0x8001 for an embedding table
//! L H T    u32×3
//! n_y n_x  u32×2
//! -- embedding payloads only --
//! D        u32   embedding width
//! family   u32   0 learned_1d, 1 sincos_2d, 2 factorized, 3 fourier
//! -- then --
//! values   f32   L·H·T·T (field) or T·D (embedding, T = n, L = H = 1), row-major
//! ```
//!
//! Masked bias entries are stored as `+∞`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView2};

use crate::bias_field::{BiasField, FieldKind};
use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::pos_embed::{EmbeddingFamily, EmbeddingTable};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"LHBF";
pub const VERSION_FIELD: u16 = 1;
/// High bit marks an embedding payload.
pub const EMBEDDING_FLAG: u16 = 0x8000;
pub const VERSION_EMBEDDING: u16 = EMBEDDING_FLAG | 1;

/// Contents of an LHBF file.
#[derive(Clone, Debug, PartialEq)]
pub enum Lhbf {
    Field(BiasField<f32>),
    Embedding(EmbeddingTable<f32>),
}

fn family_code(f: EmbeddingFamily) -> u32 {
    match f {
        EmbeddingFamily::Learned1d => 0,
        EmbeddingFamily::Sincos2d => 1,
        EmbeddingFamily::Factorized => 2,
        EmbeddingFamily::Fourier => 3,
    }
}

fn family_from_code(c: u32) -> Result<EmbeddingFamily> {
    Ok(match c {
        0 => EmbeddingFamily::Learned1d,
        1 => EmbeddingFamily::Sincos2d,
        2 => EmbeddingFamily::Factorized,
        3 => EmbeddingFamily::Fourier,
        _ => return Err(Error::Format(format!("unknown embedding family code {c}"))),
    })
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} does not fit in u32")))
}

fn header(version: u16, dims: [usize; 5]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(26);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    for (v, name) in dims.into_iter().zip(["L", "H", "T", "n_y", "n_x"]) {
        out.extend_from_slice(&u32_of(v, name)?.to_le_bytes());
    }
    Ok(out)
}

fn push_f32s<'a, T: Real>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a T>) {
    for v in values {
        let x = v.to_f32().unwrap_or(f32::NAN);
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a field; values are narrowed to `f32`.
pub fn field_to_lhbf<T: Real>(field: &BiasField<T>) -> Result<Vec<u8>> {
    let g = field.grid();
    let mut out = header(VERSION_FIELD, [field.depth(), field.heads(), field.tokens(), g.n_y(), g.n_x()])?;
    out.reserve(field.values().len() * 4);
    push_f32s(&mut out, field.values().iter());
    Ok(out)
}

/// Serialize an embedding table; values are narrowed to `f32`.
pub fn embedding_to_lhbf<T: Real>(table: &EmbeddingTable<T>) -> Result<Vec<u8>> {
    let g = table.grid();
    let mut out = header(VERSION_EMBEDDING, [1, 1, g.n(), g.n_y(), g.n_x()])?;
    out.extend_from_slice(&u32_of(table.width(), "D")?.to_le_bytes());
    out.extend_from_slice(&family_code(table.family()).to_le_bytes());
    push_f32s(&mut out, table.values().iter());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated LHBF at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }
}

/// Parse an LHBF buffer. Trailing bytes are an error.
pub fn parse_lhbf(bytes: &[u8]) -> Result<Lhbf> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing LHBF magic".into()));
    }
    let version = r.u16()?;
    let (l, h, t, ny, nx) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let grid = PatchGrid::new(ny, nx).map_err(|e| Error::Format(e.to_string()))?;
    let out = match version {
        VERSION_FIELD => {
            if t != grid.tokens() || l == 0 || h == 0 {
                return Err(Error::Format(format!("field header L={l} H={h} T={t} inconsistent with grid {grid}")));
            }
            let values = r.f32s(l * h * t * t)?;
            let values = Array4::from_shape_vec((l, h, t, t), values).map_err(|e| Error::Format(e.to_string()))?;
            Lhbf::Field(BiasField::from_values(grid, FieldKind::Loaded, values)?)
        }
        VERSION_EMBEDDING => {
            if t != grid.n() || l != 1 || h != 1 {
                return Err(Error::Format(format!("embedding header L={l} H={h} T={t} inconsistent with grid {grid}")));
            }
            let d = r.u32()?;
            let family = family_from_code(r.u32()? as u32)?;
            let values = Array2::from_shape_vec((t, d), r.f32s(t * d)?).map_err(|e| Error::Format(e.to_string()))?;
            Lhbf::Embedding(EmbeddingTable::new(grid, family, values)?)
        }
        v => return Err(Error::Format(format!("unsupported LHBF version {v:#06x}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after LHBF payload", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_field<T: Real>(path: &Path, field: &BiasField<T>) -> Result<()> {
    Ok(fs::write(path, field_to_lhbf(field)?)?)
}

pub fn write_embedding<T: Real>(path: &Path, table: &EmbeddingTable<T>) -> Result<()> {
    Ok(fs::write(path, embedding_to_lhbf(table)?)?)
}

pub fn read_lhbf(path: &Path) -> Result<Lhbf> {
    parse_lhbf(&fs::read(path)?)
}

/// One CSV row per line, `inf` for masked entries.
pub fn matrix_csv<T: Real>(m: ArrayView2<T>) -> String {
    let mut out = String::new();
    for row in m.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_f32().unwrap_or(f32::NAN).to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Write `{stem}_l{l}_h{h}.csv` for every layer and head into `dir`.
pub fn write_field_csv<T: Real>(dir: &Path, stem: &str, field: &BiasField<T>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for l in 0..field.depth() {
        for h in 0..field.heads() {
            let p = dir.join(format!("{stem}_l{l}_h{h}.csv"));
            fs::write(&p, matrix_csv(field.head(l, h)))?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Binary PGM of a panel, min–max normalized over its finite entries.
/// Non-finite entries render black; a constant panel renders black.
pub fn pgm_bytes(panel: ArrayView2<f64>) -> Vec<u8> {
    let (rows, cols) = panel.dim();
    let finite = panel.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(panel.iter().map(|&v| {
        if v.is_finite() && span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, panel: ArrayView2<f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&pgm_bytes(panel))?;
    Ok(())
}

/// One query's bias row laid out on the grid: `-bias` where visible, NaN where masked.
pub fn query_bias_panel<T: Real>(field: &BiasField<T>, l: usize, h: usize, query: usize) -> Array2<f64> {
    let g = field.grid();
    let row = field.head(l, h).row(query).to_owned();
    Array2::from_shape_fn((g.n_y(), g.n_x()), |(y, x)| {
        let v = row[y * g.n_x() + x + 1].f64();
        if v.is_infinite() {
            f64::NAN
        } else {
            -v
        }
    })
}

/// One query's attention row over patches, laid out on the grid.
pub fn query_attention_panel<T: Real>(weights: ArrayView2<T>, grid: PatchGrid, query: usize) -> Array2<f64> {
    Array2::from_shape_fn((grid.n_y(), grid.n_x()), |(y, x)| weights[[query, y * grid.n_x() + x + 1]].f64())
}
