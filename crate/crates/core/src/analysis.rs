//! Attention and calibration diagnostics.
//!
//! All metrics are computed in `f64` regardless of the input scalar type.

use ndarray::{s, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::LayerTrace;
use crate::error::{invalid, Result};
use crate::grid::PatchGrid;
use crate::scalar::Real;

/// Rows must sum to one within this tolerance (or a precision-scaled bound
/// for `f32` inputs, whichever is larger).
pub const ROW_SUM_TOL: f64 = 1e-6;

fn row_tolerance<T: Real>(len: usize) -> f64 {
    ROW_SUM_TOL.max(8.0 * len as f64 * T::epsilon().f64())
}

/// Default number of calibration bins.
pub const ECE_BINS: usize = 15;

fn check_rows<T: Real>(weights: &ArrayView3<T>) -> Result<()> {
    let (h, t, t2) = weights.dim();
    if h == 0 || t == 0 || t != t2 {
        return invalid(format!("attention weights must be H×T×T, got {:?}", weights.dim()));
    }
    let tol = row_tolerance::<T>(t);
    for (k, row) in weights.lanes(Axis(2)).into_iter().enumerate() {
        let mut sum = 0.0;
        for &w in row {
            let w = w.f64();
            if !(w >= 0.0) {
                return invalid(format!("negative or NaN weight in row {k}"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > tol {
            return invalid(format!("row {k} sums to {sum}"));
        }
    }
    Ok(())
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Generalized Jensen–Shannon divergence between heads, averaged over rows.
///
/// For each query row: entropy of the head-mean distribution minus the mean
/// of the per-head entropies (natural log). CLS rows and columns are kept.
pub fn head_jsd<T: Real>(weights: ArrayView3<T>) -> Result<f64> {
    check_rows(&weights)?;
    let (h, t, _) = weights.dim();
    let hf = h as f64;
    let mut total = 0.0;
    for r in 0..t {
        let rows = weights.slice(s![.., r, ..]);
        let mixed = (0..t).map(|j| rows.column(j).iter().map(|w| w.f64()).sum::<f64>() / hf);
        let per_head: f64 = rows.outer_iter().map(|row| entropy(row.iter().map(|w| w.f64()))).sum::<f64>() / hf;
        total += entropy(mixed) - per_head;
    }
    Ok(total / t as f64)
}

/// Attention-weighted patch distance, averaged over heads and patch queries.
///
/// The CLS row is skipped and mass on the CLS column contributes nothing.
pub fn attention_distance<T: Real>(weights: ArrayView3<T>, grid: PatchGrid) -> Result<f64> {
    check_rows(&weights)?;
    let (h, t, _) = weights.dim();
    if t != grid.tokens() {
        return invalid(format!("{t} tokens for grid {grid}"));
    }
    let coords: Vec<(usize, usize)> = grid.patches().map(|(_, y, x)| (y, x)).collect();
    let mut total = 0.0;
    for head in weights.outer_iter() {
        for (qi, &(qy, qx)) in coords.iter().enumerate() {
            let row = head.row(qi + 1);
            for (kj, &(ky, kx)) in coords.iter().enumerate() {
                let dy = ky as f64 - qy as f64;
                let dx = kx as f64 - qx as f64;
                total += row[kj + 1].f64() * (dy * dy + dx * dx).sqrt();
            }
        }
    }
    Ok(total / (h * grid.n()) as f64)
}

/// Mean cosine similarity over unordered pairs of patch representations (`n × D`).
pub fn patch_similarity<T: Real>(reps: ArrayView2<T>) -> Result<f64> {
    let n = reps.nrows();
    if n < 2 {
        return invalid(format!("need at least two patches, got {n}"));
    }
    let rows: Vec<Vec<f64>> = reps.outer_iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let sq: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).collect();
    if let Some(k) = sq.iter().position(|&v| !(v > 0.0)) {
        return invalid(format!("patch {k} has zero norm"));
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            total += dot / (sq[a] * sq[b]).sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
///
/// Bins are half-open `[lo, hi)` except the last, which includes 1.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return invalid("no samples");
    }
    if confidences.len() != correct.len() {
        return invalid(format!("{} confidences for {} outcomes", confidences.len(), correct.len()));
    }
    if bins == 0 {
        return invalid("need at least one bin");
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return invalid(format!("confidence {c} outside [0, 1]"));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        hits[b] += ok as usize;
        conf[b] += c;
    }
    let total = confidences.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / total) * (hits[b] as f64 / m - conf[b] / m).abs()
        })
        .sum())
}

/// One metric across layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub grid: PatchGrid,
    /// Free-form label such as `"source"` or `"target"`.
    pub tag: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    metric: &'a str,
    layer: usize,
    value: f64,
    grid: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolution: Option<&'a str>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, grid: PatchGrid, tag: Option<String>, values: Vec<f64>) -> Result<Self> {
        let report = Self { metric: metric.into(), grid, tag, values };
        if let Some(v) = report.values.iter().find(|v| !v.is_finite()) {
            return Err(crate::Error::Internal(format!("{} produced non-finite value {v}", report.metric)));
        }
        Ok(report)
    }

    /// One JSON object per layer, newline-terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for (layer, &value) in self.values.iter().enumerate() {
            let line = MetricLine {
                metric: &self.metric,
                layer,
                value,
                grid: self.grid.to_string(),
                resolution: self.tag.as_deref(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Per-layer JSD, attention distance and patch similarity, each averaged over the batch.
pub fn layer_reports<T: Real>(layers: &[LayerTrace<T>], grid: PatchGrid, tag: Option<&str>) -> Result<Vec<MetricReport>> {
    let mut jsd = Vec::with_capacity(layers.len());
    let mut dist = Vec::with_capacity(layers.len());
    let mut sim = Vec::with_capacity(layers.len());
    for layer in layers {
        let b = layer.weights.len_of(Axis(0));
        let (mut j, mut d, mut s) = (0.0, 0.0, 0.0);
        for (w, tok) in layer.weights.outer_iter().zip(layer.tokens.outer_iter()) {
            j += head_jsd(w)?;
            d += attention_distance(w, grid)?;
            s += patch_similarity(tok.slice(s![1.., ..]))?;
        }
        let bf = b as f64;
        jsd.push(j / bf);
        dist.push(d / bf);
        sim.push(s / bf);
    }
    let tag = tag.map(str::to_string);
    Ok(vec![
        MetricReport::new("head_jsd", grid, tag.clone(), jsd)?,
        MetricReport::new("attention_distance", grid, tag.clone(), dist)?,
        MetricReport::new("patch_similarity", grid, tag, sim)?,
    ])
}
