//! Slope schedule and penalty shape for LookHere fields.

use serde::{Deserialize, Serialize};

use super::heads::HeadSpec;
use crate::error::{invalid, Result};

/// Parameters of `m(l, h) = s_l(l) · s_h(h) · s_g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlopeConfig {
    /// Global slope `s_g`.
    pub global: f64,
    /// `s_l` at the first layer.
    pub layer_start: f64,
    /// `s_l` at the last layer.
    pub layer_end: f64,
    /// `s_h` for every directed head.
    pub directed_scale: f64,
    /// `s_h` for the undirected heads, in head order.
    pub undirected_scales: Vec<f64>,
    /// Run the layer schedule from `layer_end` to `layer_start` instead.
    pub invert_layers: bool,
}

impl Default for SlopeConfig {
    fn default() -> Self {
        Self {
            global: 1.0,
            layer_start: 1.5,
            layer_end: 0.5,
            directed_scale: 1.0,
            undirected_scales: vec![0.5, 0.125, 0.03125, 0.0078125],
            invert_layers: false,
        }
    }
}

impl SlopeConfig {
    /// Defaults with `undirected_scales` extended (each entry a quarter of
    /// the previous) until it covers every undirected head in `specs`.
    pub fn for_heads(specs: &[HeadSpec]) -> Self {
        let mut cfg = Self::default();
        cfg.extend_undirected(specs.iter().filter(|s| !s.is_directed()).count());
        cfg
    }

    pub fn with_global(mut self, s_g: f64) -> Self {
        self.global = s_g;
        self
    }

    pub fn extend_undirected(&mut self, count: usize) {
        while self.undirected_scales.len() < count {
            let next = self.undirected_scales.last().map_or(0.5, |s| s * 0.25);
            self.undirected_scales.push(next);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global > 0.0 && self.global.is_finite()) {
            return invalid(format!("global slope must be positive and finite, got {}", self.global));
        }
        if !self.layer_start.is_finite() || !self.layer_end.is_finite() {
            return invalid("layer slope endpoints must be finite");
        }
        if !(self.directed_scale >= 0.0 && self.directed_scale.is_finite()) {
            return invalid("directed head scale must be nonnegative");
        }
        if self.undirected_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return invalid("undirected head scales must be nonnegative");
        }
        Ok(())
    }

    /// `s_l` for 0-based layer `l` of `depth`. A single layer uses the
    /// midpoint of the schedule.
    pub fn layer_scale(&self, l: usize, depth: usize) -> f64 {
        let (start, end) = if self.invert_layers {
            (self.layer_end, self.layer_start)
        } else {
            (self.layer_start, self.layer_end)
        };
        if depth < 2 {
            return 0.5 * (start + end);
        }
        start + l as f64 * (end - start) / (depth - 1) as f64
    }

    /// `s_h` for 0-based head `h`. Undirected heads draw from
    /// `undirected_scales` in the order they appear.
    pub fn head_scale(&self, h: usize, specs: &[HeadSpec]) -> Result<f64> {
        let Some(spec) = specs.get(h) else {
            return invalid(format!("head {h} out of range for {} heads", specs.len()));
        };
        if spec.is_directed() {
            return Ok(self.directed_scale);
        }
        let ordinal = specs[..h].iter().filter(|s| !s.is_directed()).count();
        match self.undirected_scales.get(ordinal) {
            Some(s) => Ok(*s),
            None => invalid(format!(
                "undirected head #{} has no entry in undirected_scales (len {})",
                ordinal + 1,
                self.undirected_scales.len()
            )),
        }
    }

    /// `m(l, h)` for 0-based layer and head.
    pub fn slope(&self, l: usize, h: usize, depth: usize, specs: &[HeadSpec]) -> Result<f64> {
        if l >= depth {
            return invalid(format!("layer {l} out of range for depth {depth}"));
        }
        Ok(self.layer_scale(l, depth) * self.head_scale(h, specs)? * self.global)
    }
}

/// Power applied to the Euclidean distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceExponent {
    #[default]
    Linear,
    Square,
    Sqrt,
}

impl DistanceExponent {
    #[inline]
    pub fn apply(self, d: f64) -> f64 {
        match self {
            DistanceExponent::Linear => d,
            DistanceExponent::Square => d * d,
            DistanceExponent::Sqrt => d.sqrt(),
        }
    }
}

/// What a masked entry holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `+∞`: the key is excluded from the softmax.
    #[default]
    Hard,
    /// `0`: no masking, no penalty.
    Zero,
}

/// Distance-penalty shape, including the ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub exponent: DistanceExponent,
    /// Drop distance penalties on every head.
    pub no_distance: bool,
    /// Drop distance penalties on undirected heads only.
    pub undirected_no_distance: bool,
    pub mask_mode: MaskMode,
}

impl PenaltyConfig {
    /// Penalty for a visible key at distance `d` under slope `m`.
    #[inline]
    pub fn penalty(&self, m: f64, d: f64, directed: bool) -> f64 {
        if self.no_distance || (self.undirected_no_distance && !directed) {
            0.0
        } else {
            m * self.exponent.apply(d)
        }
    }

    /// Value stored for an invisible key.
    #[inline]
    pub fn masked_value(&self) -> f64 {
        match self.mask_mode {
            MaskMode::Hard => f64::INFINITY,
            MaskMode::Zero => 0.0,
        }
    }
}
