//! Moving a trained position encoding from one patch grid to another.
//!
//! Embedding tables are resampled, relative-bias tables are interpolated,
//! Fourier embeddings are re-evaluated, and the fixed-bias and rotary methods
//! are rebuilt with one tunable scalar (global slope or base frequency).

use serde::{Deserialize, Serialize};

use crate::bias_field::{
    build_alibi_2d, build_lookhere, BiasField, HeadSpec, PenaltyConfig, RelativeBiasTable, SlopeConfig,
};
use crate::error::{invalid, Result};
use crate::grid::{ModelDims, PatchGrid};
use crate::interp;
use crate::pos_embed::{resize_bilinear, resize_factorized, EmbeddingFamily, EmbeddingTable, FourierEmbedding};
use crate::rope::RotaryConfig;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "learned_1d")]
    Learned1d,
    #[serde(rename = "sincos_2d")]
    Sincos2d,
    #[serde(rename = "factorized")]
    Factorized,
    #[serde(rename = "fourier")]
    Fourier,
    #[serde(rename = "rpe_learn")]
    RpeLearn,
    #[serde(rename = "alibi_2d")]
    Alibi2d,
    #[serde(rename = "rope_2d")]
    Rope2d,
    #[serde(rename = "lookhere")]
    LookHere,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Learned1d,
        Method::Sincos2d,
        Method::Factorized,
        Method::Fourier,
        Method::RpeLearn,
        Method::Alibi2d,
        Method::Rope2d,
        Method::LookHere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Learned1d => "learned_1d",
            Method::Sincos2d => "sincos_2d",
            Method::Factorized => "factorized",
            Method::Fourier => "fourier",
            Method::RpeLearn => "rpe_learn",
            Method::Alibi2d => "alibi_2d",
            Method::Rope2d => "rope_2d",
            Method::LookHere => "lookhere",
        }
    }

    /// Whether adaptation takes a tuned scalar.
    pub fn is_tunable(self) -> bool {
        matches!(self, Method::Alibi2d | Method::Rope2d | Method::LookHere)
    }

    /// Default search set for the tuned scalar, if the method has one.
    pub fn default_candidates(self) -> Option<Vec<f64>> {
        match self {
            Method::Alibi2d | Method::LookHere => Some(global_slope_candidates()),
            Method::Rope2d => Some(base_frequency_candidates()),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// `0.50, 0.55, …, 1.60`.
pub fn global_slope_candidates() -> Vec<f64> {
    (10..=32).map(|k| k as f64 * 5.0 / 100.0).collect()
}

/// 16 log-spaced values from 100 to 1500 inclusive.
pub fn base_frequency_candidates() -> Vec<f64> {
    const STEPS: usize = 15;
    let mut out: Vec<f64> = (0..STEPS).map(|k| 100.0 * 15f64.powf(k as f64 / STEPS as f64)).collect();
    out.push(1500.0);
    out
}

/// One row of tuned extrapolation settings for a ViT-B/16 trained at 224².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceTuning {
    pub resolution: usize,
    /// Square patch grid side at patch size 16.
    pub grid_side: usize,
    pub alibi_global: f64,
    pub rope_base: f64,
    pub lookhere_global: f64,
}

pub const REFERENCE_TUNING: [ReferenceTuning; 7] = [
    ReferenceTuning { resolution: 224, grid_side: 14, alibi_global: 1.0, rope_base: 100.0, lookhere_global: 1.0 },
    ReferenceTuning { resolution: 320, grid_side: 20, alibi_global: 1.4, rope_base: 160.0, lookhere_global: 1.0 },
    ReferenceTuning { resolution: 384, grid_side: 24, alibi_global: 1.4, rope_base: 190.0, lookhere_global: 0.95 },
    ReferenceTuning { resolution: 448, grid_side: 28, alibi_global: 1.4, rope_base: 250.0, lookhere_global: 0.95 },
    ReferenceTuning { resolution: 512, grid_side: 32, alibi_global: 1.4, rope_base: 700.0, lookhere_global: 0.95 },
    ReferenceTuning { resolution: 768, grid_side: 48, alibi_global: 1.5, rope_base: 1250.0, lookhere_global: 0.75 },
    ReferenceTuning { resolution: 1024, grid_side: 64, alibi_global: 1.6, rope_base: 1250.0, lookhere_global: 0.6 },
];

/// Reference row for a square grid side, if listed.
pub fn reference_tuning(grid_side: usize) -> Option<ReferenceTuning> {
    REFERENCE_TUNING.iter().copied().find(|r| r.grid_side == grid_side)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptPlan {
    pub method: Method,
    pub source: PatchGrid,
    pub target: PatchGrid,
    pub tuned_scalar: Option<f64>,
}

impl AdaptPlan {
    pub fn new(method: Method, source: PatchGrid, target: PatchGrid, tuned_scalar: Option<f64>) -> Result<Self> {
        let plan = Self { method, source, target, tuned_scalar };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        match self.tuned_scalar {
            Some(s) if !self.method.is_tunable() => invalid(format!("{} takes no tuned scalar (got {s})", self.method)),
            Some(s) if !(s > 0.0 && s.is_finite()) => invalid(format!("tuned scalar must be positive, got {s}")),
            _ => Ok(()),
        }
    }

    /// True when the target is smaller than the source along some axis.
    pub fn is_shrinking(&self) -> bool {
        self.target.n_y() < self.source.n_y() || self.target.n_x() < self.source.n_x()
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target && self.tuned_scalar.is_none()
    }
}

/// Everything needed to rebuild a LookHere field on another grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookHereRecipe {
    pub dims: ModelDims,
    pub specs: Vec<HeadSpec>,
    pub slopes: SlopeConfig,
    pub penalty: PenaltyConfig,
}

impl LookHereRecipe {
    pub fn build<T: Real>(&self, grid: PatchGrid) -> Result<BiasField<T>> {
        build_lookhere(grid, &self.dims, &self.specs, &self.slopes, &self.penalty)
    }
}

/// Everything needed to rebuild a 2D-ALiBi field on another grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlibiRecipe {
    pub dims: ModelDims,
    pub head_slopes: Vec<f64>,
    pub global: f64,
}

impl AlibiRecipe {
    pub fn build<T: Real>(&self, grid: PatchGrid) -> Result<BiasField<T>> {
        build_alibi_2d(grid, &self.dims, &self.head_slopes, self.global)
    }
}

/// Position-encoding artifacts of one method at one grid.
#[derive(Clone, Debug, PartialEq)]
pub enum EncodingState<T> {
    /// Learned, sinusoidal or factorized table.
    Table(EmbeddingTable<T>),
    Fourier { net: FourierEmbedding<T>, table: EmbeddingTable<T> },
    Rpe { table: RelativeBiasTable<T>, grid: PatchGrid },
    LookHere { recipe: LookHereRecipe, field: BiasField<T> },
    Alibi { recipe: AlibiRecipe, field: BiasField<T> },
    Rotary(RotaryConfig),
}

impl<T: Real> EncodingState<T> {
    pub fn method(&self) -> Method {
        match self {
            EncodingState::Table(t) => match t.family() {
                EmbeddingFamily::Learned1d => Method::Learned1d,
                EmbeddingFamily::Sincos2d => Method::Sincos2d,
                EmbeddingFamily::Factorized => Method::Factorized,
                EmbeddingFamily::Fourier => Method::Fourier,
            },
            EncodingState::Fourier { .. } => Method::Fourier,
            EncodingState::Rpe { .. } => Method::RpeLearn,
            EncodingState::LookHere { .. } => Method::LookHere,
            EncodingState::Alibi { .. } => Method::Alibi2d,
            EncodingState::Rotary(_) => Method::Rope2d,
        }
    }

    pub fn grid(&self) -> PatchGrid {
        match self {
            EncodingState::Table(t) => t.grid(),
            EncodingState::Fourier { table, .. } => table.grid(),
            EncodingState::Rpe { grid, .. } => *grid,
            EncodingState::LookHere { field, .. } | EncodingState::Alibi { field, .. } => field.grid(),
            EncodingState::Rotary(c) => c.grid,
        }
    }

    pub fn lookhere(recipe: LookHereRecipe, grid: PatchGrid) -> Result<Self> {
        let field = recipe.build(grid)?;
        Ok(EncodingState::LookHere { recipe, field })
    }

    pub fn alibi(recipe: AlibiRecipe, grid: PatchGrid) -> Result<Self> {
        let field = recipe.build(grid)?;
        Ok(EncodingState::Alibi { recipe, field })
    }

    pub fn fourier(net: FourierEmbedding<T>, grid: PatchGrid) -> Result<Self> {
        let table = net.evaluate(grid)?;
        Ok(EncodingState::Fourier { net, table })
    }
}

/// Align-corners bilinear resampling of a relative-bias table so that it
/// covers every displacement of `target`.
pub fn interpolate_rpe<T: Real>(table: &RelativeBiasTable<T>, target: PatchGrid) -> Result<RelativeBiasTable<T>> {
    let cube = table.values().view().permuted_axes([1, 2, 0]);
    let out = interp::bilinear(cube, 2 * target.n_y() - 1, 2 * target.n_x() - 1);
    let values = out.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    RelativeBiasTable::from_values(values)
}

/// Adapt `state` from `plan.source` to `plan.target`.
pub fn adapt<T: Real>(plan: &AdaptPlan, state: &EncodingState<T>) -> Result<EncodingState<T>> {
    plan.validate()?;
    if state.method() != plan.method {
        return invalid(format!("plan is for {} but the state holds {}", plan.method, state.method()));
    }
    if state.grid() != plan.source {
        return invalid(format!("state is on grid {} but the plan starts from {}", state.grid(), plan.source));
    }
    if plan.is_identity() {
        return Ok(state.clone());
    }
    let target = plan.target;
    Ok(match state {
        EncodingState::Table(t) => match t.family() {
            EmbeddingFamily::Factorized => EncodingState::Table(resize_factorized(t, target)?),
            _ => EncodingState::Table(resize_bilinear(t, target)?),
        },
        EncodingState::Fourier { net, .. } => EncodingState::fourier(net.clone(), target)?,
        EncodingState::Rpe { table, .. } => EncodingState::Rpe { table: interpolate_rpe(table, target)?, grid: target },
        EncodingState::LookHere { recipe, .. } => {
            let mut recipe = recipe.clone();
            if let Some(s) = plan.tuned_scalar {
                recipe.slopes.global = s;
            }
            EncodingState::lookhere(recipe, target)?
        }
        EncodingState::Alibi { recipe, .. } => {
            let mut recipe = recipe.clone();
            if let Some(s) = plan.tuned_scalar {
                recipe.global = s;
            }
            EncodingState::alibi(recipe, target)?
        }
        EncodingState::Rotary(cfg) => {
            let cfg = cfg.with_grid(target);
            EncodingState::Rotary(match plan.tuned_scalar {
                Some(base) => cfg.retune_base(base)?,
                None => cfg,
            })
        }
    })
}

/// Highest-scoring candidate and its score; ties go to the smaller scalar.
///
/// Non-finite scores are never selected.
pub fn tune_scalar<F: FnMut(f64) -> f64>(candidates: &[f64], mut evaluate: F) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return invalid("no candidates to tune over");
    }
    let mut best: Option<(f64, f64)> = None;
    for &s in candidates {
        let score = evaluate(s);
        if !score.is_finite() {
            continue;
        }
        best = match best {
            Some((bs, bv)) if bv > score || (bv == score && bs <= s) => Some((bs, bv)),
            _ => Some((s, score)),
        };
    }
    best.ok_or_else(|| crate::Error::InvalidArgument("every candidate scored non-finite".into()))
}

/// JSON record of one adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub method: Method,
    pub source: String,
    pub target: String,
    pub scalar: Option<f64>,
    pub score: Option<f64>,
}

impl TuningRecord {
    pub fn new(plan: &AdaptPlan, score: Option<f64>) -> Self {
        Self {
            method: plan.method,
            source: plan.source.to_string(),
            target: plan.target.to_string(),
            scalar: plan.tuned_scalar,
            score,
        }
    }
}
