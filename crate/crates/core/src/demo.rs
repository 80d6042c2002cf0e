//! Synthetic extrapolation experiment: train a tiny ViT to report which
//! quadrant holds a bright blob, then evaluate on a finer patch grid.
//!
//! Images are rendered from continuous coordinates, so a larger grid shows
//! the same scene at a higher resolution.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{ece, layer_reports, MetricReport, ECE_BINS};
use crate::attention::{Encoding, ParamSet, TinyViTParams, ViTConfig};
use crate::bias_field::{alibi_slopes, HeadSpec, PenaltyConfig, SlopeConfig};
use crate::error::{invalid, Error, Result};
use crate::extrapolate::{adapt, tune_scalar, AdaptPlan, AlibiRecipe, EncodingState, LookHereRecipe, Method};
use crate::grid::{ModelDims, PatchGrid};
use crate::io::query_attention_panel;
use crate::ops::log_softmax;
use crate::pos_embed::{sincos_2d, EmbeddingFamily, EmbeddingTable};
use crate::rng::{seeded, Rng};
use crate::rope::{Rotary, RotaryConfig, DEFAULT_BASE};
use crate::scalar::Real;

pub const CLASSES: usize = 4;

/// The bright-quadrant task. Class `2·row + col` for quadrant `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadrantTask {
    /// Blob radius as a fraction of the image side.
    pub blob_radius: f64,
    pub blob_peak: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Blob centers stay this far (fraction of side) from the midlines and edges.
    pub margin: f64,
}

impl Default for QuadrantTask {
    fn default() -> Self {
        Self { blob_radius: 0.1, blob_peak: 1.0, noise: 0.1, margin: 0.1 }
    }
}

impl QuadrantTask {
    /// `count` images on `grid` with single-channel `patch × patch` patches,
    /// returned as `count × n × patch²` plus labels.
    pub fn sample<T: Real>(&self, grid: PatchGrid, patch: usize, count: usize, rng: &mut Rng) -> (Array3<T>, Vec<usize>) {
        let noise = Normal::new(0.0, self.noise).expect("noise level is finite");
        let (h, w) = (grid.n_y() * patch, grid.n_x() * patch);
        let two_r2 = 2.0 * self.blob_radius * self.blob_radius;
        let mut out = Array3::zeros((count, grid.n(), patch * patch));
        let mut labels = Vec::with_capacity(count);
        for b in 0..count {
            let label = rng.gen_range(0..CLASSES);
            let (row, col) = ((label / 2) as f64, (label % 2) as f64);
            let cy = 0.5 * row + rng.gen_range(self.margin..0.5 - self.margin);
            let cx = 0.5 * col + rng.gen_range(self.margin..0.5 - self.margin);
            labels.push(label);
            let mut img = out.index_axis_mut(Axis(0), b);
            for py in 0..h {
                for px in 0..w {
                    let (u, v) = ((py as f64 + 0.5) / h as f64, (px as f64 + 0.5) / w as f64);
                    let d2 = (u - cy).powi(2) + (v - cx).powi(2);
                    let val = self.blob_peak * (-d2 / two_r2).exp() + noise.sample(rng);
                    let k = (py / patch) * grid.n_x() + px / patch;
                    img[[k, (py % patch) * patch + px % patch]] = T::of(val);
                }
            }
        }
        (out, labels)
    }
}

/// Positional mechanism trained by the demo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DemoEncoding {
    None,
    Learned1d,
    Sincos2d,
    Alibi2d { global: f64 },
    Rope2d { base: f64 },
    LookHere { specs: Vec<HeadSpec>, slopes: SlopeConfig, penalty: PenaltyConfig },
}

impl DemoEncoding {
    pub fn lookhere(specs: Vec<HeadSpec>) -> Self {
        let slopes = SlopeConfig::for_heads(&specs);
        DemoEncoding::LookHere { specs, slopes, penalty: PenaltyConfig::default() }
    }

    pub fn rope() -> Self {
        DemoEncoding::Rope2d { base: DEFAULT_BASE }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DemoEncoding::None => "none",
            DemoEncoding::Learned1d => Method::Learned1d.name(),
            DemoEncoding::Sincos2d => Method::Sincos2d.name(),
            DemoEncoding::Alibi2d { .. } => Method::Alibi2d.name(),
            DemoEncoding::Rope2d { .. } => Method::Rope2d.name(),
            DemoEncoding::LookHere { .. } => Method::LookHere.name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch: 32, lr: 1e-3, warmup: 0.1, clip_norm: 1.0, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub encoding: DemoEncoding,
    pub dims: ModelDims,
    pub source: PatchGrid,
    pub target: PatchGrid,
    pub task: QuadrantTask,
    pub train: TrainConfig,
    pub eval_samples: usize,
    /// Samples used for per-layer metrics and attention maps.
    pub metric_samples: usize,
    /// Tuned scalar applied when moving to the target grid.
    pub target_scalar: Option<f64>,
    /// If set (and no `target_scalar` is given), pick the target scalar from
    /// these by held-out log-likelihood at the target grid.
    pub tune_candidates: Option<Vec<f64>>,
    pub minival_samples: usize,
    pub seed: u64,
}

impl DemoConfig {
    /// L=4, H=4, D=64, 4-pixel patches, 8×8 → 16×16.
    pub fn small(encoding: DemoEncoding, seed: u64) -> Self {
        Self {
            encoding,
            dims: ModelDims::new(4, 4, 64, 4).expect("valid dims"),
            source: PatchGrid::square(8).expect("valid grid"),
            target: PatchGrid::square(16).expect("valid grid"),
            task: QuadrantTask::default(),
            train: TrainConfig::default(),
            eval_samples: 256,
            metric_samples: 8,
            target_scalar: None,
            tune_candidates: None,
            minival_samples: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.train.steps == 0 || self.train.batch == 0 || self.eval_samples == 0 || self.metric_samples == 0 {
            return invalid("steps, batch and sample counts must be positive");
        }
        if self.tune_candidates.as_ref().is_some_and(|c| c.is_empty()) || self.minival_samples == 0 {
            return invalid("tuning needs candidates and a nonempty minival set");
        }
        if !(self.train.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        let t = self.task;
        if !(t.margin >= 0.0 && t.margin < 0.25 && t.blob_radius > 0.0 && t.noise >= 0.0) {
            return invalid(format!("bad task parameters {t:?}"));
        }
        if let DemoEncoding::LookHere { specs, slopes, .. } = &self.encoding {
            if specs.len() != self.dims.heads {
                return invalid(format!("{} head specs for {} heads", specs.len(), self.dims.heads));
            }
            slopes.validate()?;
        }
        Ok(())
    }
}

/// Positional state at one grid, ready to feed the model.
struct Prepared<T> {
    state: Option<EncodingState<T>>,
    rotary: Option<Rotary<T>>,
}

impl<T: Real> Prepared<T> {
    fn encoding(&self) -> Encoding<'_, T> {
        if let Some(r) = &self.rotary {
            return Encoding::Rotary(r);
        }
        match &self.state {
            Some(EncodingState::Table(t)) => Encoding::Embedding(t.values().view()),
            Some(EncodingState::LookHere { field, .. }) | Some(EncodingState::Alibi { field, .. }) => Encoding::Bias(field),
            _ => Encoding::None,
        }
    }
}

fn prepare_source<T: Real>(cfg: &DemoConfig) -> Result<Prepared<T>> {
    let dims = cfg.dims;
    let state = match &cfg.encoding {
        DemoEncoding::None | DemoEncoding::Learned1d => None,
        DemoEncoding::Sincos2d => Some(EncodingState::Table(sincos_2d(cfg.source, dims.width)?)),
        DemoEncoding::Alibi2d { global } => Some(EncodingState::alibi(
            AlibiRecipe { dims, head_slopes: alibi_slopes(dims.heads), global: *global },
            cfg.source,
        )?),
        DemoEncoding::Rope2d { base } => Some(EncodingState::Rotary(RotaryConfig::new(dims.head_dim, *base, cfg.source)?)),
        DemoEncoding::LookHere { specs, slopes, penalty } => Some(EncodingState::lookhere(
            LookHereRecipe { dims, specs: specs.clone(), slopes: slopes.clone(), penalty: *penalty },
            cfg.source,
        )?),
    };
    finish(state)
}

fn finish<T: Real>(state: Option<EncodingState<T>>) -> Result<Prepared<T>> {
    let rotary = match &state {
        Some(EncodingState::Rotary(c)) => Some(Rotary::new(*c)?),
        _ => None,
    };
    Ok(Prepared { state, rotary })
}

/// Move the encoding (and a learned table inside `params`) to `grid`.
fn prepare_target<T: Real>(
    cfg: &DemoConfig,
    source: &Prepared<T>,
    params: &TinyViTParams<T>,
    grid: PatchGrid,
    scalar: Option<f64>,
) -> Result<(Prepared<T>, TinyViTParams<T>)> {
    let mut params = params.clone();
    if let Some(pos) = &params.pos {
        let table = EncodingState::Table(EmbeddingTable::new(cfg.source, EmbeddingFamily::Learned1d, pos.clone())?);
        let plan = AdaptPlan::new(Method::Learned1d, cfg.source, grid, None)?;
        let EncodingState::Table(t) = adapt(&plan, &table)? else {
            return Err(Error::Internal("table adapt changed kind".into()));
        };
        params.pos = Some(t.values().clone());
    }
    let state = match &source.state {
        Some(s) => {
            let scalar = if s.method().is_tunable() { scalar } else { None };
            Some(adapt(&AdaptPlan::new(s.method(), cfg.source, grid, scalar)?, s)?)
        }
        None => None,
    };
    Ok((finish(state)?, params))
}

/// Adam over every slice of a [`ParamSet`].
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let zeros = || params.slices().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        let decay = T::of(1.0 - lr * weight_decay);
        for (((p, g), m), v) in params.slices_mut().into_iter().zip(grads.slices()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] = p[i] * decay - step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

fn grad_norm<T: Real, P: ParamSet<T>>(g: &P) -> f64 {
    g.slices().iter().flat_map(|s| s.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

fn scale<T: Real, P: ParamSet<T>>(g: &mut P, factor: f64) {
    let f = T::of(factor);
    for s in g.slices_mut() {
        s.iter_mut().for_each(|v| *v *= f);
    }
}

fn lr_at(train: &TrainConfig, step: usize) -> f64 {
    let warm = ((train.steps as f64) * train.warmup).ceil().max(1.0);
    let s = step as f64;
    if s < warm {
        return train.lr * (s + 1.0) / warm;
    }
    let progress = (s - warm) / ((train.steps as f64 - warm).max(1.0));
    train.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Accuracy and calibration on one grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub grid: PatchGrid,
    pub accuracy: f64,
    pub ece: f64,
}

/// Head-averaged center-query attention of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub tag: String,
    pub layer: usize,
    pub head: usize,
    /// `n_y × n_x`.
    pub panel: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub method: String,
    pub seed: u64,
    pub final_loss: f64,
    /// Scalar used at the target grid, if the method has one.
    pub target_scalar: Option<f64>,
    pub source: EvalResult,
    pub target: EvalResult,
    pub metrics: Vec<MetricReport>,
    pub maps: Vec<AttentionMap>,
}

#[derive(Serialize)]
struct Summary<'a> {
    method: &'a str,
    seed: u64,
    final_loss: f64,
    target_scalar: Option<f64>,
    source_grid: String,
    target_grid: String,
    source_accuracy: f64,
    target_accuracy: f64,
    source_ece: f64,
    target_ece: f64,
}

impl DemoReport {
    /// Summary line followed by per-layer metric lines.
    pub fn to_json_lines(&self) -> Result<String> {
        let summary = Summary {
            method: &self.method,
            seed: self.seed,
            final_loss: self.final_loss,
            target_scalar: self.target_scalar,
            source_grid: self.source.grid.to_string(),
            target_grid: self.target.grid.to_string(),
            source_accuracy: self.source.accuracy,
            target_accuracy: self.target.accuracy,
            source_ece: self.source.ece,
            target_ece: self.target.ece,
        };
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&m.to_json_lines()?);
        }
        Ok(out)
    }
}

const EVAL_CHUNK: usize = 32;

/// Mean log-probability of the true labels.
fn log_likelihood<T: Real>(
    params: &TinyViTParams<T>,
    prepared: &Prepared<T>,
    grid: PatchGrid,
    (x, y): &(Array3<T>, Vec<usize>),
) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..y.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(y.len());
        let out = params.forward(x.slice(s![start..end, .., ..]), grid, &prepared.encoding(), false)?;
        for (row, &label) in out.logits.outer_iter().zip(&y[start..end]) {
            total += log_softmax(row)[label].f64();
        }
    }
    Ok(total / y.len() as f64)
}

fn evaluate<T: Real>(
    cfg: &DemoConfig,
    params: &TinyViTParams<T>,
    prepared: &Prepared<T>,
    grid: PatchGrid,
    rng: &mut Rng,
) -> Result<EvalResult> {
    let mut conf = Vec::with_capacity(cfg.eval_samples);
    let mut correct = Vec::with_capacity(cfg.eval_samples);
    let mut left = cfg.eval_samples;
    while left > 0 {
        let b = left.min(EVAL_CHUNK);
        left -= b;
        let (x, y) = cfg.task.sample::<T>(grid, cfg.dims.patch_size, b, rng);
        let out = params.forward(x.view(), grid, &prepared.encoding(), false)?;
        for (row, &label) in out.logits.outer_iter().zip(&y) {
            let p = log_softmax(row).mapv(|v| v.f64().exp());
            let (arg, &best) = p.iter().enumerate().fold((0, &f64::NEG_INFINITY), |a, (i, v)| if *v > *a.1 { (i, v) } else { a });
            conf.push(best.clamp(0.0, 1.0));
            correct.push(arg == label);
        }
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(EvalResult { grid, accuracy, ece: ece(&conf, &correct, ECE_BINS)? })
}

fn diagnostics<T: Real>(
    cfg: &DemoConfig,
    params: &TinyViTParams<T>,
    prepared: &Prepared<T>,
    grid: PatchGrid,
    tag: &str,
    rng: &mut Rng,
) -> Result<(Vec<MetricReport>, Vec<AttentionMap>)> {
    let (x, _) = cfg.task.sample::<T>(grid, cfg.dims.patch_size, cfg.metric_samples, rng);
    let out = params.forward(x.view(), grid, &prepared.encoding(), true)?;
    let metrics = layer_reports(&out.layers, grid, Some(tag))?;
    let center = grid.center();
    let mut maps = Vec::new();
    for (layer, trace) in out.layers.iter().enumerate() {
        let mean = trace.weights.mean_axis(Axis(0)).expect("nonempty batch");
        for head in 0..cfg.dims.heads {
            let panel = query_attention_panel(mean.slice(s![head, .., ..]), grid, center);
            maps.push(AttentionMap { tag: tag.to_string(), layer, head, panel });
        }
    }
    Ok((metrics, maps))
}

/// Per-layer metrics and attention maps of the freshly initialized model on the source grid.
pub fn untrained_diagnostics<T: Real>(cfg: &DemoConfig) -> Result<(Vec<MetricReport>, Vec<AttentionMap>)> {
    cfg.validate()?;
    let vcfg = ViTConfig::new(cfg.dims, 1, CLASSES)?;
    let learned = matches!(cfg.encoding, DemoEncoding::Learned1d);
    let params = TinyViTParams::<T>::init(vcfg, cfg.seed, learned.then_some(cfg.source))?;
    let source = prepare_source::<T>(cfg)?;
    diagnostics(cfg, &params, &source, cfg.source, "source", &mut seeded(cfg.seed ^ 0xE7A1))
}

/// Train on the source grid and evaluate on source and target grids.
pub fn run_demo<T: Real>(cfg: &DemoConfig) -> Result<DemoReport> {
    cfg.validate()?;
    let vcfg = ViTConfig::new(cfg.dims, 1, CLASSES)?;
    let learned = matches!(cfg.encoding, DemoEncoding::Learned1d);
    let mut params = TinyViTParams::<T>::init(vcfg, cfg.seed, learned.then_some(cfg.source))?;
    let source = prepare_source::<T>(cfg)?;

    let mut data_rng = seeded(cfg.seed ^ 0xD47A);
    let mut adam = Adam::new(&params);
    let mut final_loss = f64::NAN;
    let mut recent = Vec::new();
    for step in 0..cfg.train.steps {
        let (x, y) = cfg.task.sample::<T>(cfg.source, cfg.dims.patch_size, cfg.train.batch, &mut data_rng);
        let (loss, mut grads) = params.loss_and_grad(x.view(), &y, cfg.source, &source.encoding())?;
        let loss = loss.f64();
        if !loss.is_finite() {
            return Err(Error::Runtime(format!("training diverged at step {step}")));
        }
        let norm = grad_norm(&grads);
        if cfg.train.clip_norm > 0.0 && norm > cfg.train.clip_norm {
            scale(&mut grads, cfg.train.clip_norm / norm);
        }
        adam.step(&mut params, &grads, lr_at(&cfg.train, step), cfg.train.weight_decay);
        recent.push(loss);
        if recent.len() > 10 {
            recent.remove(0);
        }
        final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    }
    if !params.is_finite() {
        return Err(Error::Runtime("parameters became non-finite".into()));
    }

    let mut eval_rng = seeded(cfg.seed ^ 0xE7A1);
    let src_eval = evaluate(cfg, &params, &source, cfg.source, &mut eval_rng)?;
    let scalar = match (&cfg.tune_candidates, &source.state) {
        (Some(cands), Some(state)) if cfg.target_scalar.is_none() && state.method().is_tunable() => {
            let minival = cfg.task.sample::<T>(cfg.target, cfg.dims.patch_size, cfg.minival_samples, &mut seeded(cfg.seed ^ 0x3111));
            let mut failure = None;
            let (best, _) = tune_scalar(cands, |s| {
                match prepare_target(cfg, &source, &params, cfg.target, Some(s))
                    .and_then(|(p, tp)| log_likelihood(&tp, &p, cfg.target, &minival))
                {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            Some(best)
        }
        _ => cfg.target_scalar,
    };
    let (target, target_params) = prepare_target(cfg, &source, &params, cfg.target, scalar)?;
    let tgt_eval = evaluate(cfg, &target_params, &target, cfg.target, &mut eval_rng)?;

    let (mut metrics, mut maps) = diagnostics(cfg, &params, &source, cfg.source, "source", &mut eval_rng)?;
    let (m2, p2) = diagnostics(cfg, &target_params, &target, cfg.target, "target", &mut eval_rng)?;
    metrics.extend(m2);
    maps.extend(p2);

    Ok(DemoReport {
        method: cfg.encoding.name().to_string(),
        seed: cfg.seed,
        final_loss,
        target_scalar: scalar,
        source: src_eval,
        target: tgt_eval,
        metrics,
        maps,
    })
}
