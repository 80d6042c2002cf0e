//! Run configuration: a JSON file merged with command-line flags (flags win).

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use lookhere::bias_field::{DistanceExponent, Fov, LookHereVariant, MaskMode, PenaltyConfig};
use lookhere::{Error, ModelDims, PatchGrid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Variant {
    #[serde(rename = "lh180")]
    #[value(name = "lh180")]
    Lh180,
    #[serde(rename = "lh90")]
    #[value(name = "lh90")]
    Lh90,
    #[serde(rename = "lh45")]
    #[value(name = "lh45")]
    Lh45,
    #[serde(rename = "alibi_2d")]
    #[value(name = "alibi_2d")]
    Alibi2d,
    #[serde(rename = "rope_2d")]
    #[value(name = "rope_2d")]
    Rope2d,
    #[serde(rename = "rpe_learn")]
    #[value(name = "rpe_learn")]
    RpeLearn,
    #[serde(rename = "learned_1d")]
    #[value(name = "learned_1d")]
    Learned1d,
    #[serde(rename = "sincos_2d")]
    #[value(name = "sincos_2d")]
    Sincos2d,
    #[serde(rename = "factorized")]
    #[value(name = "factorized")]
    Factorized,
    #[serde(rename = "fourier")]
    #[value(name = "fourier")]
    Fourier,
    #[serde(rename = "none")]
    #[value(name = "none")]
    None,
}

impl Variant {
    pub fn lookhere(self) -> Option<LookHereVariant> {
        match self {
            Variant::Lh180 => Some(LookHereVariant::Lh180),
            Variant::Lh90 => Some(LookHereVariant::Lh90),
            Variant::Lh45 => Some(LookHereVariant::Lh45),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lh180 => "lh180",
            Variant::Lh90 => "lh90",
            Variant::Lh45 => "lh45",
            Variant::Alibi2d => "alibi_2d",
            Variant::Rope2d => "rope_2d",
            Variant::RpeLearn => "rpe_learn",
            Variant::Learned1d => "learned_1d",
            Variant::Sincos2d => "sincos_2d",
            Variant::Factorized => "factorized",
            Variant::Fourier => "fourier",
            Variant::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskArg {
    Hard,
    Zero,
}

/// What to do with undirected heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum UndirectedArg {
    #[serde(rename = "keep")]
    #[value(name = "keep")]
    Keep,
    /// Replace with 90° cardinal heads.
    #[serde(rename = "90")]
    #[value(name = "90")]
    Fov90,
    /// Replace with 180° cardinal heads.
    #[serde(rename = "180")]
    #[value(name = "180")]
    Fov180,
    /// Keep them but drop their distance penalty.
    #[serde(rename = "no-dist")]
    #[value(name = "no-dist")]
    NoDist,
}

fn parse_grid(s: &str) -> std::result::Result<PatchGrid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_penalty_exp(s: &str) -> std::result::Result<f64, String> {
    match s {
        "1" | "2" | "0.5" | "0" => Ok(s.parse().expect("literal")),
        _ => Err(format!("penalty exponent must be one of 1, 2, 0.5, 0 (got {s})")),
    }
}

/// Flags shared by every command. Unset flags fall back to `--config`, then to defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// JSON file with any of the fields below; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Patch grid, `NyxNx`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<PatchGrid>,
    /// Target patch grid, `NyxNx`.
    #[arg(long, value_parser = parse_grid)]
    pub target: Option<PatchGrid>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Model width (head width is width / heads).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Patch side in pixels.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Field of view of directed heads (must agree with an lh* variant).
    #[arg(long)]
    pub fov: Option<u32>,
    /// Global slope.
    #[arg(long = "s-g")]
    pub s_g: Option<f64>,
    /// Distance exponent: 1, 2, 0.5, or 0 for no distance penalty.
    #[arg(long = "penalty-exp", value_parser = parse_penalty_exp)]
    pub penalty_exp: Option<f64>,
    #[arg(long = "mask-mode", value_enum)]
    pub mask_mode: Option<MaskArg>,
    /// Run the layer slope schedule in reverse.
    #[arg(long = "invert-sl")]
    pub invert_sl: bool,
    #[arg(long, value_enum)]
    pub undirected: Option<UndirectedArg>,
    /// Rotary base frequency.
    #[arg(long)]
    pub base: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps (demo).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-head CSV dumps.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for PGM renders.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

/// The same fields as [`Flags`], as read from a JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    pub grid: Option<String>,
    pub target: Option<String>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub dim: Option<usize>,
    pub patch: Option<usize>,
    pub fov: Option<u32>,
    pub s_g: Option<f64>,
    pub penalty_exp: Option<f64>,
    pub mask_mode: Option<MaskArg>,
    pub invert_sl: Option<bool>,
    pub undirected: Option<UndirectedArg>,
    pub base: Option<f64>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub pgm: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }
}

/// Per-command fallbacks for unset dimensions.
#[derive(Clone, Copy, Debug)]
pub struct Defaults {
    pub variant: Variant,
    pub grid: (usize, usize),
    pub target: Option<(usize, usize)>,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch: usize,
    pub out: &'static str,
}

/// Fully resolved settings.
#[derive(Clone, Debug)]
pub struct Settings {
    pub variant: Variant,
    pub grid: PatchGrid,
    pub target: PatchGrid,
    pub dims: ModelDims,
    pub fov: Option<Fov>,
    pub s_g: Option<f64>,
    pub penalty: PenaltyConfig,
    pub invert_sl: bool,
    pub undirected: UndirectedArg,
    pub base: Option<f64>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub csv: Option<PathBuf>,
    pub pgm: Option<PathBuf>,
}

fn grid_field(s: Option<String>) -> Result<Option<PatchGrid>> {
    s.map(|g| g.parse()).transpose()
}

impl Flags {
    pub fn resolve(&self, d: Defaults) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let variant = self.variant.or(file.variant).unwrap_or(d.variant);
        let grid = match self.grid.or(grid_field(file.grid)?) {
            Some(g) => g,
            None => PatchGrid::new(d.grid.0, d.grid.1)?,
        };
        let target = match self.target.or(grid_field(file.target)?) {
            Some(g) => g,
            None => match d.target {
                Some((y, x)) => PatchGrid::new(y, x)?,
                None => grid,
            },
        };
        let layers = self.layers.or(file.layers).unwrap_or(d.layers);
        let heads = self.heads.or(file.heads).unwrap_or(d.heads);
        let dim = self.dim.or(file.dim).unwrap_or(d.dim);
        let patch = self.patch.or(file.patch).unwrap_or(d.patch);
        let dims = ModelDims::new(layers, heads, dim, patch)?;

        let fov = self.fov.or(file.fov).map(Fov::from_degrees).transpose()?;
        if let (Some(f), Some(v)) = (fov, variant.lookhere()) {
            if f != v.fov() {
                return Err(Error::InvalidArgument(format!(
                    "--fov {} conflicts with variant {}",
                    f.degrees(),
                    variant.name()
                )));
            }
        }

        let mut penalty = PenaltyConfig::default();
        match self.penalty_exp.or(file.penalty_exp) {
            None => {}
            Some(e) if e == 1.0 => penalty.exponent = DistanceExponent::Linear,
            Some(e) if e == 2.0 => penalty.exponent = DistanceExponent::Square,
            Some(e) if e == 0.5 => penalty.exponent = DistanceExponent::Sqrt,
            Some(e) if e == 0.0 => penalty.no_distance = true,
            Some(e) => return Err(Error::InvalidArgument(format!("penalty exponent must be 1, 2, 0.5 or 0, got {e}"))),
        }
        penalty.mask_mode = match self.mask_mode.or(file.mask_mode) {
            Some(MaskArg::Zero) => MaskMode::Zero,
            _ => MaskMode::Hard,
        };
        let undirected = self.undirected.or(file.undirected).unwrap_or(UndirectedArg::Keep);
        if undirected == UndirectedArg::NoDist {
            penalty.undirected_no_distance = true;
        }

        let s_g = self.s_g.or(file.s_g);
        if let Some(s) = s_g {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("--s-g must be positive, got {s}")));
            }
        }
        let base = self.base.or(file.base);
        if let Some(b) = base {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument(format!("--base must be positive, got {b}")));
            }
        }
        let steps = self.steps.or(file.steps);
        if steps == Some(0) {
            return Err(Error::InvalidArgument("--steps must be positive".into()));
        }

        Ok(Settings {
            variant,
            grid,
            target,
            dims,
            fov,
            s_g,
            penalty,
            invert_sl: self.invert_sl || file.invert_sl.unwrap_or(false),
            undirected,
            base,
            seed: self.seed.or(file.seed).unwrap_or(0),
            steps,
            out: self.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(d.out)),
            csv: self.csv.clone().or(file.csv),
            pgm: self.pgm.clone().or(file.pgm),
        })
    }
}
