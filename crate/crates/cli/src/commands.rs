//! Command implementations. Each returns the text to print on stdout.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use lookhere::bias_field::{
    alibi_slopes, init_rpe_table, query_visible_fraction, replace_undirected, rpe_to_field, BiasField, Fov, HeadSpec,
    LookHereVariant, SlopeConfig,
};
use lookhere::demo::{run_demo, untrained_diagnostics, AttentionMap, DemoConfig, DemoEncoding};
use lookhere::extrapolate::{adapt, AdaptPlan, AlibiRecipe, EncodingState, LookHereRecipe, Method, TuningRecord};
use lookhere::io::{query_bias_panel, write_embedding, write_field, write_field_csv, write_pgm};
use lookhere::pos_embed::{factorized_init, learned_1d_init, sincos_2d, FourierConfig, FourierEmbedding};
use lookhere::rope::{RotaryConfig, DEFAULT_BASE};
use lookhere::{Error, PatchGrid, Result};

use crate::config::{Settings, UndirectedArg, Variant};

/// Largest field the CLI will materialize.
const MAX_FIELD_BYTES: usize = 2 << 30;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

fn check_field_size(s: &Settings, grid: PatchGrid) -> Result<()> {
    let t = grid.tokens();
    let bytes = s.dims.depth * s.dims.heads * t * t * 4;
    if bytes > MAX_FIELD_BYTES {
        return invalid(format!(
            "a {}x{} field on {grid} needs {} MiB; reduce --layers, --heads or the grid",
            s.dims.depth,
            s.dims.heads,
            bytes >> 20
        ));
    }
    Ok(())
}

fn reject_lookhere_knobs(s: &Settings) -> Result<()> {
    let default_penalty = lookhere::bias_field::PenaltyConfig::default();
    if s.fov.is_some() || s.invert_sl || s.undirected != UndirectedArg::Keep || s.penalty != default_penalty {
        return invalid(format!(
            "--fov, --invert-sl, --undirected, --penalty-exp and --mask-mode apply only to lh* variants, not {}",
            s.variant.name()
        ));
    }
    Ok(())
}

fn head_specs(s: &Settings, v: LookHereVariant) -> Result<Vec<HeadSpec>> {
    let specs = v.head_specs(s.dims.heads);
    match s.undirected {
        UndirectedArg::Fov90 => replace_undirected(&specs, Fov::Deg90),
        UndirectedArg::Fov180 => replace_undirected(&specs, Fov::Deg180),
        _ => Ok(specs),
    }
}

/// LookHere recipe from the knobs; `global` overrides `--s-g`.
fn lookhere_recipe(s: &Settings, v: LookHereVariant, global: Option<f64>) -> Result<LookHereRecipe> {
    let specs = head_specs(s, v)?;
    let mut slopes = SlopeConfig::for_heads(&specs);
    if let Some(g) = global.or(s.s_g) {
        slopes.global = g;
    }
    slopes.invert_layers = s.invert_sl;
    Ok(LookHereRecipe { dims: s.dims, specs, slopes, penalty: s.penalty })
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_panels(dir: &Path, maps: &[AttentionMap]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in maps {
        write_pgm(&dir.join(format!("attn_{}_l{}_h{}.pgm", m.tag, m.layer, m.head)), m.panel.view())?;
    }
    Ok(())
}

pub fn gen_bias(s: &Settings) -> Result<String> {
    check_field_size(s, s.grid)?;
    let field: BiasField<f32> = match s.variant {
        v @ (Variant::Lh180 | Variant::Lh90 | Variant::Lh45) => {
            lookhere_recipe(s, v.lookhere().expect("lh variant"), None)?.build(s.grid)?
        }
        Variant::Alibi2d => {
            reject_lookhere_knobs(s)?;
            AlibiRecipe { dims: s.dims, head_slopes: alibi_slopes(s.dims.heads), global: s.s_g.unwrap_or(1.0) }
                .build(s.grid)?
        }
        Variant::RpeLearn => {
            reject_lookhere_knobs(s)?;
            rpe_to_field(&init_rpe_table(s.grid, s.dims.heads, s.seed)?, s.grid, s.dims.depth)?
        }
        other => return invalid(format!("gen-bias supports lh180, lh90, lh45, alibi_2d and rpe_learn, not {}", other.name())),
    };
    create_parent(&s.out)?;
    write_field(&s.out, &field)?;
    if let Some(dir) = &s.csv {
        write_field_csv(dir, "bias", &field)?;
    }
    if let Some(dir) = &s.pgm {
        fs::create_dir_all(dir)?;
        let center = s.grid.center();
        for l in 0..field.depth() {
            for h in 0..field.heads() {
                write_pgm(&dir.join(format!("bias_l{l}_h{h}.pgm")), query_bias_panel(&field, l, h, center).view())?;
            }
        }
    }
    let masked: Vec<f64> = (0..field.heads()).map(|h| field.masked_fraction(0, h)).collect::<Result<_>>()?;
    let line = json!({
        "command": "gen-bias",
        "variant": s.variant.name(),
        "grid": s.grid.to_string(),
        "layers": field.depth(),
        "heads": field.heads(),
        "tokens": field.tokens(),
        "masked_fraction": masked,
        "out": s.out.display().to_string(),
    });
    Ok(format!("{line}\n"))
}

/// Patch pairs of `grid` visible to `spec`, counted per displacement.
fn visible_pairs(grid: PatchGrid, spec: &HeadSpec) -> f64 {
    let (ny, nx) = (grid.n_y() as isize, grid.n_x() as isize);
    let mut total = 0.0;
    for dy in -(ny - 1)..ny {
        for dx in -(nx - 1)..nx {
            if spec.visible((dy, dx)) {
                total += ((ny - dy.abs()) * (nx - dx.abs())) as f64;
            }
        }
    }
    total
}

pub fn sparsity(s: &Settings) -> Result<String> {
    let Some(v) = s.variant.lookhere() else {
        return invalid(format!("sparsity needs an lh* variant, got {}", s.variant.name()));
    };
    let specs = head_specs(s, v)?;
    let n = s.grid.n() as f64;
    let center = s.grid.center();
    let mut out = String::new();
    let mut mean = 0.0;
    for (h, spec) in specs.iter().enumerate() {
        let masked = 1.0 - visible_pairs(s.grid, spec) / (n * n);
        mean += masked / specs.len() as f64;
        let line = json!({
            "head": h,
            "label": spec.label(),
            "center_visible_fraction": query_visible_fraction(s.grid, spec, center)?,
            "masked_fraction": masked,
            "grid": s.grid.to_string(),
        });
        out.push_str(&format!("{line}\n"));
    }
    out.push_str(&format!("{}\n", json!({ "variant": s.variant.name(), "grid": s.grid.to_string(), "mean_masked_fraction": mean })));
    Ok(out)
}

fn demo_encoding(s: &Settings) -> Result<DemoEncoding> {
    Ok(match s.variant {
        v @ (Variant::Lh180 | Variant::Lh90 | Variant::Lh45) => {
            let r = lookhere_recipe(s, v.lookhere().expect("lh variant"), None)?;
            DemoEncoding::LookHere { specs: r.specs, slopes: r.slopes, penalty: r.penalty }
        }
        other => {
            reject_lookhere_knobs(s)?;
            match other {
                Variant::None => DemoEncoding::None,
                Variant::Learned1d => DemoEncoding::Learned1d,
                Variant::Sincos2d => DemoEncoding::Sincos2d,
                Variant::Alibi2d => DemoEncoding::Alibi2d { global: s.s_g.unwrap_or(1.0) },
                Variant::Rope2d => DemoEncoding::Rope2d { base: s.base.unwrap_or(DEFAULT_BASE) },
                _ => {
                    return invalid(format!(
                        "the demo model supports lh*, alibi_2d, rope_2d, learned_1d, sincos_2d and none, not {}",
                        other.name()
                    ))
                }
            }
        }
    })
}

fn demo_config(s: &Settings) -> Result<DemoConfig> {
    let enc = demo_encoding(s)?;
    let method = match &enc {
        DemoEncoding::LookHere { .. } => Some(Method::LookHere),
        DemoEncoding::Alibi2d { .. } => Some(Method::Alibi2d),
        DemoEncoding::Rope2d { .. } => Some(Method::Rope2d),
        _ => None,
    };
    let mut cfg = DemoConfig::small(enc, s.seed);
    cfg.dims = s.dims;
    cfg.source = s.grid;
    cfg.target = s.target;
    if let Some(steps) = s.steps {
        cfg.train.steps = steps;
    }
    cfg.tune_candidates = method.and_then(Method::default_candidates);
    cfg.validate()?;
    Ok(cfg)
}

pub fn demo(s: &Settings) -> Result<String> {
    let cfg = demo_config(s)?;
    let report = run_demo::<f32>(&cfg)?;
    let lines = report.to_json_lines()?;
    fs::create_dir_all(&s.out)?;
    fs::write(s.out.join("metrics.jsonl"), &lines)?;
    write_panels(&s.pgm.clone().unwrap_or_else(|| s.out.clone()), &report.maps)?;
    Ok(lines.lines().next().map(|l| format!("{l}\n")).unwrap_or_default())
}

pub fn analyze(s: &Settings) -> Result<String> {
    let cfg = demo_config(s)?;
    let (metrics, maps) = untrained_diagnostics::<f32>(&cfg)?;
    let mut lines = String::new();
    for m in &metrics {
        lines.push_str(&m.to_json_lines()?);
    }
    if let Some(dir) = &s.pgm {
        write_panels(dir, &maps)?;
    }
    if s.out.as_os_str() == "-" {
        return Ok(lines);
    }
    create_parent(&s.out)?;
    fs::write(&s.out, &lines)?;
    Ok(String::new())
}

fn method_of(v: Variant) -> Result<Method> {
    Ok(match v {
        Variant::Lh180 | Variant::Lh90 | Variant::Lh45 => Method::LookHere,
        Variant::Alibi2d => Method::Alibi2d,
        Variant::Rope2d => Method::Rope2d,
        Variant::RpeLearn => Method::RpeLearn,
        Variant::Learned1d => Method::Learned1d,
        Variant::Sincos2d => Method::Sincos2d,
        Variant::Factorized => Method::Factorized,
        Variant::Fourier => Method::Fourier,
        Variant::None => return invalid("adapt needs a position encoding variant"),
    })
}

fn record_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".record.json");
    PathBuf::from(p)
}

pub fn adapt_cmd(s: &Settings) -> Result<String> {
    let method = method_of(s.variant)?;
    let d = s.dims.width;
    if method != Method::LookHere {
        reject_lookhere_knobs(s)?;
    }
    if matches!(method, Method::LookHere | Method::Alibi2d | Method::RpeLearn) {
        check_field_size(s, s.grid)?;
        check_field_size(s, s.target)?;
    }
    let scalar = match method {
        Method::LookHere | Method::Alibi2d => s.s_g,
        Method::Rope2d => s.base,
        _ if s.s_g.is_some() || s.base.is_some() => {
            return invalid(format!("{method} has no tunable scalar"));
        }
        _ => None,
    };
    let state: EncodingState<f32> = match method {
        Method::LookHere => {
            EncodingState::lookhere(lookhere_recipe(s, s.variant.lookhere().expect("lh variant"), Some(1.0))?, s.grid)?
        }
        Method::Alibi2d => EncodingState::alibi(
            AlibiRecipe { dims: s.dims, head_slopes: alibi_slopes(s.dims.heads), global: 1.0 },
            s.grid,
        )?,
        Method::Rope2d => EncodingState::Rotary(RotaryConfig::new(s.dims.head_dim, DEFAULT_BASE, s.grid)?),
        Method::RpeLearn => EncodingState::Rpe { table: init_rpe_table(s.grid, s.dims.heads, s.seed)?, grid: s.grid },
        Method::Learned1d => EncodingState::Table(learned_1d_init(s.grid, d, s.seed)?),
        Method::Sincos2d => EncodingState::Table(sincos_2d(s.grid, d)?),
        Method::Factorized => EncodingState::Table(factorized_init(s.grid, d, s.seed)?),
        Method::Fourier => EncodingState::fourier(FourierEmbedding::init(d, FourierConfig::for_width(d), s.seed)?, s.grid)?,
    };
    let plan = AdaptPlan::new(method, s.grid, s.target, scalar)?;
    if plan.is_shrinking() {
        eprintln!("warning: target grid {} is smaller than source grid {}", s.target, s.grid);
    }
    let adapted = adapt(&plan, &state)?;
    create_parent(&s.out)?;
    match &adapted {
        EncodingState::Table(t) | EncodingState::Fourier { table: t, .. } => write_embedding(&s.out, t)?,
        EncodingState::LookHere { field, .. } | EncodingState::Alibi { field, .. } => write_field(&s.out, field)?,
        EncodingState::Rpe { table, grid } => write_field(&s.out, &rpe_to_field(table, *grid, s.dims.depth)?)?,
        EncodingState::Rotary(cfg) => fs::write(&s.out, serde_json::to_string_pretty(cfg)? + "\n")?,
    }
    let record = serde_json::to_string(&TuningRecord::new(&plan, None))?;
    fs::write(record_path(&s.out), format!("{record}\n"))?;
    Ok(format!("{record}\n"))
}
