//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fail.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use common::{oracle_shape, oracle_slope, oracle_value, OracleCase, OracleShape};
use lookhere::analysis::{attention_distance, ece, head_jsd, patch_similarity, ECE_BINS};
use lookhere::attention::{attend, attend_backward, grad_check, AttendInputs, ParamSet};
use lookhere::bias_field::{
    alibi_slopes, build_alibi_2d, build_lookhere, init_rpe_table, query_visible_fraction, replace_undirected,
    rpe_to_field, BiasField, Direction, DistanceExponent, Fov, HeadSpec, LookHereVariant, MaskMode, PenaltyConfig,
    SlopeConfig, WedgeHalf,
};
use lookhere::demo::{run_demo, DemoConfig, DemoEncoding};
use lookhere::extrapolate::{adapt, interpolate_rpe, AdaptPlan, EncodingState, Method, TuningRecord, REFERENCE_TUNING};
use lookhere::pos_embed::{resize_bilinear, EmbeddingFamily, EmbeddingTable};
use lookhere::rope::{Rotary, RotaryConfig, DEFAULT_BASE};
use lookhere::{ModelDims, PatchGrid};
use ndarray::{Array2, Array3, Axis};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grid(y: usize, x: usize) -> PatchGrid {
    PatchGrid::new(y, x).unwrap()
}

fn dims(depth: usize, heads: usize, head_dim: usize) -> ModelDims {
    ModelDims::new(depth, heads, heads * head_dim, 16).unwrap()
}

// ---------------------------------------------------------------- 1

/// Directed heads of each variant, written out by hand.
fn oracle_specs(variant: LookHereVariant) -> Vec<HeadSpec> {
    use Direction::*;
    let mut specs: Vec<HeadSpec> = match variant {
        LookHereVariant::Lh45 => [Up, Down, Left, Right]
            .iter()
            .flat_map(|&d| [HeadSpec::half(d, WedgeHalf::First), HeadSpec::half(d, WedgeHalf::Second)])
            .collect(),
        _ => [Up, Down, Left, Right, UpRight, DownRight, DownLeft, UpLeft]
            .iter()
            .map(|&d| HeadSpec::directed(d, variant.fov()).unwrap())
            .collect(),
    };
    specs.extend([HeadSpec::Undirected; 4]);
    specs
}

fn ablation_cases(variant: LookHereVariant) -> Vec<OracleCase> {
    let specs = oracle_specs(variant);
    let base = OracleCase {
        name: "default",
        specs: specs.clone(),
        s_g: 1.0,
        invert: false,
        exponent: 1.0,
        mask_zero: false,
        no_distance: false,
        undirected_no_distance: false,
    };
    let cardinal = |fov| {
        let mut s = specs.clone();
        for (k, d) in [Direction::Up, Direction::Down, Direction::Left, Direction::Right].into_iter().enumerate() {
            s[8 + k] = HeadSpec::directed(d, fov).unwrap();
        }
        s
    };
    vec![
        base.clone(),
        OracleCase { name: "undir->90", specs: cardinal(Fov::Deg90), ..base.clone() },
        OracleCase { name: "undir->180", specs: cardinal(Fov::Deg180), ..base.clone() },
        OracleCase { name: "undir->no dist", undirected_no_distance: true, ..base.clone() },
        OracleCase { name: "s_g 0.125", s_g: 0.125, ..base.clone() },
        OracleCase { name: "s_g 0.25", s_g: 0.25, ..base.clone() },
        OracleCase { name: "s_g 0.5", s_g: 0.5, ..base.clone() },
        OracleCase { name: "s_g 4", s_g: 4.0, ..base.clone() },
        OracleCase { name: "s_l invert", invert: true, ..base.clone() },
        OracleCase { name: "dist^2", exponent: 2.0, ..base.clone() },
        OracleCase { name: "sqrt dist", exponent: 0.5, ..base.clone() },
        OracleCase { name: "mask inf->0", mask_zero: true, ..base.clone() },
        OracleCase { name: "no dist", no_distance: true, ..base },
    ]
}

/// The library-side configuration for an ablation, built through the public knobs.
fn library_config(variant: LookHereVariant, case: &OracleCase) -> (Vec<HeadSpec>, SlopeConfig, PenaltyConfig) {
    let mut specs = variant.head_specs(12);
    match case.name {
        "undir->90" => specs = replace_undirected(&specs, Fov::Deg90).unwrap(),
        "undir->180" => specs = replace_undirected(&specs, Fov::Deg180).unwrap(),
        _ => {}
    }
    let slopes = SlopeConfig { invert_layers: case.invert, ..SlopeConfig::for_heads(&specs) }.with_global(case.s_g);
    let penalty = PenaltyConfig {
        exponent: match case.exponent {
            e if e == 2.0 => DistanceExponent::Square,
            e if e == 0.5 => DistanceExponent::Sqrt,
            _ => DistanceExponent::Linear,
        },
        no_distance: case.no_distance,
        undirected_no_distance: case.undirected_no_distance,
        mask_mode: if case.mask_zero { MaskMode::Zero } else { MaskMode::Hard },
    };
    (specs, slopes, penalty)
}

/// Displacement, bearing and distance for every (query, key) patch pair, row-major.
struct PairGeometry {
    pairs: Vec<(isize, isize, f64, f64)>,
}

impl PairGeometry {
    fn new(g: PatchGrid) -> Self {
        let coords: Vec<(isize, isize)> = g.patches().map(|(_, y, x)| (y as isize, x as isize)).collect();
        let pairs = coords
            .iter()
            .flat_map(|&(qy, qx)| {
                coords.iter().map(move |&(ky, kx)| {
                    let (dy, dx) = (ky - qy, kx - qx);
                    (dy, dx, common::bearing(dy, dx), ((dy * dy + dx * dx) as f64).sqrt())
                })
            })
            .collect();
        Self { pairs }
    }
}

fn compare_with_oracle(field: &BiasField<f64>, case: &OracleCase, geo: &PairGeometry) -> Result<(), String> {
    let (depth, heads) = (field.depth(), field.heads());
    let g = field.grid();
    let n = g.n();
    for h in 0..heads {
        let shapes: Vec<OracleShape> =
            geo.pairs.iter().map(|&(dy, dx, theta, dist)| oracle_shape(case, h, dy, dx, theta, dist)).collect();
        for l in 0..depth {
            let m = oracle_slope(case, l, h, depth);
            let panel = field.head(l, h);
            for t in 0..g.tokens() {
                ensure(panel[[0, t]] == 0.0 && panel[[t, 0]] == 0.0, || {
                    format!("{} grid {g} l{l} h{h}: CLS entry at token {t} is nonzero", case.name)
                })?;
            }
            for qi in 0..n {
                let row = panel.row(qi + 1);
                for kj in 0..n {
                    let want = oracle_value(case, shapes[qi * n + kj], m);
                    let got = row[kj + 1];
                    if got.to_bits() != want.to_bits() {
                        let (dy, dx, _, _) = geo.pairs[qi * n + kj];
                        return Err(format!(
                            "{} grid {g} l{l} h{h} displacement ({dy}, {dx}) at query {}: field {got} vs oracle {want}",
                            case.name,
                            qi + 1
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let variants = [LookHereVariant::Lh180, LookHereVariant::Lh90, LookHereVariant::Lh45];
    let grids: Vec<(PatchGrid, PairGeometry)> = (1..=16)
        .flat_map(|y| (1..=16).map(move |x| grid(y, x)))
        .map(|g| (g, PairGeometry::new(g)))
        .collect();
    let mut fields = 0;
    for variant in variants {
        if variant.head_specs(12) != oracle_specs(variant) {
            return Err(format!("{variant:?}: head layout differs from the hand-written one"));
        }
        for case in ablation_cases(variant) {
            let (specs, slopes, penalty) = library_config(variant, &case);
            if specs != case.specs {
                return Err(format!("{variant:?} {}: head layout differs from the hand-written one", case.name));
            }
            for (g, geo) in &grids {
                let g = *g;
                let field: BiasField<f64> = build_lookhere(g, &dims(3, 12, 4), &specs, &slopes, &penalty)
                    .map_err(|e| format!("{variant:?} {} grid {g}: {e}", case.name))?;
                compare_with_oracle(&field, &case, geo).map_err(|e| format!("{variant:?} {e}"))?;
                fields += 1;
            }
        }
    }
    Ok(format!("{fields} fields (3 variants × 13 configs × all 256 grids up to 16x16, L=3, H=12) match the oracle bit for bit"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let g = PatchGrid::square(101).unwrap();
    let specs = LookHereVariant::Lh45.head_specs(8);
    let mut fractions = Vec::new();
    for spec in &specs {
        let f = query_visible_fraction(g, spec, g.center()).map_err(|e| e.to_string())?;
        ensure((0.115..=0.135).contains(&f), || format!("{} sees {f}", spec.label()))?;
        fractions.push(f);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    Ok(format!("visible fraction per directed head {:.5}..{:.5} (mean {mean:.5})",
        fractions.iter().cloned().fold(f64::INFINITY, f64::min),
        fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max)))
}

// ---------------------------------------------------------------- 3

fn displacement_only(field: &BiasField<f64>, what: &str) -> Result<usize, String> {
    let g = field.grid();
    let coords: Vec<(isize, isize)> = g.patches().map(|(_, y, x)| (y as isize, x as isize)).collect();
    let mut checked = 0;
    for l in 0..field.depth() {
        for h in 0..field.heads() {
            let mut seen: HashMap<(isize, isize), u64> = HashMap::new();
            for (qi, q) in coords.iter().enumerate() {
                for (kj, k) in coords.iter().enumerate() {
                    let v = field.get(l, h, qi + 1, kj + 1).to_bits();
                    let d = (k.0 - q.0, k.1 - q.1);
                    let first = *seen.entry(d).or_insert(v);
                    ensure(first == v, || format!("{what} l{l} h{h}: displacement {d:?} takes two values"))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

fn criterion_3() -> Outcome {
    let g = PatchGrid::square(12).unwrap();
    let d = dims(12, 12, 4);
    let mut total = 0;
    for variant in [LookHereVariant::Lh180, LookHereVariant::Lh90, LookHereVariant::Lh45] {
        let specs = variant.head_specs(12);
        let f = build_lookhere(g, &d, &specs, &SlopeConfig::for_heads(&specs), &PenaltyConfig::default())
            .map_err(|e| e.to_string())?;
        total += displacement_only(&f, &format!("{variant:?}"))?;
    }
    let alibi = build_alibi_2d(g, &d, &alibi_slopes(12), 1.0).map_err(|e| e.to_string())?;
    total += displacement_only(&alibi, "2D-ALiBi")?;
    let table = init_rpe_table::<f64>(g, 12, 7).map_err(|e| e.to_string())?;
    let rpe = rpe_to_field(&table, g, 2).map_err(|e| e.to_string())?;
    total += displacement_only(&rpe, "RPE-learn")?;
    Ok(format!("{total} entries on 12x12 depend only on displacement"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let lh45 = LookHereVariant::Lh45.head_specs(8);
    let lh90 = LookHereVariant::Lh90.head_specs(8);
    let mut min_cover = usize::MAX;
    for dy in -15isize..=15 {
        for dx in -15isize..=15 {
            if dy == 0 && dx == 0 {
                ensure(lh45.iter().chain(&lh90).all(|s| s.visible((0, 0))), || "self not visible".into())?;
                continue;
            }
            let n45 = lh45.iter().filter(|s| s.visible((dy, dx))).count();
            ensure(n45 == 1, || format!("LH-45: ({dy}, {dx}) seen by {n45} heads"))?;
            let n90 = lh90.iter().filter(|s| s.visible((dy, dx))).count();
            ensure(n90 >= 1, || format!("LH-90: ({dy}, {dx}) seen by no head"))?;
            min_cover = min_cover.min(n90);
        }
    }
    Ok(format!("960 nonzero displacements: LH-45 exactly one head each, LH-90 at least {min_cover}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let small = PatchGrid::square(14).unwrap();
    let large = PatchGrid::square(28).unwrap();
    let d = dims(3, 12, 4);
    let mut checked = 0usize;
    for variant in [LookHereVariant::Lh180, LookHereVariant::Lh90, LookHereVariant::Lh45] {
        let specs = variant.head_specs(12);
        let slopes = SlopeConfig::for_heads(&specs);
        let a: BiasField<f64> =
            build_lookhere(small, &d, &specs, &slopes, &PenaltyConfig::default()).map_err(|e| e.to_string())?;
        let b: BiasField<f64> =
            build_lookhere(large, &d, &specs, &slopes, &PenaltyConfig::default()).map_err(|e| e.to_string())?;
        for (oy, ox) in [(0, 0), (14, 14), (7, 3), (0, 14)] {
            let lift = |i: usize| {
                let (y, x) = small.coords(i).unwrap();
                large.index(y + oy, x + ox).unwrap()
            };
            for l in 0..3 {
                for h in 0..12 {
                    for i in 1..small.tokens() {
                        for j in 1..small.tokens() {
                            let (u, v) = (a.get(l, h, i, j), b.get(l, h, lift(i), lift(j)));
                            ensure(u.to_bits() == v.to_bits(), || {
                                format!("{variant:?} l{l} h{h} ({i}, {j}) offset ({oy}, {ox}): {u} vs {v}")
                            })?;
                            checked += 1;
                        }
                    }
                    ensure(a.get(l, h, 0, 1) == b.get(l, h, 0, 1), || "CLS entries differ".into())?;
                }
            }
        }
    }
    Ok(format!("{checked} displacement-matched pairs agree exactly"))
}

// ---------------------------------------------------------------- 6

fn naive_attention(q: &Array3<f64>, k: &Array3<f64>, v: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
    let (h, t, dh) = q.dim();
    let mut weights = Array3::zeros((h, t, t));
    let mut out = Array2::zeros((t, h * dh));
    for head in 0..h {
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[[head, i, c]] * k[[head, j, c]];
                }
                logits[j] = dot / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t {
                weights[[head, i, j]] = exps[j] / z;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += weights[[head, i, j]] * v[[head, j, c]];
                }
                out[[i, head * dh + c]] = acc;
            }
        }
    }
    (weights, out)
}

const FD_STEP: f64 = 1e-4;

fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gradient of `Σ outputs ⊙ r` with respect to the subtracted bias, checked
/// by central differences on every visible entry.
fn bias_grad_error(
    inputs: &AttendInputs<f64>,
    bias: &Array3<f64>,
    r: &Array2<f64>,
    analytic: &Array3<f64>,
) -> Result<f64, String> {
    let loss = |b: &Array3<f64>| -> f64 {
        let out = attend(inputs.q.view(), inputs.k.view(), inputs.v.view(), Some(b.view()), None).unwrap();
        (&out.outputs * r).sum()
    };
    let eps = FD_STEP;
    let mut work = bias.clone();
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(bias.raw_dim()) {
        let orig = bias[idx];
        if orig.is_infinite() {
            ensure(analytic[idx] == 0.0, || format!("masked bias entry {idx:?} has gradient {}", analytic[idx]))?;
            continue;
        }
        work[idx] = orig + eps;
        let plus = loss(&work);
        work[idx] = orig - eps;
        let minus = loss(&work);
        work[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn criterion_6() -> Outcome {
    let mut r = common::rng(6);
    let (h, g) = (4, PatchGrid::new(3, 4).unwrap());
    let t = g.tokens();
    let dh = 8;
    let q = common::uniform3(&mut r, (h, t, dh));
    let k = common::uniform3(&mut r, (h, t, dh));
    let v = common::uniform3(&mut r, (h, t, dh));

    // zero-bias path against the naive loops
    let (w_ref, o_ref) = naive_attention(&q, &k, &v);
    let plain = attend(q.view(), k.view(), v.view(), None, None).map_err(|e| e.to_string())?;
    let zeros = Array3::zeros((h, t, t));
    let zero_bias = attend(q.view(), k.view(), v.view(), Some(zeros.view()), None).map_err(|e| e.to_string())?;
    let ref_err = [
        max_abs_diff(&plain.weights, &w_ref),
        max_abs_diff(&plain.outputs, &o_ref),
        max_abs_diff(&zero_bias.weights, &w_ref),
        max_abs_diff(&zero_bias.outputs, &o_ref),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    ensure(ref_err <= 1e-12, || format!("zero-bias path differs from reference by {ref_err:e}"))?;

    // LookHere-biased rows: normalized, masked weights exactly zero
    let lg = PatchGrid::square(6).unwrap();
    let lt = lg.tokens();
    let specs = LookHereVariant::Lh45.head_specs(12);
    let field: BiasField<f64> =
        build_lookhere(lg, &dims(1, 12, dh), &specs, &SlopeConfig::for_heads(&specs), &PenaltyConfig::default())
            .map_err(|e| e.to_string())?;
    let bias = field.layer(0).to_owned();
    let lq = common::uniform3(&mut r, (12, lt, dh));
    let lk = common::uniform3(&mut r, (12, lt, dh));
    let lv = common::uniform3(&mut r, (12, lt, dh));
    let res = attend(lq.view(), lk.view(), lv.view(), Some(bias.view()), None).map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    let mut masked = 0;
    for (idx, &b) in bias.indexed_iter() {
        if b == f64::INFINITY {
            masked += 1;
            ensure(res.weights[idx] == 0.0, || format!("masked entry {idx:?} has weight {}", res.weights[idx]))?;
        }
    }
    for row in res.weights.lanes(Axis(2)) {
        worst_sum = worst_sum.max((row.sum() - 1.0).abs());
    }
    ensure(worst_sum <= 1e-9, || format!("row sum off by {worst_sum:e}"))?;
    ensure(masked > 0, || "test field has no masked entries".into())?;

    // gradient checks: LookHere bias path (inputs and bias) and rotary path
    let upstream = common::uniform2(&mut r, lt, 12 * dh);
    let inputs = AttendInputs { q: lq, k: lk, v: lv };
    let grads = attend_backward(
        inputs.q.view(),
        inputs.k.view(),
        inputs.v.view(),
        Some(bias.view()),
        None,
        upstream.view(),
    )
    .map_err(|e| e.to_string())?;
    let as_inputs = AttendInputs { q: grads.dq.clone(), k: grads.dk.clone(), v: grads.dv.clone() };
    let loss = |p: &AttendInputs<f64>| {
        let out = attend(p.q.view(), p.k.view(), p.v.view(), Some(bias.view()), None).unwrap();
        (&out.outputs * &upstream).sum()
    };
    // losses here are O(10), so a 1e-6 step leaves ~1e-9 of rounding noise in
    // each difference; 1e-4 keeps both rounding and truncation well below tolerance
    let bias_path = grad_check(&inputs, &as_inputs, loss, FD_STEP, inputs.num_params(), 1);
    let dbias_err = bias_grad_error(&inputs, &bias, &upstream, &grads.dbias)?;

    let rot = Rotary::<f64>::new(RotaryConfig::new(dh, DEFAULT_BASE, g).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let rinputs = AttendInputs { q, k, v };
    let rup = common::uniform2(&mut r, t, h * dh);
    let rgrads = attend_backward(rinputs.q.view(), rinputs.k.view(), rinputs.v.view(), None, Some(&rot), rup.view())
        .map_err(|e| e.to_string())?;
    let ras = AttendInputs { q: rgrads.dq, k: rgrads.dk, v: rgrads.dv };
    let rloss = |p: &AttendInputs<f64>| {
        let out = attend(p.q.view(), p.k.view(), p.v.view(), None, Some(&rot)).unwrap();
        (&out.outputs * &rup).sum()
    };
    let rotary_path = grad_check(&rinputs, &ras, rloss, FD_STEP, rinputs.num_params(), 2);

    let worst = bias_path.max_rel_err.max(dbias_err).max(rotary_path.max_rel_err);
    ensure(worst < 1e-4, || {
        format!(
            "gradient check: bias path {:e}, d(bias) {:e}, rotary path {:e}",
            bias_path.max_rel_err, dbias_err, rotary_path.max_rel_err
        )
    })?;
    Ok(format!(
        "reference {ref_err:.1e}; row sums {worst_sum:.1e}; {masked} masked weights exactly 0; \
         grad rel err bias {:.1e}, d(bias) {dbias_err:.1e}, rotary {:.1e}",
        bias_path.max_rel_err, rotary_path.max_rel_err
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let g = PatchGrid::square(12).unwrap();
    let dh = 16;
    let rot = Rotary::<f64>::new(RotaryConfig::new(dh, DEFAULT_BASE, g).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut r = common::rng(7);

    let x = common::uniform2(&mut r, g.tokens(), dh);
    let y = rot.rotate(x.view());
    let norm_err = x
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(a, b)| (a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs())
        .fold(0.0, f64::max);
    ensure(norm_err <= 1e-12, || format!("norm changed by {norm_err:e}"))?;

    // one query vector and one key vector placed at every position
    let qv = common::uniform2(&mut r, 1, dh);
    let kv = common::uniform2(&mut r, 1, dh);
    let rq = rot.rotate(qv.broadcast((g.tokens(), dh)).unwrap());
    let rk = rot.rotate(kv.broadcast((g.tokens(), dh)).unwrap());
    let mut by_disp: HashMap<(isize, isize), f64> = HashMap::new();
    let mut shift_err: f64 = 0.0;
    for (i, iy, ix) in g.patches() {
        for (j, jy, jx) in g.patches() {
            let dot = rq.row(i).dot(&rk.row(j));
            let d = (jy as isize - iy as isize, jx as isize - ix as isize);
            let first = *by_disp.entry(d).or_insert(dot);
            shift_err = shift_err.max((first - dot).abs());
        }
    }
    ensure(shift_err <= 1e-10, || format!("rotated dot products vary by {shift_err:e} at fixed displacement"))?;

    let source = PatchGrid::square(14).unwrap();
    let start = RotaryConfig::new(64, DEFAULT_BASE, source).map_err(|e| e.to_string())?;
    ensure(REFERENCE_TUNING[0].rope_base == 100.0 && REFERENCE_TUNING[6].rope_base == 1250.0, || {
        "reference bases do not run 100 to 1250".into()
    })?;
    for row in REFERENCE_TUNING {
        let target = PatchGrid::square(row.grid_side).map_err(|e| e.to_string())?;
        let plan = AdaptPlan::new(Method::Rope2d, source, target, Some(row.rope_base)).map_err(|e| e.to_string())?;
        let EncodingState::Rotary(cfg) = adapt::<f64>(&plan, &EncodingState::Rotary(start)).map_err(|e| e.to_string())?
        else {
            return Err("rotary adapt returned another state".into());
        };
        ensure(cfg.base_freq == row.rope_base && cfg.grid == target, || format!("retune to {} lost", row.rope_base))?;
        let json = serde_json::to_string(&cfg).map_err(|e| e.to_string())?;
        let back: RotaryConfig = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        ensure(back == cfg, || format!("config {json} did not round-trip"))?;
        let record = TuningRecord::new(&plan, None);
        let back: TuningRecord =
            serde_json::from_str(&serde_json::to_string(&record).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back.scalar == Some(row.rope_base), || "tuning record lost the base".into())?;
        Rotary::<f64>::new(cfg).map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "norm err {norm_err:.1e}; shift err {shift_err:.1e}; 7 reference bases (100..1250) retuned and round-tripped"
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut r = common::rng(8);
    let g = PatchGrid::new(5, 7).unwrap();
    let table = EmbeddingTable::new(g, EmbeddingFamily::Learned1d, common::uniform2(&mut r, g.n(), 6))
        .map_err(|e| e.to_string())?;
    let same = resize_bilinear(&table, g).map_err(|e| e.to_string())?;
    ensure(same.values().iter().zip(table.values()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
        "resampling to the source grid changed values".into()
    })?;

    let c = 0.3712;
    let flat = EmbeddingTable::new(g, EmbeddingFamily::Learned1d, Array2::from_elem((g.n(), 6), c))
        .map_err(|e| e.to_string())?;
    for target in [grid(9, 13), grid(16, 16), grid(2, 3), grid(1, 1)] {
        let out = resize_bilinear(&flat, target).map_err(|e| e.to_string())?;
        ensure(out.values().iter().all(|&v| v == c), || format!("constant not preserved at {target}"))?;
    }

    // a=1, b=2, c=3, d=6: the center of the 3x3 result is (1+2+3+6)/4 = 3
    let corners = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let two = EmbeddingTable::new(grid(2, 2), EmbeddingFamily::Learned1d, corners).map_err(|e| e.to_string())?;
    let three = resize_bilinear(&two, grid(3, 3)).map_err(|e| e.to_string())?;
    let center = three.values()[[4, 0]];
    ensure(center == 3.0, || format!("center is {center}, expected 3"))?;

    let rpe = init_rpe_table::<f64>(g, 3, 11).map_err(|e| e.to_string())?;
    let rpe_same = interpolate_rpe(&rpe, g).map_err(|e| e.to_string())?;
    ensure(rpe_same == rpe, || "relative table changed when resampled to its own grid".into())?;

    Ok(format!("identity bit-exact; constants exact on 4 targets; 2x2->3x3 center {center}"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let h = 4;
    let t = 5;
    // identical heads: every head uses the same rows
    let same = Array3::from_shape_fn((h, t, t), |(_, i, j)| if j == i { 0.5 } else { 0.125 });
    let low = head_jsd(same.view()).map_err(|e| e.to_string())?;
    ensure(low == 0.0, || format!("identical heads give JSD {low}"))?;
    // each head puts all mass on a different key
    let disjoint = Array3::from_shape_fn((h, t, t), |(head, _, j)| if j == head { 1.0 } else { 0.0 });
    let high = head_jsd(disjoint.view()).map_err(|e| e.to_string())?;
    ensure((high - (h as f64).ln()).abs() <= 1e-12, || format!("disjoint heads give {high}, expected ln 4"))?;

    let mut r = common::rng(9);
    // 3 heads, 4 tokens against the formula written out term by term
    let raw = common::uniform3(&mut r, (3, 4, 4)).mapv(f64::exp);
    let w3 = &raw / &raw.sum_axis(Axis(2)).insert_axis(Axis(2));
    let mut want = 0.0;
    for row in 0..4 {
        let mut mixed_entropy = 0.0;
        let mut mean_entropy = 0.0;
        for col in 0..4 {
            let p = (w3[[0, row, col]] + w3[[1, row, col]] + w3[[2, row, col]]) / 3.0;
            mixed_entropy -= p * p.ln();
            for head in 0..3 {
                let q = w3[[head, row, col]];
                mean_entropy -= q * q.ln() / 3.0;
            }
        }
        want += (mixed_entropy - mean_entropy) / 4.0;
    }
    let jsd_err = (head_jsd(w3.view()).map_err(|e| e.to_string())? - want).abs();
    ensure(jsd_err <= 1e-12, || format!("3-head JSD off by {jsd_err:e}"))?;

    let g = PatchGrid::new(4, 5).unwrap();
    let tt = g.tokens();
    let mut worst_dist: f64 = 0.0;
    let mut worst_sim: f64 = 0.0;
    for _ in 0..20 {
        let raw = common::uniform3(&mut r, (h, tt, tt)).mapv(f64::exp);
        let w = &raw / &raw.sum_axis(Axis(2)).insert_axis(Axis(2));
        let j = head_jsd(w.view()).map_err(|e| e.to_string())?;
        ensure((0.0..=(h as f64).ln()).contains(&j), || format!("JSD {j} outside [0, ln H]"))?;

        // attention distance: mean over heads and patch queries of Σ_j a_ij ‖p_i − p_j‖
        let mut acc = 0.0;
        for head in 0..h {
            for i in 1..tt {
                let (iy, ix) = (((i - 1) / 5) as f64, ((i - 1) % 5) as f64);
                for jj in 1..tt {
                    let (jy, jx) = (((jj - 1) / 5) as f64, ((jj - 1) % 5) as f64);
                    acc += w[[head, i, jj]] * (iy - jy).hypot(ix - jx);
                }
            }
        }
        let want = acc / (h * (tt - 1)) as f64;
        let got = attention_distance(w.view(), g).map_err(|e| e.to_string())?;
        worst_dist = worst_dist.max((got - want).abs());

        let reps = common::uniform2(&mut r, 9, 6);
        let unit: Vec<Vec<f64>> = reps
            .rows()
            .into_iter()
            .map(|row| {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for a in 0..9 {
            for b in 0..9 {
                if a != b {
                    sum += unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
                    pairs += 1.0;
                }
            }
        }
        let got = patch_similarity(reps.view()).map_err(|e| e.to_string())?;
        worst_sim = worst_sim.max((got - sum / pairs).abs());
    }
    ensure(worst_dist <= 1e-12, || format!("attention distance off by {worst_dist:e}"))?;
    ensure(worst_sim <= 1e-12, || format!("patch similarity off by {worst_sim:e}"))?;

    let e = ece(&[0.9, 0.9], &[false, true], ECE_BINS).map_err(|e| e.to_string())?;
    ensure(e == 0.4, || format!("ECE hand case gives {e}"))?;
    Ok(format!(
        "JSD extremes 0 and {high:.12}, oracle err {jsd_err:.1e}; distance err {worst_dist:.1e}; similarity err {worst_sim:.1e}; ECE {e}"
    ))
}

// ---------------------------------------------------------------- 10

const SEEDS: [u64; 3] = [0, 1, 2];

/// The small demo setup, trimmed to fit the time budget on one core. Layer
/// diagnostics are not scored here, so they use only a couple of samples.
fn smoke_config(encoding: DemoEncoding, seed: u64) -> DemoConfig {
    let mut cfg = DemoConfig::small(encoding, seed);
    cfg.train.steps = 200;
    cfg.metric_samples = 2;
    cfg
}

fn criterion_10() -> Outcome {
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut lh = smoke_config(DemoEncoding::lookhere(LookHereVariant::Lh90.head_specs(4)), seed);
        lh.tune_candidates = Some(vec![0.5, 1.0]);
        let learned = smoke_config(DemoEncoding::Learned1d, seed);
        let a = run_demo::<f32>(&lh).map_err(|e| format!("seed {seed} LookHere: {e}"))?;
        let b = run_demo::<f32>(&learned).map_err(|e| format!("seed {seed} learned: {e}"))?;
        let ok = a.source.accuracy >= 0.9 && a.target.accuracy >= b.target.accuracy;
        passes += ok as usize;
        lines.push(format!(
            "seed {seed}: LH source {:.3} target {:.3} (s_g {}), learned source {:.3} target {:.3} [{}]",
            a.source.accuracy,
            a.target.accuracy,
            a.target_scalar.map_or("-".into(), |s| s.to_string()),
            b.source.accuracy,
            b.target.accuracy,
            if ok { "ok" } else { "miss" }
        ));
    }
    let summary = format!("{passes}/{} seeds pass; {}", SEEDS.len(), lines.join("; "));
    if 2 * passes > SEEDS.len() {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    // `cargo test -- --list` and friends expect a listing, not a run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("mask-oracle equivalence", criterion_1, Duration::from_secs(60)),
        ("LH-45 sparsity anchor", criterion_2, Duration::from_secs(5)),
        ("translation equivariance", criterion_3, Duration::MAX),
        ("LH-45 partition / LH-90 cover", criterion_4, Duration::MAX),
        ("grid-extension consistency", criterion_5, Duration::MAX),
        ("attention correctness", criterion_6, Duration::MAX),
        ("rotary properties", criterion_7, Duration::MAX),
        ("interpolation", criterion_8, Duration::MAX),
        ("metrics", criterion_9, Duration::MAX),
        ("synthetic extrapolation", criterion_10, Duration::from_secs(600)),
    ];
    // numeric arguments select criteria, e.g. `cargo test --test acceptance -- 1 6`
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, run, budget)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("took {took:.1?}, budget {budget:?}; {detail}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({:.1?}): {detail}", k + 1, took),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({:.1?}): {detail}", k + 1, took);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
