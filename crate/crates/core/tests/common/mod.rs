//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use lookhere::bias_field::{Direction, Fov, HeadSpec, WedgeHalf};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

pub fn uniform3(r: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Head axis angle in radians, counter-clockwise from "right", y pointing down.
fn axis_angle(d: Direction) -> f64 {
    let deg: f64 = match d {
        Direction::Right => 0.0,
        Direction::UpRight => 45.0,
        Direction::Up => 90.0,
        Direction::UpLeft => 135.0,
        Direction::Left => 180.0,
        Direction::DownLeft => 225.0,
        Direction::Down => 270.0,
        Direction::DownRight => 315.0,
    };
    deg.to_radians()
}

// Lattice directions within a 16x16 grid sit at least ~4e-3 rad from any
// boundary ray, so this only absorbs rounding in atan2.
const ANGLE_EPS: f64 = 1e-9;

/// Bearing of displacement `(dy, dx)` in radians, counter-clockwise from "right".
pub fn bearing(dy: isize, dx: isize) -> f64 {
    (-(dy as f64)).atan2(dx as f64)
}

/// Visibility by floating-point angle: the key is seen when its bearing from
/// the query lies in the head's window. `bearing` is ignored for `(0, 0)`.
pub fn oracle_visible_at(spec: &HeadSpec, dy: isize, dx: isize, bearing: f64) -> bool {
    let HeadSpec::Directed(w) = spec else { return true };
    if dy == 0 && dx == 0 {
        return true;
    }
    let mut rel = bearing - axis_angle(w.direction);
    while rel <= -std::f64::consts::PI {
        rel += 2.0 * std::f64::consts::PI;
    }
    while rel > std::f64::consts::PI {
        rel -= 2.0 * std::f64::consts::PI;
    }
    match (w.fov, w.half) {
        (Fov::Deg180, _) => rel.abs() <= FRAC_PI_2 + ANGLE_EPS,
        (Fov::Deg90, _) => rel.abs() <= FRAC_PI_4 + ANGLE_EPS,
        (Fov::Deg45, Some(WedgeHalf::Second)) => rel >= -FRAC_PI_4 - ANGLE_EPS && rel < -ANGLE_EPS,
        (Fov::Deg45, _) => rel >= -ANGLE_EPS && rel < FRAC_PI_4 - ANGLE_EPS,
    }
}

pub fn oracle_visible(spec: &HeadSpec, dy: isize, dx: isize) -> bool {
    oracle_visible_at(spec, dy, dx, bearing(dy, dx))
}

/// Knobs of a LookHere construction, spelled out for the oracle.
#[derive(Clone, Debug)]
pub struct OracleCase {
    pub name: &'static str,
    pub specs: Vec<HeadSpec>,
    pub s_g: f64,
    pub invert: bool,
    /// 1, 2 or 0.5.
    pub exponent: f64,
    pub mask_zero: bool,
    pub no_distance: bool,
    pub undirected_no_distance: bool,
}

/// `m(l, h)` written out from the schedule: `s_l` falls linearly from 1.5 to
/// 0.5 over the layers, directed heads use 1 and undirected heads take
/// 1/2, 1/8, 1/32, 1/128 in order.
pub fn oracle_slope(case: &OracleCase, l: usize, h: usize, depth: usize) -> f64 {
    let (start, end) = if case.invert { (0.5, 1.5) } else { (1.5, 0.5) };
    let s_l = if depth < 2 { 0.5 * (start + end) } else { start + l as f64 * (end - start) / (depth - 1) as f64 };
    let s_h = if case.specs[h].is_directed() {
        1.0
    } else {
        let k = case.specs[..h].iter().filter(|s| !s.is_directed()).count();
        [0.5, 0.125, 0.03125, 0.0078125][k]
    };
    s_l * s_h * case.s_g
}

/// What the oracle puts at one patch pair, before the layer slope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleShape {
    Masked,
    /// Visible with no distance penalty.
    Free,
    /// Visible; the entry is `m(l, h)` times this shaped distance.
    Scaled(f64),
}

/// Head `h` of `case` for displacement `(dy, dx)` with precomputed bearing and distance.
pub fn oracle_shape(case: &OracleCase, h: usize, dy: isize, dx: isize, bearing: f64, dist: f64) -> OracleShape {
    let spec = &case.specs[h];
    if !oracle_visible_at(spec, dy, dx, bearing) {
        return OracleShape::Masked;
    }
    if case.no_distance || (case.undirected_no_distance && !spec.is_directed()) {
        return OracleShape::Free;
    }
    OracleShape::Scaled(if case.exponent == 2.0 {
        dist.powi(2)
    } else if case.exponent == 0.5 {
        dist.sqrt()
    } else {
        dist
    })
}

pub fn oracle_value(case: &OracleCase, shape: OracleShape, slope: f64) -> f64 {
    match shape {
        OracleShape::Masked if case.mask_zero => 0.0,
        OracleShape::Masked => f64::INFINITY,
        OracleShape::Free => 0.0,
        OracleShape::Scaled(d) => slope * d,
    }
}
