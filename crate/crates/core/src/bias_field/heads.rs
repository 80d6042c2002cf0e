//! Head directions, fields of view and the wedge visibility predicate.
//!
//! Wedges are bounded by rays at multiples of 45°, so membership reduces to
//! sign tests on integer cross products. Angles run counter-clockwise from
//! the `→` axis with "up" meaning decreasing `y`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// The eight compass directions a head can look in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    UpRight,
    DownRight,
    DownLeft,
    UpLeft,
}

impl Direction {
    /// Default head order: cardinals `↑ ↓ ← →`, then intercardinals `↗ ↘ ↙ ↖`.
    pub const ALL: [Direction; 8] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
        Direction::UpRight,
        Direction::DownRight,
        Direction::DownLeft,
        Direction::UpLeft,
    ];

    pub const CARDINAL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    /// Counter-clockwise octant index, `→` = 0, `↑` = 2.
    pub fn octant(self) -> i32 {
        match self {
            Direction::Right => 0,
            Direction::UpRight => 1,
            Direction::Up => 2,
            Direction::UpLeft => 3,
            Direction::Left => 4,
            Direction::DownLeft => 5,
            Direction::Down => 6,
            Direction::DownRight => 7,
        }
    }

    /// Angle in degrees, counter-clockwise from `→`.
    pub fn degrees(self) -> f64 {
        45.0 * self.octant() as f64
    }

    pub fn is_cardinal(self) -> bool {
        self.octant() % 2 == 0
    }

    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Up => "↑",
            Direction::Down => "↓",
            Direction::Left => "←",
            Direction::Right => "→",
            Direction::UpRight => "↗",
            Direction::DownRight => "↘",
            Direction::DownLeft => "↙",
            Direction::UpLeft => "↖",
        }
    }
}

/// Unit-ish ray for an octant index, as `(x, up)`.
fn ray(octant: i32) -> (i64, i64) {
    const RAYS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
    RAYS[octant.rem_euclid(8) as usize]
}

#[inline]
fn cross(a: (i64, i64), b: (i64, i64)) -> i64 {
    a.0 * b.1 - a.1 * b.0
}

/// Angular width of a directed head's view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fov {
    #[serde(rename = "180")]
    Deg180,
    #[serde(rename = "90")]
    Deg90,
    #[serde(rename = "45")]
    Deg45,
}

impl Fov {
    pub fn degrees(self) -> u32 {
        match self {
            Fov::Deg180 => 180,
            Fov::Deg90 => 90,
            Fov::Deg45 => 45,
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            180 => Ok(Fov::Deg180),
            90 => Ok(Fov::Deg90),
            45 => Ok(Fov::Deg45),
            _ => invalid(format!("field of view must be 45, 90 or 180 degrees, got {deg}")),
        }
    }
}

/// Which side of a 90° wedge a 45° half-wedge keeps.
///
/// `First` spans from the direction axis counter-clockwise to the next
/// diagonal; `Second` spans from the previous diagonal up to (not including)
/// the axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WedgeHalf {
    First,
    Second,
}

/// A directed head's angular window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Wedge {
    pub direction: Direction,
    pub fov: Fov,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half: Option<WedgeHalf>,
}

impl Wedge {
    pub fn new(direction: Direction, fov: Fov, half: Option<WedgeHalf>) -> Result<Self> {
        match (fov, half) {
            (Fov::Deg45, None) => invalid("a 45° view is a half of a 90° wedge and needs a half"),
            (Fov::Deg180 | Fov::Deg90, Some(_)) => invalid("only 45° views take a half"),
            _ => Ok(Self { direction, fov, half }),
        }
    }

    /// Bounding octant rays `(start, end)` and whether `end` is included.
    /// `start` is always included.
    fn bounds(&self) -> (i32, i32, bool) {
        let k = self.direction.octant();
        match (self.fov, self.half) {
            (Fov::Deg180, _) => (k - 2, k + 2, true),
            (Fov::Deg90, _) => (k - 1, k + 1, true),
            (Fov::Deg45, Some(WedgeHalf::Second)) => (k - 1, k, false),
            (Fov::Deg45, _) => (k, k + 1, false),
        }
    }

    /// Whether a key at displacement `(dy, dx)` from the query is inside
    /// the wedge. The zero displacement is always visible.
    pub fn contains(&self, delta: (isize, isize)) -> bool {
        let (dy, dx) = delta;
        if dy == 0 && dx == 0 {
            return true;
        }
        let w = (dx as i64, -(dy as i64));
        let (start, end, end_closed) = self.bounds();
        let a = ray(start);
        let b = ray(end);
        if cross(a, w) < 0 {
            return false;
        }
        if end - start == 4 {
            // a half-plane: both boundary rays lie on the line cross(a, w) == 0
            return true;
        }
        let c = cross(w, b);
        c > 0 || (end_closed && c == 0)
    }
}

/// Per-head positional role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSpec {
    Directed(Wedge),
    Undirected,
}

impl HeadSpec {
    pub fn directed(direction: Direction, fov: Fov) -> Result<Self> {
        Ok(HeadSpec::Directed(Wedge::new(direction, fov, None)?))
    }

    pub fn half(direction: Direction, half: WedgeHalf) -> Self {
        HeadSpec::Directed(Wedge { direction, fov: Fov::Deg45, half: Some(half) })
    }

    pub fn is_directed(&self) -> bool {
        matches!(self, HeadSpec::Directed(_))
    }

    /// Visibility of displacement `(j_y - i_y, j_x - i_x)`; undirected heads see everything.
    pub fn visible(&self, delta: (isize, isize)) -> bool {
        match self {
            HeadSpec::Directed(w) => w.contains(delta),
            HeadSpec::Undirected => true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            HeadSpec::Undirected => "undirected".to_string(),
            HeadSpec::Directed(w) => {
                let half = match w.half {
                    Some(WedgeHalf::First) => "a",
                    Some(WedgeHalf::Second) => "b",
                    None => "",
                };
                format!("{}{}{}", w.direction.arrow(), w.fov.degrees(), half)
            }
        }
    }
}

/// The three stock LookHere layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookHereVariant {
    Lh180,
    Lh90,
    Lh45,
}

impl LookHereVariant {
    pub fn fov(self) -> Fov {
        match self {
            LookHereVariant::Lh180 => Fov::Deg180,
            LookHereVariant::Lh90 => Fov::Deg90,
            LookHereVariant::Lh45 => Fov::Deg45,
        }
    }

    /// Head layout for `heads` heads.
    ///
    /// The first `min(heads, 8)` heads are directed and the rest undirected.
    /// LH-180 and LH-90 use [`Direction::ALL`] in order; LH-45 uses the two
    /// halves of each cardinal 90° wedge (`↑a ↑b ↓a ↓b ←a ←b →a →b`).
    pub fn head_specs(self, heads: usize) -> Vec<HeadSpec> {
        let directed: Vec<HeadSpec> = match self {
            LookHereVariant::Lh45 => Direction::CARDINAL
                .iter()
                .flat_map(|&d| [HeadSpec::half(d, WedgeHalf::First), HeadSpec::half(d, WedgeHalf::Second)])
                .collect(),
            _ => Direction::ALL
                .iter()
                .map(|&d| HeadSpec::Directed(Wedge { direction: d, fov: self.fov(), half: None }))
                .collect(),
        };
        (0..heads)
            .map(|h| directed.get(h).copied().unwrap_or(HeadSpec::Undirected))
            .collect()
    }
}

/// Replace every undirected head with a directed head of the given view,
/// cycling through the cardinal directions.
pub fn replace_undirected(specs: &[HeadSpec], fov: Fov) -> Result<Vec<HeadSpec>> {
    if fov == Fov::Deg45 {
        return invalid("undirected heads can only be replaced by 90° or 180° views");
    }
    let mut next = 0;
    Ok(specs
        .iter()
        .map(|s| match s {
            HeadSpec::Undirected => {
                let d = Direction::CARDINAL[next % 4];
                next += 1;
                HeadSpec::Directed(Wedge { direction: d, fov, half: None })
            }
            directed => *directed,
        })
        .collect())
}
