//! The seven geometric task functions over integer scaled coordinates.
//!
//! Categorical tasks (`compass`, `inside`, `crossing`) use exact integer
//! arithmetic only. Numeric tasks round a float exactly once at the end,
//! half away from zero (`f64::round`). All functions are pure.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompassDir {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl CompassDir {
    pub const ALL: [CompassDir; 8] = [
        CompassDir::N,
        CompassDir::NE,
        CompassDir::E,
        CompassDir::SE,
        CompassDir::S,
        CompassDir::SW,
        CompassDir::W,
        CompassDir::NW,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompassDir::N => "N",
            CompassDir::NE => "NE",
            CompassDir::E => "E",
            CompassDir::SE => "SE",
            CompassDir::S => "S",
            CompassDir::SW => "SW",
            CompassDir::W => "W",
            CompassDir::NW => "NW",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

fn round_i64(v: f64) -> i64 {
    v.round() as i64
}

/// `round(sqrt((ax-bx)^2 + (ay-by)^2))`.
pub fn distance(a: Point, b: Point) -> i64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    round_i64(((dx * dx + dy * dy) as f64).sqrt())
}

/// Twice the signed triangle area (the shoelace cross product), exact.
fn cross2(a: Point, b: Point, c: Point) -> i64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Orientation sign of the triplet: >0 counter-clockwise, <0 clockwise, 0 collinear.
fn orient(a: Point, b: Point, c: Point) -> i64 {
    cross2(a, b, c).signum()
}

/// `round(|shoelace| / 2)` in exact integer arithmetic: for non-negative `c`,
/// `round(c/2) = (c + 1) / 2` in integer division (half rounds away from zero).
pub fn tri_area(a: Point, b: Point, c: Point) -> i64 {
    let twice = cross2(a, b, c).abs();
    (twice + 1) / 2
}

/// Interior angle at vertex `b` between rays `b->a` and `b->c`, rounded to
/// integer degrees in `[0, 180]`.
pub fn angle(a: Point, b: Point, c: Point) -> Result<i64> {
    let ux = (a.x - b.x) as f64;
    let uy = (a.y - b.y) as f64;
    let vx = (c.x - b.x) as f64;
    let vy = (c.y - b.y) as f64;
    if (ux == 0.0 && uy == 0.0) || (vx == 0.0 && vy == 0.0) {
        return Err(Error::DegenerateGeometry("angle vertex coincides with an endpoint"));
    }
    let cos = (ux * vx + uy * vy) / ((ux * ux + uy * uy).sqrt() * (vx * vx + vy * vy).sqrt());
    Ok(round_i64(cos.clamp(-1.0, 1.0).acos().to_degrees()))
}

/// Compass sector of the bearing from `a` to `b`, clockwise from north (+y).
/// Sector k is `[45k - 22.5, 45k + 22.5)` degrees, so a boundary bearing
/// resolves to the clockwise-later sector. Exact integer arithmetic: squaring
/// the direction as a complex number doubles the bearing, which maps the
/// +-22.5 deg sector boundaries onto +-45 deg where the tests are sign and
/// magnitude comparisons. The doubled bearing conflates opposite sectors;
/// the sign of dy (or dx) picks the member of each opposite pair.
pub fn compass(a: Point, b: Point) -> Result<CompassDir> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    if dx == 0 && dy == 0 {
        return Err(Error::DegenerateGeometry("compass of coincident points"));
    }
    // w = dy + i*dx has arg = bearing; w^2 = (dy^2 - dx^2) + i*(2*dx*dy).
    let u = dy * dy - dx * dx;
    let v = 2 * dx * dy;
    let dir = if u > 0 && v >= -u && v < u {
        // doubled bearing in [-45, 45): N/S
        if dy > 0 {
            CompassDir::N
        } else {
            CompassDir::S
        }
    } else if v > 0 && u <= v && u > -v {
        // [45, 135): NE/SW
        if dy > 0 {
            CompassDir::NE
        } else {
            CompassDir::SW
        }
    } else if u < 0 && v <= -u && v > u {
        // [135, 225): E/W
        if dx > 0 {
            CompassDir::E
        } else {
            CompassDir::W
        }
    } else {
        // [225, 315): SE/NW
        if dx > 0 {
            CompassDir::SE
        } else {
            CompassDir::NW
        }
    };
    Ok(dir)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Convex hull (counter-clockwise, no collinear vertices) via monotone chain.
/// Returns 1 point if all inputs coincide and 2 if all are collinear.
fn convex_hull(pts: &[Point]) -> Vec<Point> {
    let mut p: Vec<Point> = pts.to_vec();
    p.sort_by_key(|q| (q.x, q.y));
    p.dedup();
    let n = p.len();
    if n <= 2 {
        return p;
    }
    let chain = |iter: &mut dyn Iterator<Item = Point>| {
        let mut h: Vec<Point> = Vec::new();
        for q in iter {
            while h.len() >= 2 && orient(h[h.len() - 2], h[h.len() - 1], q) <= 0 {
                h.pop();
            }
            h.push(q);
        }
        h.pop(); // endpoint is shared with the other chain
        h
    };
    let mut hull = chain(&mut p.iter().copied());
    hull.extend(chain(&mut p.iter().rev().copied()));
    if hull.len() < 3 {
        // all collinear: hull degenerates to the two extremes
        return vec![p[0], p[n - 1]];
    }
    hull
}

/// TRUE iff `p` is inside or on the boundary of the convex hull of `hull_pts`.
/// Requires at least 3 hull points; a fully collinear set degenerates to an
/// on-segment test. Exact integer orientation predicates throughout.
pub fn inside(p: Point, hull_pts: &[Point]) -> Result<bool> {
    if hull_pts.len() < 3 {
        return Err(Error::Arity {
            task: "inside",
            expected: ">= 3 hull cities",
            got: hull_pts.len(),
        });
    }
    let hull = convex_hull(hull_pts);
    Ok(match hull.len() {
        1 => p == hull[0],
        2 => on_segment(hull[0], hull[1], p),
        _ => {
            let m = hull.len();
            (0..m).all(|i| orient(hull[i], hull[(i + 1) % m], p) >= 0)
        }
    })
}

/// `round` of the closed polygon's edge-length sum in the given vertex order
/// (including last -> first). Summed as f64, rounded once at the end.
pub fn perimeter(pts: &[Point]) -> Result<i64> {
    if pts.len() < 3 {
        return Err(Error::Arity {
            task: "perimeter",
            expected: ">= 3 cities",
            got: pts.len(),
        });
    }
    let mut sum = 0.0f64;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        let dx = a.x - b.x;
        let dy = a.y - b.y;
        sum += ((dx * dx + dy * dy) as f64).sqrt();
    }
    Ok(round_i64(sum))
}

/// TRUE iff the closed segments `(a,b)` and `(c,d)` intersect. Proper
/// crossings, shared endpoints, touching, and collinear overlap all count.
pub fn crossing(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    (o1 != o2 && o3 != o4)
        || (o1 == 0 && on_segment(a, b, c))
        || (o2 == 0 && on_segment(a, b, d))
        || (o3 == 0 && on_segment(c, d, a))
        || (o4 == 0 && on_segment(c, d, b))
}
