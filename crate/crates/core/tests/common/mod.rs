//! Brute-force oracles and random shape generators shared by the integration
//! suites. Nothing here calls into the predicate code under test.

#![allow(dead_code)]

use rand::Rng;
use urbankg::geometry::{Coordinate, Geometry};

pub type Pt = (f64, f64);

pub fn c(p: Pt) -> Coordinate {
    Coordinate::new(p.0, p.1)
}

fn pts(g: &Geometry) -> Vec<Pt> {
    g.coords().iter().map(|c| (c.lon, c.lat)).collect()
}

/// Winding number of `ring` around `p` (ring closed, first == last).
pub fn winding_number(p: Pt, ring: &[Pt]) -> i32 {
    let mut wn = 0;
    for e in ring.windows(2) {
        let (a, b) = (e[0], e[1]);
        let is_left = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && is_left > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && is_left < 0.0 {
            wn -= 1;
        }
    }
    wn
}

pub fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0)
    };
    ((a.0 + t * dx - p.0).powi(2) + (a.1 + t * dy - p.1).powi(2)).sqrt()
}

pub fn boundary_dist(p: Pt, ring: &[Pt]) -> f64 {
    ring.windows(2)
        .map(|e| seg_dist(p, e[0], e[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Positive inside, negative outside: distance to the ring boundary.
pub fn signed_dist(p: Pt, ring: &[Pt]) -> f64 {
    let d = boundary_dist(p, ring);
    if winding_number(p, ring) != 0 {
        d
    } else {
        -d
    }
}

/// Points along a polyline with spacing at most `h`, vertices included.
pub fn densify(path: &[Pt], h: f64) -> Vec<Pt> {
    let mut out = Vec::new();
    for s in path.windows(2) {
        let (a, b) = (s[0], s[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len / h).ceil().max(1.0) as usize;
        for k in 0..n {
            let t = k as f64 / n as f64;
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out.push(*path.last().unwrap());
    out
}

/// Regular grid over the bounding box of `ring`, keeping points inside it.
pub fn interior_grid(ring: &[Pt], n: usize) -> Vec<Pt> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in ring {
        x0 = x0.min(p.0);
        y0 = y0.min(p.1);
        x1 = x1.max(p.0);
        y1 = y1.max(p.1);
    }
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let p = (
                x0 + (x1 - x0) * i as f64 / n as f64,
                y0 + (y1 - y0) * j as f64 / n as f64,
            );
            if winding_number(p, ring) != 0 {
                out.push(p);
            }
        }
    }
    out
}

/// Three-valued verdict from sampled signed distances: `Some(true)` when every
/// sample clears `+margin`, `Some(false)` when some sample is below `-margin`,
/// `None` (degenerate) otherwise.
fn all_inside(samples: &[Pt], ring: &[Pt], margin: f64) -> Option<bool> {
    let worst = samples
        .iter()
        .map(|p| signed_dist(*p, ring))
        .fold(f64::INFINITY, f64::min);
    if worst > margin {
        Some(true)
    } else if worst < -margin {
        Some(false)
    } else {
        None
    }
}

/// `Some(true)` when a sample lies deeper than `margin` inside, `Some(false)`
/// when every sample is more than `margin` outside.
fn any_inside(samples: &[Pt], ring: &[Pt], margin: f64) -> Option<bool> {
    let best = samples
        .iter()
        .map(|p| signed_dist(*p, ring))
        .fold(f64::NEG_INFINITY, f64::max);
    if best > margin {
        Some(true)
    } else if best < -margin {
        Some(false)
    } else {
        None
    }
}

pub fn oracle_point_in_polygon(p: &Geometry, poly: &Geometry, margin: f64) -> Option<bool> {
    all_inside(&pts(p), &pts(poly), margin)
}

pub fn oracle_linestring_in_polygon(line: &Geometry, poly: &Geometry, margin: f64) -> Option<bool> {
    all_inside(&densify(&pts(line), margin / 2.0), &pts(poly), margin)
}

pub fn oracle_polygon_in_polygon(a: &Geometry, b: &Geometry, margin: f64) -> Option<bool> {
    let mut samples = densify(&pts(a), margin / 2.0);
    samples.extend(interior_grid(&pts(a), 12));
    all_inside(&samples, &pts(b), margin)
}

pub fn oracle_linestring_intersects_polygon(
    line: &Geometry,
    poly: &Geometry,
    margin: f64,
) -> Option<bool> {
    any_inside(&densify(&pts(line), margin / 2.0), &pts(poly), margin)
}

pub fn oracle_polygon_intersects_polygon(a: &Geometry, b: &Geometry, margin: f64) -> Option<bool> {
    let (ra, rb) = (pts(a), pts(b));
    let mut sa = densify(&ra, margin / 2.0);
    sa.extend(interior_grid(&ra, 12));
    let mut sb = densify(&rb, margin / 2.0);
    sb.extend(interior_grid(&rb, 12));
    match (any_inside(&sa, &rb, margin), any_inside(&sb, &ra, margin)) {
        (Some(true), _) | (_, Some(true)) => Some(true),
        (Some(false), Some(false)) => Some(false),
        _ => None,
    }
}

/// Exact on-segment test over integer coordinates.
pub fn oracle_point_on_lattice_path(p: (i64, i64), path: &[(i64, i64)]) -> bool {
    path.windows(2).any(|s| {
        let (a, b) = (s[0], s[1]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        cross == 0
            && p.0 >= a.0.min(b.0)
            && p.0 <= a.0.max(b.0)
            && p.1 >= a.1.min(b.1)
            && p.1 <= a.1.max(b.1)
    })
}

/// Great-circle distance from the angle between unit vectors; independent of
/// the haversine formula.
pub fn vector_distance_km(a: Pt, b: Pt) -> f64 {
    let v = |p: Pt| {
        let (lon, lat) = (p.0.to_radians(), p.1.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (u, w) = (v(a), v(b));
    let cross = [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ];
    let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let cos = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
    6371.0 * sin.atan2(cos)
}

/// Cell bounds `(lon_lo, lon_hi, lat_lo, lat_hi)` of a geohash string.
pub fn geohash_cell(hash: &str) -> (f64, f64, f64, f64) {
    const ALPHABET: &str = "0123456789bcdefghjkmnpqrstuvwxyz";
    let (mut lon, mut lat) = ((-180.0, 180.0), (-90.0, 90.0));
    let mut even = true;
    for ch in hash.chars() {
        let v = ALPHABET.find(ch).expect("geohash alphabet");
        for bit in (0..5).rev() {
            let on = (v >> bit) & 1 == 1;
            let iv: &mut (f64, f64) = if even { &mut lon } else { &mut lat };
            let mid = (iv.0 + iv.1) / 2.0;
            if on {
                iv.0 = mid;
            } else {
                iv.1 = mid;
            }
            even = !even;
        }
    }
    (lon.0, lon.1, lat.0, lat.1)
}

/// 8-character geohashes computed with the `geohash2` Python package for
/// randomly drawn coordinates: (lon, lat, hash).
pub const GEOHASH_REFERENCE: &[(f64, f64, &str)] = &[
    (-125.624467, -31.674869, "34qev3g0"),
    (-153.837424, 27.138018, "8sfd7k74"),
    (-48.325128, 6.451584, "dcjssq6x"),
    (2.675377, -79.471793, "h1cguus5"),
    (-23.874283, -83.158281, "53pnbtrr"),
    (-147.261458, -77.339995, "0dr20bxm"),
    (117.601394, -13.57145, "qtedu16s"),
    (-99.578621, -67.640407, "1gcpnn3n"),
    (161.085677, 22.912493, "xs4d3e54"),
    (-37.174365, 13.86311, "e4mwf5dq"),
    (-163.139552, 85.630668, "br5zpst6"),
    (-75.698579, 64.452629, "f76ntmjz"),
    (-137.518353, -63.962936, "0uwhneyh"),
    (113.742264, -34.434968, "q9buh729"),
    (29.359739, -57.405397, "htuckjej"),
    (-45.911364, 24.976642, "durq56b7"),
    (-157.308527, 8.584455, "8980u6g2"),
    (-105.796055, -79.18371, "19uv8919"),
    (-26.052288, 32.435915, "emv2x0v2"),
    (30.785158, -33.416339, "kdjcus9p"),
    (-72.043835, -8.417449, "6qsb0eek"),
    (71.598197, 52.929431, "v96vj780"),
    (26.777651, -46.011447, "hxg41rfg"),
    (134.974471, 4.530331, "wbzcz2tr"),
    (-76.299992, 41.254263, "dr3dxy05"),
    (-137.419933, 86.335438, "bzq70uvu"),
    (92.519306, -14.721517, "qj3u3248"),
    (-3.971076, -62.573181, "5uvhj8uk"),
    (60.524065, -82.850535, "j3709m82"),
    (26.274733, 47.569842, "u86wtgud"),
    (-67.013645, 67.510911, "fs0251fp"),
    (33.954282, 35.114107, "sy0pu8kf"),
    (-15.757322, 14.365158, "edsc9rjg"),
    (159.996258, 61.126207, "zdcg8z9t"),
    (59.061964, -4.657119, "mr1vxbpw"),
    (72.496829, -78.991637, "j9gw9sn8"),
    (177.415919, 26.453768, "xuwnmpy2"),
    (-77.502528, 57.882077, "f62ck3h7"),
    (60.681247, -20.534699, "mk75hvf8"),
    (-13.782036, -85.843186, "58wpwksp"),
];

// ---------------------------------------------------------------------------
// Random shapes

/// Star-shaped (possibly concave) simple polygon around `center`.
pub fn random_star(rng: &mut impl Rng, center: Pt, r_min: f64, r_max: f64) -> Geometry {
    let n = rng.gen_range(3..10);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    while angles.len() < 3 {
        angles = vec![0.0, 2.1, 4.2];
    }
    let mut ring: Vec<Coordinate> = angles
        .iter()
        .map(|a| {
            let r = rng.gen_range(r_min..r_max);
            Coordinate::new(center.0 + r * a.cos(), center.1 + r * a.sin())
        })
        .collect();
    ring.push(ring[0]);
    Geometry::Polygon(ring)
}

pub fn random_point(rng: &mut impl Rng, x: (f64, f64), y: (f64, f64)) -> Geometry {
    Geometry::Point(Coordinate::new(rng.gen_range(x.0..x.1), rng.gen_range(y.0..y.1)))
}

pub fn random_linestring(rng: &mut impl Rng, x: (f64, f64), y: (f64, f64)) -> Geometry {
    let n = rng.gen_range(2..6);
    Geometry::LineString(
        (0..n)
            .map(|_| Coordinate::new(rng.gen_range(x.0..x.1), rng.gen_range(y.0..y.1)))
            .collect(),
    )
}

/// RCC-5 verdict from boundary sampling for polygon/polygon and
/// point-or-linestring/polygon pairs. `None` when any sample sits within
/// `margin` of the other boundary. Shared-boundary (EC) cases are out of reach
/// by construction and are tested with planted fixtures instead.
pub fn oracle_rcc5(a: &Geometry, b: &Geometry, margin: f64) -> Option<&'static str> {
    let (ra, rb) = (pts(a), pts(b));
    let sa = densify(&ra, margin / 2.0);
    match (a, b) {
        (Geometry::Polygon(_), Geometry::Polygon(_)) => {
            let sb = densify(&rb, margin / 2.0);
            let a_in_b = all_inside(&sa, &rb, margin)?;
            let b_in_a = all_inside(&sb, &ra, margin)?;
            if a_in_b || b_in_a {
                return Some("IN");
            }
            Some(if oracle_polygon_intersects_polygon(a, b, margin)? { "PO" } else { "DC" })
        }
        (_, Geometry::Polygon(_)) => {
            if all_inside(&sa, &rb, margin)? {
                Some("IN")
            } else if any_inside(&sa, &rb, margin)? {
                Some("PO")
            } else {
                Some("DC")
            }
        }
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Randomized predicate suite

use urbankg::geotools::{self, ToolName, ToolValue};

pub const ORACLE_MARGIN: f64 = 0.01;

#[derive(Debug, Default, Clone)]
pub struct SuiteTally {
    pub checked: usize,
    pub skipped: usize,
    pub disagreements: Vec<String>,
}

fn window() -> ((f64, f64), (f64, f64)) {
    ((-4.0, 4.0), (-4.0, 4.0))
}

fn star(rng: &mut impl Rng) -> Geometry {
    let (x, y) = window();
    let center = (rng.gen_range(x.0..x.1) * 0.5, rng.gen_range(y.0..y.1) * 0.5);
    let r_max = rng.gen_range(0.5..3.0);
    random_star(rng, center, r_max * 0.3, r_max)
}

/// Draws one non-degenerate case for `tool` and returns (expected, actual),
/// or `None` if the draw was degenerate.
fn one_case(tool: ToolName, rng: &mut impl Rng) -> Option<(String, String, String)> {
    let (x, y) = window();
    let m = ORACLE_MARGIN;
    let (args, expected): (Vec<Geometry>, String) = match tool {
        ToolName::Geohash => {
            let p = random_point(rng, (-180.0, 180.0), (-90.0, 90.0));
            let got = geotools::geohash_encode(&p);
            let (x0, x1, y0, y1) = geohash_cell(&got);
            let q = p.coords()[0];
            // Inside the decoded cell, and the cell has the right size.
            let ok = q.lon >= x0 && q.lon < x1 && q.lat >= y0 && q.lat < y1
                && ((x1 - x0) - 360.0 / 2f64.powi(20)).abs() < 1e-12
                && ((y1 - y0) - 180.0 / 2f64.powi(20)).abs() < 1e-12;
            return Some((format!("{q:?} in cell"), if ok { format!("{q:?} in cell") } else { got.clone() }, got));
        }
        ToolName::Distance => {
            let a = random_point(rng, (-180.0, 180.0), (-89.0, 89.0));
            let b = random_point(rng, (-180.0, 180.0), (-89.0, 89.0));
            let (pa, pb) = (a.coords()[0], b.coords()[0]);
            let want = vector_distance_km((pa.lon, pa.lat), (pb.lon, pb.lat));
            let got = geotools::distance_km(&a, &b);
            let ok = (got - want).abs() <= 1e-6 * want.max(1.0);
            return Some((format!("{want:.6}"), if ok { format!("{want:.6}") } else { format!("{got:.6}") }, format!("{a} {b}")));
        }
        ToolName::Point4Linestring => {
            let n = rng.gen_range(2..5);
            let path: Vec<(i64, i64)> = (0..n)
                .map(|_| (rng.gen_range(-20..=20), rng.gen_range(-20..=20)))
                .collect();
            if path.windows(2).any(|w| w[0] == w[1]) {
                return None;
            }
            let p = if rng.gen_bool(0.5) {
                let k = rng.gen_range(0..n - 1);
                let (a, b) = (path[k], path[k + 1]);
                let g = gcd((b.0 - a.0).abs(), (b.1 - a.1).abs());
                let t = rng.gen_range(0..=g);
                (a.0 + t * (b.0 - a.0) / g, a.1 + t * (b.1 - a.1) / g)
            } else {
                (rng.gen_range(-20..=20), rng.gen_range(-20..=20))
            };
            let want = oracle_point_on_lattice_path(p, &path);
            let line = Geometry::LineString(path.iter().map(|q| Coordinate::new(q.0 as f64, q.1 as f64)).collect());
            (vec![Geometry::Point(Coordinate::new(p.0 as f64, p.1 as f64)), line], want.to_string())
        }
        ToolName::Point2Polygon => {
            let (p, poly) = (random_point(rng, x, y), star(rng));
            let want = oracle_point_in_polygon(&p, &poly, m)?;
            (vec![p, poly], want.to_string())
        }
        ToolName::Linestring2Polygon | ToolName::Linestring4Polygon => {
            let poly = star(rng);
            // Short lines so that "inside" verdicts occur often enough.
            let cx = rng.gen_range(x.0..x.1) * 0.5;
            let cy = rng.gen_range(y.0..y.1) * 0.5;
            let s = rng.gen_range(0.2..3.0);
            let line = random_linestring(rng, (cx - s, cx + s), (cy - s, cy + s));
            if line.coords().windows(2).any(|w| w[0] == w[1]) {
                return None;
            }
            let want = if tool == ToolName::Linestring2Polygon {
                oracle_linestring_in_polygon(&line, &poly, m)?
            } else {
                oracle_linestring_intersects_polygon(&line, &poly, m)?
            };
            (vec![line, poly], want.to_string())
        }
        ToolName::Polygon2Polygon | ToolName::Polygon4Polygon => {
            let (a, b) = (star(rng), star(rng));
            let want = if tool == ToolName::Polygon2Polygon {
                oracle_polygon_in_polygon(&a, &b, m)?
            } else {
                oracle_polygon_intersects_polygon(&a, &b, m)?
            };
            (vec![a, b], want.to_string())
        }
    };
    let got = match geotools::invoke_tool(tool, &args).expect("kinds match").value {
        ToolValue::Flag(f) => f.to_string(),
        other => other.to_string(),
    };
    let detail = args.iter().map(|g| g.to_wkt()).collect::<Vec<_>>().join(" | ");
    Some((expected, got, detail))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Runs `per_tool` non-degenerate cases for each of the eight tools.
pub fn run_predicate_suite(per_tool: usize, seed: u64) -> Vec<(ToolName, SuiteTally)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ToolName::ALL
        .iter()
        .map(|&tool| {
            let mut t = SuiteTally::default();
            while t.checked < per_tool {
                match one_case(tool, &mut rng) {
                    None => t.skipped += 1,
                    Some((want, got, detail)) => {
                        t.checked += 1;
                        if want != got {
                            t.disagreements.push(format!("want {want} got {got}: {detail}"));
                        }
                    }
                }
            }
            (tool, t)
        })
        .collect()
}
