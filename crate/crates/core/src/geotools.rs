//! The geospatial toolkit exposed to the agent: geohash, great-circle distance,
//! six containment/intersection predicates, and an RCC-5 classifier.
//!
//! Predicates work in planar lon-lat space. Only [`distance_km`] uses the sphere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{point_on_segment, segments_intersect, Coordinate, Geometry, GeometryKind};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const GEOHASH_PRECISION: usize = 8;
/// Half-width (degrees) of the square a point is inflated to for RCC-5.
pub const DEFAULT_RCC_EPS: f64 = 1e-4;

const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
/// Distance below which a sampled point counts as lying on a boundary when
/// splitting segments against a polygon.
const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolName {
    Geohash,
    Distance,
    Point2Polygon,
    Point4Linestring,
    Linestring2Polygon,
    Linestring4Polygon,
    Polygon2Polygon,
    Polygon4Polygon,
}

impl ToolName {
    /// All tools, in toolkit table order.
    pub const ALL: [ToolName; 8] = [
        ToolName::Geohash,
        ToolName::Distance,
        ToolName::Point2Polygon,
        ToolName::Point4Linestring,
        ToolName::Linestring2Polygon,
        ToolName::Linestring4Polygon,
        ToolName::Polygon2Polygon,
        ToolName::Polygon4Polygon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::Geohash => "Geohash",
            ToolName::Distance => "Distance",
            ToolName::Point2Polygon => "Point2Polygon",
            ToolName::Point4Linestring => "Point4Linestring",
            ToolName::Linestring2Polygon => "Linestring2Polygon",
            ToolName::Linestring4Polygon => "Linestring4Polygon",
            ToolName::Polygon2Polygon => "Polygon2Polygon",
            ToolName::Polygon4Polygon => "Polygon4Polygon",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ToolName::Geohash => "Geohash encoding",
            ToolName::Distance => "Calculate the distance between two geo entities.",
            ToolName::Point2Polygon => "Identify if a point belongs to a polygon",
            ToolName::Point4Linestring => "Identify if a point intersects a linestring",
            ToolName::Linestring2Polygon => "Identify if a linestring belongs to a polygon",
            ToolName::Linestring4Polygon => "Identify if a linestring intersects a polygon",
            ToolName::Polygon2Polygon => "Identify if a polygon belongs to a polygon",
            ToolName::Polygon4Polygon => "Identify if a polygon intersects a polygon",
        }
    }

    /// Required input kinds; `None` for tools that accept any geometry.
    pub fn input_kinds(self) -> Option<[GeometryKind; 2]> {
        use GeometryKind::*;
        match self {
            ToolName::Geohash | ToolName::Distance => None,
            ToolName::Point2Polygon => Some([Point, Polygon]),
            ToolName::Point4Linestring => Some([Point, LineString]),
            ToolName::Linestring2Polygon | ToolName::Linestring4Polygon => {
                Some([LineString, Polygon])
            }
            ToolName::Polygon2Polygon | ToolName::Polygon4Polygon => Some([Polygon, Polygon]),
        }
    }

    pub fn arity(self) -> usize {
        match self {
            ToolName::Geohash => 1,
            _ => 2,
        }
    }

    /// The toolkit as (name, description) rows, for prompt rendering.
    pub fn toolkit() -> Vec<(ToolName, &'static str)> {
        Self::ALL.iter().map(|t| (*t, t.description())).collect()
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown tool {0:?}")]
pub struct UnknownTool(pub String);

impl FromStr for ToolName {
    type Err = UnknownTool;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        ToolName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownTool(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rcc5Relation {
    DC,
    EC,
    PO,
    EQ,
    IN,
}

impl Rcc5Relation {
    /// Candidate order used when presenting relations to a model.
    pub const PROMPT_ORDER: [Rcc5Relation; 5] = [
        Rcc5Relation::DC,
        Rcc5Relation::EC,
        Rcc5Relation::EQ,
        Rcc5Relation::PO,
        Rcc5Relation::IN,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Rcc5Relation::DC => "DC",
            Rcc5Relation::EC => "EC",
            Rcc5Relation::PO => "PO",
            Rcc5Relation::EQ => "EQ",
            Rcc5Relation::IN => "IN",
        }
    }

    pub fn full_name(self) -> &'static str {
        match self {
            Rcc5Relation::DC => "Disconnection",
            Rcc5Relation::EC => "External connection",
            Rcc5Relation::PO => "Partial overlap",
            Rcc5Relation::EQ => "Equality",
            Rcc5Relation::IN => "Tangential and non-tangential proper parts",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::PROMPT_ORDER.into_iter().find(|r| r.code() == s)
    }
}

impl fmt::Display for Rcc5Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ToolValue {
    Geohash(String),
    DistanceKm(f64),
    Flag(bool),
}

impl fmt::Display for ToolValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolValue::Geohash(h) => f.write_str(h),
            ToolValue::DistanceKm(d) => write!(f, "{d:.3} km"),
            ToolValue::Flag(true) => f.write_str("True"),
            ToolValue::Flag(false) => f.write_str("False"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: ToolName,
    pub inputs: Vec<Geometry>,
    pub value: ToolValue,
}

impl ToolResult {
    /// `tool(Name)=value`
    pub fn render(&self) -> String {
        format!("tool({})={}", self.tool, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("{tool} takes {expected} geometries, got {found}")]
    ArityMismatch {
        tool: ToolName,
        expected: usize,
        found: usize,
    },
    #[error("{tool} expects ({}, {}), got ({}, {})", expected[0], expected[1], found[0], found[1])]
    KindMismatch {
        tool: ToolName,
        expected: [GeometryKind; 2],
        found: [GeometryKind; 2],
    },
}

// ---------------------------------------------------------------------------
// Geohash and distance

pub fn geohash_encode(g: &Geometry) -> String {
    geohash_encode_coord(g.vertex_centroid(), GEOHASH_PRECISION)
}

pub fn geohash_encode_coord(c: Coordinate, precision: usize) -> String {
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    for _ in 0..precision {
        let mut idx = 0usize;
        for _ in 0..5 {
            idx <<= 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if c.lon >= mid {
                    idx |= 1;
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if c.lat >= mid {
                    idx |= 1;
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
        out.push(GEOHASH_ALPHABET[idx] as char);
    }
    out
}

/// Haversine distance between the representative points (vertex centroids).
pub fn distance_km(a: &Geometry, b: &Geometry) -> f64 {
    haversine_km(a.vertex_centroid(), b.vertex_centroid())
}

pub fn haversine_km(a: Coordinate, b: Coordinate) -> f64 {
    // Fixed argument order keeps the result bit-identical under swapping.
    let (p, q) = if (a.lon, a.lat) <= (b.lon, b.lat) { (a, b) } else { (b, a) };
    let (lat1, lat2) = (p.lat.to_radians(), q.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q.lon - p.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

// ---------------------------------------------------------------------------
// Planar predicates

/// Closed point-in-ring test: boundary points count as inside.
fn point_in_ring(p: Coordinate, ring: &[Coordinate]) -> bool {
    if ring.windows(2).any(|e| point_on_segment(p, e[0], e[1])) {
        return true;
    }
    crossing_parity(p, ring)
}

fn crossing_parity(p: Coordinate, ring: &[Coordinate]) -> bool {
    let mut inside = false;
    for e in ring.windows(2) {
        let (a, b) = (e[0], e[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn point_segment_distance(p: Coordinate, a: Coordinate, b: Coordinate) -> f64 {
    let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.lon - a.lon) * dx + (p.lat - a.lat) * dy) / len2).clamp(0.0, 1.0)
    };
    let (x, y) = (a.lon + t * dx - p.lon, a.lat + t * dy - p.lat);
    (x * x + y * y).sqrt()
}

fn ring_boundary_distance(p: Coordinate, ring: &[Coordinate]) -> f64 {
    ring.windows(2)
        .map(|e| point_segment_distance(p, e[0], e[1]))
        .fold(f64::INFINITY, f64::min)
}

fn inside_with_tolerance(p: Coordinate, ring: &[Coordinate]) -> bool {
    point_in_ring(p, ring) || ring_boundary_distance(p, ring) <= BOUNDARY_TOL
}

/// Parameters in [0, 1] along `a`-`b` where the segment meets the ring
/// boundary, plus both endpoints, sorted and deduplicated.
fn split_params(a: Coordinate, b: Coordinate, ring: &[Coordinate]) -> Vec<f64> {
    let mut ts = vec![0.0, 1.0];
    let (rx, ry) = (b.lon - a.lon, b.lat - a.lat);
    let len2 = rx * rx + ry * ry;
    for e in ring.windows(2) {
        let (c, d) = (e[0], e[1]);
        if !segments_intersect(a, b, c, d) {
            continue;
        }
        let (sx, sy) = (d.lon - c.lon, d.lat - c.lat);
        let den = rx * sy - ry * sx;
        if den != 0.0 {
            let t = ((c.lon - a.lon) * sy - (c.lat - a.lat) * sx) / den;
            ts.push(t.clamp(0.0, 1.0));
        } else if len2 > 0.0 {
            for q in [c, d] {
                let t = ((q.lon - a.lon) * rx + (q.lat - a.lat) * ry) / len2;
                if (0.0..=1.0).contains(&t) {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

fn lerp(a: Coordinate, b: Coordinate, t: f64) -> Coordinate {
    Coordinate::new(a.lon + t * (b.lon - a.lon), a.lat + t * (b.lat - a.lat))
}

/// Every point of the polyline `path` lies in the closed region bounded by `ring`.
fn path_within_ring(path: &[Coordinate], ring: &[Coordinate]) -> bool {
    if !path.iter().all(|p| inside_with_tolerance(*p, ring)) {
        return false;
    }
    path.windows(2).all(|s| {
        let ts = split_params(s[0], s[1], ring);
        ts.windows(2)
            .all(|w| inside_with_tolerance(lerp(s[0], s[1], (w[0] + w[1]) / 2.0), ring))
    })
}

fn path_meets_ring(path: &[Coordinate], ring: &[Coordinate]) -> bool {
    path.iter().any(|p| point_in_ring(*p, ring))
        || path.windows(2).any(|s| {
            ring.windows(2)
                .any(|e| segments_intersect(s[0], s[1], e[0], e[1]))
        })
}

fn rings_meet(a: &[Coordinate], b: &[Coordinate]) -> bool {
    a.windows(2)
        .any(|s| b.windows(2).any(|e| segments_intersect(s[0], s[1], e[0], e[1])))
        || point_in_ring(a[0], b)
        || point_in_ring(b[0], a)
}

fn expect_kind(g: &Geometry, kind: GeometryKind) -> &[Coordinate] {
    assert_eq!(g.kind(), kind, "geometry kind mismatch");
    g.coords()
}

/// Point inside or on the boundary of the polygon.
pub fn point_in_polygon(p: &Geometry, poly: &Geometry) -> bool {
    let p = expect_kind(p, GeometryKind::Point)[0];
    point_in_ring(p, expect_kind(poly, GeometryKind::Polygon))
}

pub fn point_intersects_linestring(p: &Geometry, line: &Geometry) -> bool {
    let p = expect_kind(p, GeometryKind::Point)[0];
    expect_kind(line, GeometryKind::LineString)
        .windows(2)
        .any(|s| point_on_segment(p, s[0], s[1]))
}

pub fn linestring_in_polygon(line: &Geometry, poly: &Geometry) -> bool {
    path_within_ring(
        expect_kind(line, GeometryKind::LineString),
        expect_kind(poly, GeometryKind::Polygon),
    )
}

pub fn linestring_intersects_polygon(line: &Geometry, poly: &Geometry) -> bool {
    path_meets_ring(
        expect_kind(line, GeometryKind::LineString),
        expect_kind(poly, GeometryKind::Polygon),
    )
}

/// `inner` lies entirely in the closed region of `outer`. Checking the boundary
/// suffices because polygons here have no holes.
pub fn polygon_in_polygon(inner: &Geometry, outer: &Geometry) -> bool {
    path_within_ring(
        expect_kind(inner, GeometryKind::Polygon),
        expect_kind(outer, GeometryKind::Polygon),
    )
}

pub fn polygon_intersects_polygon(a: &Geometry, b: &Geometry) -> bool {
    rings_meet(
        expect_kind(a, GeometryKind::Polygon),
        expect_kind(b, GeometryKind::Polygon),
    )
}

// ---------------------------------------------------------------------------
// RCC-5

/// A union of closed simple rings: the eps-inflated form of a geometry.
#[derive(Debug, Clone)]
struct Region {
    parts: Vec<Vec<Coordinate>>,
}

fn square(c: Coordinate, h: f64) -> Vec<Coordinate> {
    vec![
        Coordinate::new(c.lon - h, c.lat - h),
        Coordinate::new(c.lon + h, c.lat - h),
        Coordinate::new(c.lon + h, c.lat + h),
        Coordinate::new(c.lon - h, c.lat + h),
        Coordinate::new(c.lon - h, c.lat - h),
    ]
}

impl Region {
    /// Points become squares of half-width `eps`; each linestring segment
    /// becomes a rectangle reaching `eps` beyond the segment on every side.
    fn inflate(g: &Geometry, eps: f64) -> Self {
        let parts = match g {
            Geometry::Point(c) => vec![square(*c, eps)],
            Geometry::Polygon(ring) => vec![ring.clone()],
            Geometry::LineString(path) => path
                .windows(2)
                .map(|s| {
                    let (a, b) = (s[0], s[1]);
                    let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
                    let len = (dx * dx + dy * dy).sqrt();
                    if len == 0.0 {
                        return square(a, eps);
                    }
                    let (ux, uy) = (dx / len * eps, dy / len * eps);
                    let (nx, ny) = (-uy, ux);
                    let p = |x: f64, y: f64| Coordinate::new(x, y);
                    let r = vec![
                        p(a.lon - ux - nx, a.lat - uy - ny),
                        p(b.lon + ux - nx, b.lat + uy - ny),
                        p(b.lon + ux + nx, b.lat + uy + ny),
                        p(a.lon - ux + nx, a.lat - uy + ny),
                        p(a.lon - ux - nx, a.lat - uy - ny),
                    ];
                    r
                })
                .collect(),
        };
        Region { parts }
    }

    fn edges(&self) -> impl Iterator<Item = (Coordinate, Coordinate)> + '_ {
        self.parts
            .iter()
            .flat_map(|r| r.windows(2).map(|e| (e[0], e[1])))
    }

    fn contains(&self, p: Coordinate) -> bool {
        self.parts.iter().any(|r| point_in_ring(p, r))
    }

    /// Distance from `p` to the region, zero when `p` is inside.
    fn outside_distance(&self, p: Coordinate) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.edges()
                .map(|(a, b)| point_segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min)
        }
    }

    /// How far `p` sits inside the region, measured against the boundary of the
    /// deepest part containing it.
    fn depth(&self, p: Coordinate) -> f64 {
        self.parts
            .iter()
            .filter(|r| point_in_ring(p, r))
            .map(|r| ring_boundary_distance(p, r))
            .fold(0.0, f64::max)
    }

    /// Boundary samples of `self`: every vertex plus the midpoint of each piece
    /// after splitting edges where they cross `other`'s boundary.
    fn samples_against(&self, other: &Region) -> Vec<Coordinate> {
        let mut out = Vec::new();
        for (a, b) in self.edges() {
            let mut ts = vec![0.0, 1.0];
            for r in &other.parts {
                ts.extend(split_params(a, b, r));
            }
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            out.push(a);
            for w in ts.windows(2) {
                out.push(lerp(a, b, (w[0] + w[1]) / 2.0));
            }
        }
        out
    }

    fn meets(&self, other: &Region) -> bool {
        self.parts
            .iter()
            .any(|a| other.parts.iter().any(|b| rings_meet(a, b)))
    }
}

fn segment_distance(a: Coordinate, b: Coordinate, c: Coordinate, d: Coordinate) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// The per-pair measures the RCC-5 cascade is decided on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RccMeasures {
    /// Largest distance a boundary sample of A lies outside B.
    pub excess_ab: f64,
    pub excess_ba: f64,
    /// Largest depth a boundary sample of A reaches inside B.
    pub depth_ab: f64,
    pub depth_ba: f64,
    /// Separation between the regions (zero when they meet).
    pub gap: f64,
}

fn rcc_measures(a: &Geometry, b: &Geometry, eps: f64) -> RccMeasures {
    let ra = Region::inflate(a, eps);
    let rb = Region::inflate(b, eps);
    let sa = ra.samples_against(&rb);
    let sb = rb.samples_against(&ra);
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    let excess_ab = max_of(&mut sa.iter().map(|p| rb.outside_distance(*p)));
    let excess_ba = max_of(&mut sb.iter().map(|p| ra.outside_distance(*p)));
    let depth_ab = max_of(&mut sa.iter().map(|p| rb.depth(*p)));
    let depth_ba = max_of(&mut sb.iter().map(|p| ra.depth(*p)));
    let gap = if ra.meets(&rb) || rb.meets(&ra) {
        0.0
    } else {
        let mut g = f64::INFINITY;
        for (p, q) in ra.edges() {
            for (r, s) in rb.edges() {
                g = g.min(segment_distance(p, q, r, s)).min(segment_distance(r, s, p, q));
            }
        }
        g
    };
    RccMeasures {
        excess_ab,
        excess_ba,
        depth_ab,
        depth_ba,
        gap,
    }
}

/// Classifies a pair into exactly one RCC-5 relation.
///
/// Both geometries are inflated (points to squares, linestring segments to
/// rectangles, both of half-width `eps`) and then tested in order:
///
/// * `EQ`: each region lies within `eps` of the other;
/// * `IN`: one region lies within `eps` of the other (either direction);
/// * `PO`: some boundary of one reaches more than `eps` into the other;
/// * `EC`: the regions come within `eps` of each other;
/// * `DC`: otherwise.
///
/// Every test is symmetric in its arguments, so `classify_rcc5(a, b, e)` and
/// `classify_rcc5(b, a, e)` always agree.
pub fn classify_rcc5(a: &Geometry, b: &Geometry, eps: f64) -> Rcc5Relation {
    let m = rcc_measures(a, b, eps);
    let a_in_b = m.excess_ab <= eps;
    let b_in_a = m.excess_ba <= eps;
    if a_in_b && b_in_a {
        Rcc5Relation::EQ
    } else if a_in_b || b_in_a {
        Rcc5Relation::IN
    } else if m.depth_ab > eps || m.depth_ba > eps {
        Rcc5Relation::PO
    } else if m.gap <= eps {
        Rcc5Relation::EC
    } else {
        Rcc5Relation::DC
    }
}

// ---------------------------------------------------------------------------
// Tool dispatch

pub fn invoke_tool(name: ToolName, args: &[Geometry]) -> Result<ToolResult, ToolError> {
    if args.len() != name.arity() {
        return Err(ToolError::ArityMismatch {
            tool: name,
            expected: name.arity(),
            found: args.len(),
        });
    }
    if let Some(expected) = name.input_kinds() {
        let found = [args[0].kind(), args[1].kind()];
        if found != expected {
            return Err(ToolError::KindMismatch {
                tool: name,
                expected,
                found,
            });
        }
    }
    let (a, b) = (&args[0], args.get(1));
    let value = match name {
        ToolName::Geohash => ToolValue::Geohash(geohash_encode(a)),
        ToolName::Distance => ToolValue::DistanceKm(distance_km(a, b.unwrap())),
        ToolName::Point2Polygon => ToolValue::Flag(point_in_polygon(a, b.unwrap())),
        ToolName::Point4Linestring => ToolValue::Flag(point_intersects_linestring(a, b.unwrap())),
        ToolName::Linestring2Polygon => ToolValue::Flag(linestring_in_polygon(a, b.unwrap())),
        ToolName::Linestring4Polygon => {
            ToolValue::Flag(linestring_intersects_polygon(a, b.unwrap()))
        }
        ToolName::Polygon2Polygon => ToolValue::Flag(polygon_in_polygon(a, b.unwrap())),
        ToolName::Polygon4Polygon => ToolValue::Flag(polygon_intersects_polygon(a, b.unwrap())),
    };
    Ok(ToolResult {
        tool: name,
        inputs: args.to_vec(),
        value,
    })
}

/// Argument lists for running `tool` on a head/tail pair. Geohash runs once
/// per entity; two-argument tools take the pair in whichever order matches
/// their input kinds. Empty when the kinds don't fit the tool.
pub fn tool_arguments(tool: ToolName, head: &Geometry, tail: &Geometry) -> Vec<Vec<Geometry>> {
    match tool.input_kinds() {
        None if tool.arity() == 1 => vec![vec![head.clone()], vec![tail.clone()]],
        None => vec![vec![head.clone(), tail.clone()]],
        Some(kinds) => {
            let mut out = Vec::new();
            if [head.kind(), tail.kind()] == kinds {
                out.push(vec![head.clone(), tail.clone()]);
            }
            if [tail.kind(), head.kind()] == kinds && kinds[0] != kinds[1] {
                out.push(vec![tail.clone(), head.clone()]);
            } else if kinds[0] == kinds[1] && [tail.kind(), head.kind()] == kinds {
                // Same-kind containment is directional: ask both ways.
                if tool == ToolName::Polygon2Polygon {
                    out.push(vec![tail.clone(), head.clone()]);
                }
            }
            out
        }
    }
}

/// Tools that can run on this head/tail pair.
pub fn applicable_tools(head: &Geometry, tail: &Geometry) -> Vec<ToolName> {
    ToolName::ALL
        .into_iter()
        .filter(|t| !tool_arguments(*t, head, tail).is_empty())
        .collect()
}

/// One evidence line per toolkit entry (always eight), for model-based
/// evaluation prompts. Tools whose input kinds don't fit the pair say so.
pub fn toolkit_evidence(head: &Geometry, tail: &Geometry) -> Vec<String> {
    ToolName::ALL
        .into_iter()
        .map(|tool| {
            let results: Vec<ToolResult> = tool_arguments(tool, head, tail)
                .iter()
                .filter_map(|args| invoke_tool(tool, args).ok())
                .collect();
            let value = match (tool, results.as_slice()) {
                (_, []) => {
                    let kinds = tool.input_kinds().expect("any-kind tools always apply");
                    format!("not applicable (needs {} and {})", kinds[0], kinds[1])
                }
                (ToolName::Geohash, [h, t]) => format!("head {}, tail {}", h.value, t.value),
                (ToolName::Polygon2Polygon, [ht, th]) => {
                    format!("head in tail {}, tail in head {}", ht.value, th.value)
                }
                (_, [r, ..]) => r.value.to_string(),
            };
            format!("tool({tool})={value}")
        })
        .collect()
}
