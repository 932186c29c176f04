//! WGS84 geometries in Well-Known-Text form.
//!
//! Coordinates are longitude-first everywhere: internally, in WKT input and in
//! WKT output. Only `POINT`, `LINESTRING` and single-ring `POLYGON` values are
//! supported; interior rings of a polygon are discarded at parse time.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest first/last vertex gap that [`ParseOptions::snap_closure`] will close.
pub const CLOSURE_SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coordinate {
    pub lon: f64,
    pub lat: f64,
}

impl Coordinate {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    /// True when both components are finite and inside the WGS84 ranges
    /// lon in (-180, 180] and lat in [-90, 90].
    pub fn in_range(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && self.lon > -180.0
            && self.lon <= 180.0
            && (-90.0..=90.0).contains(&self.lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeometryKind {
    Point,
    LineString,
    Polygon,
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeometryKind::Point => "Point",
            GeometryKind::LineString => "LineString",
            GeometryKind::Polygon => "Polygon",
        })
    }
}

/// A point, a path, or a polygon exterior ring (closed: first == last).
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Point(Coordinate),
    LineString(Vec<Coordinate>),
    Polygon(Vec<Coordinate>),
}

impl Geometry {
    pub fn kind(&self) -> GeometryKind {
        match self {
            Geometry::Point(_) => GeometryKind::Point,
            Geometry::LineString(_) => GeometryKind::LineString,
            Geometry::Polygon(_) => GeometryKind::Polygon,
        }
    }

    pub fn coords(&self) -> &[Coordinate] {
        match self {
            Geometry::Point(c) => std::slice::from_ref(c),
            Geometry::LineString(cs) | Geometry::Polygon(cs) => cs,
        }
    }

    /// Mean of the distinct vertices. The closing vertex of a polygon ring is
    /// not counted twice.
    pub fn vertex_centroid(&self) -> Coordinate {
        let cs = match self {
            Geometry::Point(c) => return *c,
            Geometry::LineString(cs) => &cs[..],
            Geometry::Polygon(cs) => &cs[..cs.len().saturating_sub(1)],
        };
        if cs.is_empty() {
            return Coordinate::default();
        }
        let n = cs.len() as f64;
        let (lon, lat) = cs
            .iter()
            .fold((0.0, 0.0), |(x, y), c| (x + c.lon, y + c.lat));
        Coordinate::new(lon / n, lat / n)
    }

    pub fn to_wkt(&self) -> String {
        serialize_wkt(self)
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_wkt(self))
    }
}

impl std::str::FromStr for Geometry {
    type Err = WktError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_wkt(s)
    }
}

impl Serialize for Geometry {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&serialize_wkt(self))
    }
}

impl<'de> Deserialize<'de> for Geometry {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_wkt(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WktError {
    #[error("malformed WKT at byte {offset}: {message}")]
    MalformedWkt { offset: usize, message: String },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(ValidationReport),
    #[error("unsupported geometry kind {0}")]
    UnsupportedKind(String),
}

/// Knobs for [`parse_wkt_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Input coordinates are written latitude first; swap them on read.
    pub lat_first: bool,
    /// Close polygon rings whose first and last vertex differ by at most
    /// [`CLOSURE_SNAP_TOLERANCE`] degrees.
    pub snap_closure: bool,
}

pub fn parse_wkt(text: &str) -> Result<Geometry, WktError> {
    parse_wkt_with(text, ParseOptions::default())
}

pub fn parse_wkt_with(text: &str, opts: ParseOptions) -> Result<Geometry, WktError> {
    let mut parser = Parser::new(text);
    let mut geom = parser.geometry()?;
    parser.expect_end()?;

    if opts.lat_first {
        geom = swap_axes(geom);
    }
    if opts.snap_closure {
        snap_ring_closure(&mut geom, CLOSURE_SNAP_TOLERANCE);
    }
    let report = validate(&geom);
    if report.is_valid() {
        Ok(geom)
    } else {
        Err(WktError::InvalidGeometry(report))
    }
}

fn swap_axes(g: Geometry) -> Geometry {
    let swap = |c: Coordinate| Coordinate::new(c.lat, c.lon);
    match g {
        Geometry::Point(c) => Geometry::Point(swap(c)),
        Geometry::LineString(cs) => Geometry::LineString(cs.into_iter().map(swap).collect()),
        Geometry::Polygon(cs) => Geometry::Polygon(cs.into_iter().map(swap).collect()),
    }
}

/// Overwrites the last vertex of a polygon ring with the first when the two
/// are within `tolerance` degrees on both axes.
pub fn snap_ring_closure(g: &mut Geometry, tolerance: f64) {
    if let Geometry::Polygon(ring) = g {
        if ring.len() >= 2 {
            let first = ring[0];
            let last = ring[ring.len() - 1];
            if first != last
                && (first.lon - last.lon).abs() <= tolerance
                && (first.lat - last.lat).abs() <= tolerance
            {
                *ring.last_mut().unwrap() = first;
            }
        }
    }
}

/// Uppercase WKT, longitude first. Numbers use the shortest decimal form that
/// parses back to the same `f64`.
pub fn serialize_wkt(g: &Geometry) -> String {
    fn coord_list(out: &mut String, cs: &[Coordinate]) {
        for (i, c) in cs.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&format!("{} {}", c.lon, c.lat));
        }
    }
    let mut out = String::new();
    match g {
        Geometry::Point(c) => out.push_str(&format!("POINT ({} {})", c.lon, c.lat)),
        Geometry::LineString(cs) => {
            out.push_str("LINESTRING (");
            coord_list(&mut out, cs);
            out.push(')');
        }
        Geometry::Polygon(cs) => {
            out.push_str("POLYGON ((");
            coord_list(&mut out, cs);
            out.push_str("))");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    CoordinateOutOfRange { index: usize, coord: Coordinate },
    TooFewPoints { required: usize, found: usize },
    RepeatedConsecutivePoint { index: usize },
    RingNotClosed,
    ZeroAreaRing,
    SelfIntersection { segment_a: usize, segment_b: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CoordinateOutOfRange { index, coord } => write!(
                f,
                "coordinate {index} ({} {}) outside lon (-180, 180] / lat [-90, 90]",
                coord.lon, coord.lat
            ),
            Violation::TooFewPoints { required, found } => {
                write!(f, "needs at least {required} coordinates, found {found}")
            }
            Violation::RepeatedConsecutivePoint { index } => {
                write!(f, "coordinate {index} repeats its predecessor")
            }
            Violation::RingNotClosed => f.write_str("ring is not closed"),
            Violation::ZeroAreaRing => f.write_str("ring encloses zero area"),
            Violation::SelfIntersection {
                segment_a,
                segment_b,
            } => write!(f, "ring segments {segment_a} and {segment_b} intersect"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every invariant the geometry violates. Ring simplicity is checked
/// over all segment pairs.
pub fn validate(g: &Geometry) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, c) in g.coords().iter().enumerate() {
        if !c.in_range() {
            violations.push(Violation::CoordinateOutOfRange { index, coord: *c });
        }
    }
    match g {
        Geometry::Point(_) => {}
        Geometry::LineString(cs) => {
            if cs.len() < 2 {
                violations.push(Violation::TooFewPoints {
                    required: 2,
                    found: cs.len(),
                });
            }
            for i in 1..cs.len() {
                if cs[i] == cs[i - 1] {
                    violations.push(Violation::RepeatedConsecutivePoint { index: i });
                }
            }
        }
        Geometry::Polygon(ring) => {
            if ring.len() < 4 {
                violations.push(Violation::TooFewPoints {
                    required: 4,
                    found: ring.len(),
                });
            }
            let closed = !ring.is_empty() && ring.first() == ring.last();
            if !closed {
                violations.push(Violation::RingNotClosed);
            }
            if closed && ring.len() >= 4 {
                check_ring_simple(ring, &mut violations);
            }
        }
    }
    ValidationReport { violations }
}

fn check_ring_simple(ring: &[Coordinate], violations: &mut Vec<Violation>) {
    // Zero-length edges carry no geometry; drop them before pairing segments.
    let mut pts: Vec<Coordinate> = Vec::with_capacity(ring.len());
    for c in ring {
        if pts.last() != Some(c) {
            pts.push(*c);
        }
    }
    let n = pts.len() - 1;
    if n < 3 || signed_area(&pts) == 0.0 {
        violations.push(Violation::ZeroAreaRing);
    }
    if n < 3 {
        return;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (a0, a1) = (pts[i], pts[i + 1]);
            let (b0, b1) = (pts[j], pts[j + 1]);
            let bad = if adjacent {
                // Neighbours share one endpoint; they may only meet there.
                let shared = if j == i + 1 { a1 } else { a0 };
                let (a_far, b_far) = if j == i + 1 { (a0, b1) } else { (a1, b0) };
                orient(a_far, shared, b_far) == 0.0
                    && (on_segment_collinear(b_far, a_far, shared)
                        || on_segment_collinear(a_far, shared, b_far))
            } else {
                segments_intersect(a0, a1, b0, b1)
            };
            if bad {
                violations.push(Violation::SelfIntersection {
                    segment_a: i,
                    segment_b: j,
                });
            }
        }
    }
}

/// Twice the signed shoelace area of a closed ring (positive when
/// counter-clockwise).
pub(crate) fn signed_area(ring: &[Coordinate]) -> f64 {
    ring.windows(2)
        .map(|w| w[0].lon * w[1].lat - w[1].lon * w[0].lat)
        .sum()
}

/// Cross product of (b - a) x (c - a).
pub(crate) fn orient(a: Coordinate, b: Coordinate, c: Coordinate) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

/// `p` lies within the bounding box of segment `a`-`b`; only meaningful when the
/// three points are already known to be collinear.
pub(crate) fn on_segment_collinear(p: Coordinate, a: Coordinate, b: Coordinate) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

pub(crate) fn point_on_segment(p: Coordinate, a: Coordinate, b: Coordinate) -> bool {
    orient(a, b, p) == 0.0 && on_segment_collinear(p, a, b)
}

/// Closed segments `p1`-`p2` and `q1`-`q2` share at least one point.
pub(crate) fn segments_intersect(
    p1: Coordinate,
    p2: Coordinate,
    q1: Coordinate,
    q2: Coordinate,
) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment_collinear(p1, q1, q2))
        || (d2 == 0.0 && on_segment_collinear(p2, q1, q2))
        || (d3 == 0.0 && on_segment_collinear(q1, p1, p2))
        || (d4 == 0.0 && on_segment_collinear(q2, p1, p2))
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Number(f64),
    LParen,
    RParen,
    Comma,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, WktError> {
        Err(WktError::MalformedWkt {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Result<Option<Token>, WktError> {
        let save = self.pos;
        let tok = self.next_token();
        self.pos = save;
        tok
    }

    fn next_token(&mut self) -> Result<Option<Token>, WktError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let Some(ch) = rest.chars().next() else {
            return Ok(None);
        };
        let tok = match ch {
            '(' => {
                self.pos += 1;
                Token::LParen
            }
            ')' => {
                self.pos += 1;
                Token::RParen
            }
            ',' => {
                self.pos += 1;
                Token::Comma
            }
            c if c.is_ascii_alphabetic() => {
                let len = rest
                    .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
                    .unwrap_or(rest.len());
                self.pos += len;
                Token::Word(rest[..len].to_ascii_uppercase())
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let len = rest
                    .find(|c: char| {
                        !(c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
                    })
                    .unwrap_or(rest.len());
                let text = &rest[..len];
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        self.pos += len;
                        Token::Number(v)
                    }
                    _ => return self.err(format!("bad number {text:?}")),
                }
            }
            other => return self.err(format!("unexpected character {other:?}")),
        };
        Ok(Some(tok))
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), WktError> {
        match self.next_token()? {
            Some(t) if t == want => Ok(()),
            Some(t) => self.err(format!("expected {what}, found {t:?}")),
            None => self.err(format!("expected {what}, found end of input")),
        }
    }

    fn expect_end(&mut self) -> Result<(), WktError> {
        match self.next_token()? {
            None => Ok(()),
            Some(t) => self.err(format!("trailing input {t:?}")),
        }
    }

    fn geometry(&mut self) -> Result<Geometry, WktError> {
        let keyword = match self.next_token()? {
            Some(Token::Word(w)) => w,
            Some(t) => return self.err(format!("expected geometry keyword, found {t:?}")),
            None => return self.err("empty input"),
        };
        if let Some(Token::Word(w)) = self.peek()? {
            return match w.as_str() {
                "EMPTY" => Err(WktError::InvalidGeometry(ValidationReport {
                    violations: vec![Violation::TooFewPoints {
                        required: 1,
                        found: 0,
                    }],
                })),
                "Z" | "M" | "ZM" => Err(WktError::UnsupportedKind(format!("{keyword} {w}"))),
                _ => self.err(format!("unexpected word {w:?}")),
            };
        }
        match keyword.as_str() {
            "POINT" => {
                self.expect(Token::LParen, "'('")?;
                let c = self.coordinate()?;
                self.expect(Token::RParen, "')'")?;
                Ok(Geometry::Point(c))
            }
            "LINESTRING" => Ok(Geometry::LineString(self.coordinate_list()?)),
            "POLYGON" => {
                self.expect(Token::LParen, "'('")?;
                let exterior = self.coordinate_list()?;
                // Interior rings are parsed for syntax and then discarded.
                while let Some(Token::Comma) = self.peek()? {
                    self.next_token()?;
                    self.coordinate_list()?;
                }
                self.expect(Token::RParen, "')'")?;
                Ok(Geometry::Polygon(exterior))
            }
            "MULTIPOINT" | "MULTILINESTRING" | "MULTIPOLYGON" | "GEOMETRYCOLLECTION"
            | "TRIANGLE" | "TIN" | "POLYHEDRALSURFACE" | "CIRCULARSTRING" | "CURVEPOLYGON"
            | "COMPOUNDCURVE" | "MULTICURVE" | "MULTISURFACE" => {
                Err(WktError::UnsupportedKind(keyword))
            }
            other => self.err(format!("unknown geometry keyword {other:?}")),
        }
    }

    fn coordinate_list(&mut self) -> Result<Vec<Coordinate>, WktError> {
        self.expect(Token::LParen, "'('")?;
        let mut out = vec![self.coordinate()?];
        loop {
            match self.next_token()? {
                Some(Token::Comma) => out.push(self.coordinate()?),
                Some(Token::RParen) => return Ok(out),
                Some(t) => return self.err(format!("expected ',' or ')', found {t:?}")),
                None => return self.err("unterminated coordinate list"),
            }
        }
    }

    fn coordinate(&mut self) -> Result<Coordinate, WktError> {
        let lon = self.number()?;
        let lat = self.number()?;
        if let Some(Token::Number(_)) = self.peek()? {
            return Err(WktError::UnsupportedKind(
                "coordinates with more than two dimensions".into(),
            ));
        }
        Ok(Coordinate::new(lon, lat))
    }

    fn number(&mut self) -> Result<f64, WktError> {
        match self.next_token()? {
            Some(Token::Number(v)) => Ok(v),
            Some(t) => self.err(format!("expected number, found {t:?}")),
            None => self.err("expected number, found end of input"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> Geometry {
        Geometry::Polygon(vec![
            Coordinate::new(0.0, 0.0),
            Coordinate::new(0.0, 1.0),
            Coordinate::new(1.0, 1.0),
            Coordinate::new(1.0, 0.0),
            Coordinate::new(0.0, 0.0),
        ])
    }

    #[test]
    fn parses_point_lon_first() {
        let g = parse_wkt("POINT (-73.9626 40.8075)").unwrap();
        assert_eq!(g, Geometry::Point(Coordinate::new(-73.9626, 40.8075)));
    }

    #[test]
    fn parses_unit_square() {
        let g = parse_wkt("POLYGON ((0 0, 0 1, 1 1, 1 0, 0 0))").unwrap();
        assert_eq!(g, unit_square());
    }

    #[test]
    fn keyword_and_whitespace_insensitive() {
        let a = parse_wkt("polygon((0 0,0 1,1 1,1 0,0 0))").unwrap();
        let b = parse_wkt("  Polygon (\n ( 0  0 , 0 1, 1 1 ,1 0, 0 0 ) ) ").unwrap();
        assert_eq!(a, b);
        assert_eq!(parse_wkt("point(1 2)").unwrap(), parse_wkt("POINT (1 2)").unwrap());
    }

    #[test]
    fn rejects_out_of_range_longitude() {
        match parse_wkt("POINT (200 10)") {
            Err(WktError::InvalidGeometry(r)) => assert!(matches!(
                r.violations[0],
                Violation::CoordinateOutOfRange { .. }
            )),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_wkt("POINT (-180 0)").is_err());
        assert!(parse_wkt("POINT (180 -90)").is_ok());
    }

    #[test]
    fn typed_errors() {
        assert!(matches!(
            parse_wkt("MULTIPOLYGON (((0 0, 0 1, 1 1, 0 0)))"),
            Err(WktError::UnsupportedKind(_))
        ));
        assert!(matches!(parse_wkt("POINT (1"), Err(WktError::MalformedWkt { .. })));
        assert!(matches!(parse_wkt("POINT (1 2) x"), Err(WktError::MalformedWkt { .. })));
        assert!(matches!(parse_wkt(""), Err(WktError::MalformedWkt { .. })));
        assert!(matches!(parse_wkt("POINT (nan 2)"), Err(WktError::MalformedWkt { .. })));
        assert!(matches!(parse_wkt("POINT (1 2 3)"), Err(WktError::UnsupportedKind(_))));
        assert!(matches!(
            parse_wkt("POLYGON ((0 0, 0 1, 1 1, 1 0))"),
            Err(WktError::InvalidGeometry(_))
        ));
        assert!(matches!(parse_wkt("LINESTRING (0 0)"), Err(WktError::InvalidGeometry(_))));
        assert!(matches!(parse_wkt("POINT EMPTY"), Err(WktError::InvalidGeometry(_))));
    }

    #[test]
    fn polygon_holes_are_dropped() {
        let g = parse_wkt("POLYGON ((0 0, 0 4, 4 4, 4 0, 0 0), (1 1, 1 2, 2 2, 1 1))").unwrap();
        assert_eq!(g.coords().len(), 5);
    }

    #[test]
    fn serializes_canonical_form() {
        assert_eq!(serialize_wkt(&Geometry::Point(Coordinate::new(0.0, 0.0))), "POINT (0 0)");
        assert_eq!(
            serialize_wkt(&unit_square()),
            "POLYGON ((0 0, 0 1, 1 1, 1 0, 0 0))"
        );
        let line = Geometry::LineString(vec![Coordinate::new(-73.87, 40.9), Coordinate::new(-73.8, 41.0)]);
        assert_eq!(serialize_wkt(&line), "LINESTRING (-73.87 40.9, -73.8 41)");
    }

    #[test]
    fn validation_reports() {
        assert!(validate(&unit_square()).is_valid());

        let bowtie = Geometry::Polygon(vec![
            Coordinate::new(0.0, 0.0),
            Coordinate::new(1.0, 1.0),
            Coordinate::new(1.0, 0.0),
            Coordinate::new(0.0, 1.0),
            Coordinate::new(0.0, 0.0),
        ]);
        let r = validate(&bowtie);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::SelfIntersection { .. })));

        let two = Geometry::Polygon(vec![Coordinate::new(0.0, 0.0), Coordinate::new(1.0, 1.0)]);
        let r = validate(&two);
        assert!(r.violations.contains(&Violation::RingNotClosed));
        assert!(r.violations.contains(&Violation::TooFewPoints { required: 4, found: 2 }));

        let dup = Geometry::LineString(vec![
            Coordinate::new(0.0, 0.0),
            Coordinate::new(0.0, 0.0),
            Coordinate::new(1.0, 0.0),
        ]);
        assert_eq!(
            validate(&dup).violations,
            vec![Violation::RepeatedConsecutivePoint { index: 1 }]
        );

        let flat = Geometry::Polygon(vec![
            Coordinate::new(0.0, 0.0),
            Coordinate::new(1.0, 0.0),
            Coordinate::new(2.0, 0.0),
            Coordinate::new(0.0, 0.0),
        ]);
        assert!(validate(&flat).violations.contains(&Violation::ZeroAreaRing));
    }

    /// Brute-force check: does any pair of non-adjacent ring edges meet?
    fn brute_force_self_intersects(ring: &[Coordinate]) -> bool {
        let n = ring.len() - 1;
        let seg_hit = |a: Coordinate, b: Coordinate, c: Coordinate, d: Coordinate| {
            // Parametric solve; collinear overlaps handled by sampling.
            let den = (b.lon - a.lon) * (d.lat - c.lat) - (b.lat - a.lat) * (d.lon - c.lon);
            if den == 0.0 {
                return (0..=100).any(|k| {
                    let t = k as f64 / 100.0;
                    let p = Coordinate::new(a.lon + t * (b.lon - a.lon), a.lat + t * (b.lat - a.lat));
                    point_on_segment(p, c, d)
                });
            }
            let t = ((c.lon - a.lon) * (d.lat - c.lat) - (c.lat - a.lat) * (d.lon - c.lon)) / den;
            let u = ((c.lon - a.lon) * (b.lat - a.lat) - (c.lat - a.lat) * (b.lon - a.lon)) / den;
            (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
        };
        (0..n).any(|i| {
            ((i + 2)..n).any(|j| !(i == 0 && j == n - 1) && seg_hit(ring[i], ring[i + 1], ring[j], ring[j + 1]))
        })
    }

    #[test]
    fn bowtie_matches_brute_force() {
        let ring = [
            Coordinate::new(0.0, 0.0),
            Coordinate::new(1.0, 1.0),
            Coordinate::new(1.0, 0.0),
            Coordinate::new(0.0, 1.0),
            Coordinate::new(0.0, 0.0),
        ];
        assert!(brute_force_self_intersects(&ring));
        assert!(!brute_force_self_intersects(unit_square().coords()));
    }

    #[test]
    fn snap_closes_nearly_closed_ring() {
        let text = "POLYGON ((0 0, 0 1, 1 1, 1 0, 0.0000000001 0))";
        assert!(parse_wkt(text).is_err());
        let g = parse_wkt_with(text, ParseOptions { snap_closure: true, ..Default::default() }).unwrap();
        assert_eq!(g, unit_square());
        let far = "POLYGON ((0 0, 0 1, 1 1, 1 0, 0.001 0))";
        assert!(parse_wkt_with(far, ParseOptions { snap_closure: true, ..Default::default() }).is_err());
    }

    #[test]
    fn lat_first_swaps() {
        let g = parse_wkt_with(
            "POINT (40.8075 -73.9626)",
            ParseOptions { lat_first: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(g, Geometry::Point(Coordinate::new(-73.9626, 40.8075)));
    }

    #[test]
    fn vertex_centroid_ignores_closing_vertex() {
        assert_eq!(unit_square().vertex_centroid(), Coordinate::new(0.5, 0.5));
    }

    fn coord_strategy() -> impl Strategy<Value = Coordinate> {
        (-179.999f64..180.0, -90.0f64..=90.0).prop_map(|(lon, lat)| Coordinate::new(lon, lat))
    }

    fn star_polygon() -> impl Strategy<Value = Geometry> {
        (
            coord_strategy(),
            proptest::collection::vec(0.1f64..1.0, 3..10),
        )
            .prop_map(|(c, radii)| {
                let c = Coordinate::new(c.lon.clamp(-170.0, 170.0), c.lat.clamp(-80.0, 80.0));
                let n = radii.len();
                let mut ring: Vec<Coordinate> = radii
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let a = i as f64 / n as f64 * std::f64::consts::TAU;
                        Coordinate::new(c.lon + r * a.cos(), c.lat + r * a.sin())
                    })
                    .collect();
                ring.push(ring[0]);
                Geometry::Polygon(ring)
            })
    }

    fn any_geometry() -> impl Strategy<Value = Geometry> {
        prop_oneof![
            coord_strategy().prop_map(Geometry::Point),
            proptest::collection::vec(coord_strategy(), 2..8).prop_filter_map("dup", |cs| {
                let g = Geometry::LineString(cs);
                validate(&g).is_valid().then_some(g)
            }),
            star_polygon().prop_filter("invalid", |g| validate(g).is_valid()),
        ]
    }

    proptest! {
        #[test]
        fn wkt_round_trip(g in any_geometry()) {
            let text = serialize_wkt(&g);
            prop_assert_eq!(parse_wkt(&text).unwrap(), g);
        }

        #[test]
        fn parser_is_total(s in "\\PC{0,40}") {
            let _ = parse_wkt(&s);
        }

        #[test]
        fn parser_is_total_on_wkt_like_input(s in "(POINT|POLYGON|LINESTRING)? ?[(), 0-9.eE+-]{0,30}") {
            if let Ok(g) = parse_wkt(&s) {
                prop_assert!(validate(&g).is_valid());
            }
        }

        #[test]
        fn simplicity_check_matches_brute_force(g in star_polygon(), swap in 0usize..8) {
            // Swapping two vertices frequently produces self-intersections.
            let mut ring = g.coords().to_vec();
            let n = ring.len() - 1;
            ring.swap(swap % n, (swap + 2) % n);
            ring[n] = ring[0];
            let reported = validate(&Geometry::Polygon(ring.clone()))
                .violations
                .iter()
                .any(|v| matches!(v, Violation::SelfIntersection { .. }));
            prop_assert_eq!(reported, brute_force_self_intersects(&ring));
        }
    }
}
