//! Raw urban record loading, text cleaning and the short/meaningless filters.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{parse_wkt, Geometry};
use crate::kg::{fold, KgcRecord, RteRecord};

pub const MIN_DESCRIPTION_WORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    #[serde(rename = "AOI")]
    Aoi,
    Road,
    #[serde(rename = "POI")]
    Poi,
    Review,
    WebPage,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] =
        [SourceKind::Aoi, SourceKind::Road, SourceKind::Poi, SourceKind::Review, SourceKind::WebPage];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Aoi => "AOI",
            SourceKind::Road => "Road",
            SourceKind::Poi => "POI",
            SourceKind::Review => "Review",
            SourceKind::WebPage => "WebPage",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        SourceKind::ALL
            .into_iter()
            .find(|k| k.as_str().to_lowercase() == norm)
            .ok_or_else(|| format!("unknown source kind {s:?} (expected AOI, Road, POI, Review or WebPage)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub source: SourceKind,
    pub name: Option<String>,
    pub geometry_wkt: Option<String>,
    pub extra: BTreeMap<String, String>,
    pub description: Option<String>,
}

impl RawRecord {
    pub fn geometry(&self) -> Option<Geometry> {
        self.geometry_wkt.as_deref().and_then(|w| parse_wkt(w).ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Null,
    TooShort,
    Meaningless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Kept,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<RawRecord>,
    pub errors: Vec<LineError>,
    /// Where the line errors were written, if there were any.
    pub error_report: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Strips non-ASCII and control characters, removes URL-like tokens and
/// collapses whitespace.
pub fn clean_text(s: &str) -> String {
    let ascii: String = s
        .chars()
        .filter_map(|c| match c {
            c if !c.is_ascii() => None,
            c if c.is_ascii_control() => c.is_ascii_whitespace().then_some(' '),
            c => Some(c),
        })
        .collect();
    ascii
        .split_whitespace()
        .filter(|tok| !is_url(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_url(tok: &str) -> bool {
    let lower = tok.to_ascii_lowercase();
    lower.contains("://") || lower.trim_start_matches(|c: char| !c.is_ascii_alphanumeric()).starts_with("www.")
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn filter_record(r: &RawRecord) -> FilterOutcome {
    let Some(desc) = r.description.as_deref() else {
        return FilterOutcome::Dropped(DropReason::Null);
    };
    let cleaned = clean_text(desc);
    if let Some(name) = r.name.as_deref() {
        let name = clean_text(name);
        if !name.is_empty() && fold(&name) == fold(&cleaned) {
            return FilterOutcome::Dropped(DropReason::Meaningless);
        }
    }
    if word_count(&cleaned) < MIN_DESCRIPTION_WORDS {
        return FilterOutcome::Dropped(DropReason::TooShort);
    }
    FilterOutcome::Kept
}

fn parse_line(obj: Value, line: usize, kind: SourceKind) -> Result<RawRecord, String> {
    let Value::Object(map) = obj else {
        return Err("expected a JSON object".into());
    };
    let mut id = None;
    let mut name = None;
    let mut geometry_wkt = None;
    let mut description = None;
    let mut extra = BTreeMap::new();
    for (k, v) in map {
        let text = match &v {
            Value::Null => None,
            Value::String(s) => Some(s.clone()),
            other => Some(other.to_string()),
        };
        match k.as_str() {
            "source" => {
                let s = text.ok_or("source is null")?;
                let declared = SourceKind::from_str(&s)?;
                if declared != kind {
                    return Err(format!("source {declared} does not match expected {kind}"));
                }
            }
            "id" => id = text,
            "name" => name = text,
            "geometry" => {
                if let Some(w) = &text {
                    parse_wkt(w).map_err(|e| format!("geometry: {e}"))?;
                }
                geometry_wkt = text;
            }
            "description" => description = text,
            _ => {
                if let Some(t) = text {
                    extra.insert(k, t);
                }
            }
        }
    }
    Ok(RawRecord {
        id: id.unwrap_or_else(|| format!("{}-{line}", kind.as_str().to_lowercase())),
        source: kind,
        name,
        geometry_wkt,
        extra,
        description,
    })
}

/// Path of the line-error report for an input file.
pub fn error_report_path(input: &Path) -> PathBuf {
    let mut s = input.as_os_str().to_owned();
    s.push(".errors.jsonl");
    PathBuf::from(s)
}

/// Reads one JSON object per line. Bad lines are collected (and written to
/// `<input>.errors.jsonl`) rather than aborting the load.
pub fn load_records(path: &Path, kind: SourceKind) -> Result<LoadReport, IngestError> {
    let io = |source| IngestError::Io { path: path.to_path_buf(), source };
    let text = fs::read_to_string(path).map_err(io)?;
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(line)
            .map_err(|e| e.to_string())
            .and_then(|v| parse_line(v, i + 1, kind));
        match parsed {
            Ok(r) => report.records.push(r),
            Err(message) => report.errors.push(LineError { line: i + 1, message }),
        }
    }
    if !report.errors.is_empty() {
        let out = error_report_path(path);
        let body: String = report
            .errors
            .iter()
            .map(|e| serde_json::to_string(e).expect("line error serializes") + "\n")
            .collect();
        fs::write(&out, body).map_err(|source| IngestError::Io { path: out.clone(), source })?;
        report.error_report = Some(out);
    }
    Ok(report)
}

/// Builds extraction records from kept records and samples head/tail pairs of
/// records that carry valid geometry. `kgc_limit` defaults to the number of
/// extraction records and is always capped by it.
pub fn to_task_records(rs: &[RawRecord], kgc_limit: Option<usize>, seed: u64) -> (Vec<RteRecord>, Vec<KgcRecord>) {
    let rte: Vec<RteRecord> = rs
        .iter()
        .filter_map(|r| {
            let text = clean_text(r.description.as_deref()?);
            (!text.is_empty()).then(|| RteRecord { id: r.id.clone(), text })
        })
        .collect();

    let mut seen = HashSet::new();
    let located: Vec<(&RawRecord, String, Geometry)> = rs
        .iter()
        .filter_map(|r| {
            let name = clean_text(r.name.as_deref()?);
            let g = r.geometry()?;
            (!name.is_empty() && seen.insert(fold(&name))).then_some((r, name, g))
        })
        .collect();

    let n = located.len();
    let total = n * n.saturating_sub(1) / 2;
    let k = kgc_limit.unwrap_or(rte.len()).min(rte.len()).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, k).into_vec();
    picks.sort_unstable();
    let kgc = picks
        .into_iter()
        .map(|p| {
            let (i, j) = unrank_pair(p, n);
            let (a, b) = (&located[i], &located[j]);
            KgcRecord {
                id: format!("{}~{}", a.0.id, b.0.id),
                head_name: a.1.clone(),
                head_geometry: a.2.clone(),
                tail_name: b.1.clone(),
                tail_geometry: b.2.clone(),
            }
        })
        .collect();
    (rte, kgc)
}

/// Maps a rank in `0..n(n-1)/2` to the pair (i, j), i < j, in row-major order.
fn unrank_pair(mut p: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= n - 1 - i {
        p -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}
