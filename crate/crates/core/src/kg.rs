//! Urban knowledge graph: entities, relations and facts, plus the task records
//! the extraction pipelines consume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Spatial,
    Temporal,
    Functional,
    #[default]
    Other,
}

impl View {
    /// The three views the extraction prompts decompose text into.
    pub const EXTRACTION: [View; 3] = [View::Spatial, View::Temporal, View::Functional];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Spatial => "spatial",
            View::Temporal => "temporal",
            View::Functional => "functional",
            View::Other => "other",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spatial" => Ok(View::Spatial),
            "temporal" => Ok(View::Temporal),
            "functional" => Ok(View::Functional),
            "other" => Ok(View::Other),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "RTE")]
    Rte,
    #[serde(rename = "KGC")]
    Kgc,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Rte => "RTE",
            Stage::Kgc => "KGC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub geometry: Option<Geometry>,
    pub entity_type: Option<String>,
    pub views: BTreeSet<View>,
}

impl Entity {
    pub fn named(name: impl Into<String>) -> Self {
        Entity { name: name.into().trim().to_string(), geometry: None, entity_type: None, views: BTreeSet::new() }
    }

    pub fn with_geometry(mut self, g: Geometry) -> Self {
        self.geometry = Some(g);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub label: String,
    pub view: View,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub view: View,
    pub provenance: Provenance,
    /// Head and tail may share a name only when this is set.
    #[serde(default)]
    pub self_loop: bool,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str, view: View, provenance: Provenance) -> Self {
        Triplet {
            head: head.trim().to_string(),
            relation: relation.trim().to_string(),
            tail: tail.trim().to_string(),
            view,
            provenance,
            self_loop: false,
        }
    }

    /// Case-folded (head, relation, tail) identity.
    pub fn key(&self) -> (String, String, String) {
        (fold(&self.head), fold(&self.relation), fold(&self.tail))
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.head, self.relation, self.tail)
    }
}

/// Identity key for entity names and relation labels.
pub fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Inserted,
    Duplicate,
    Rejected(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub facts: usize,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entities={} relations={} facts={}", self.entities, self.relations, self.facts)
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Integrity { path: PathBuf, message: String },
}

/// Entity, relation and fact sets keyed by case-folded names. Iteration order
/// is insertion order, which keeps exports deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UrbanGraph {
    entities: IndexMap<String, Entity>,
    relations: IndexMap<String, Relation>,
    facts: IndexMap<(String, String, String), Triplet>,
}

impl UrbanGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn facts(&self) -> impl Iterator<Item = &Triplet> {
        self.facts.values()
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.get(&fold(name))
    }

    pub fn relation(&self, label: &str) -> Option<&Relation> {
        self.relations.get(&fold(label))
    }

    pub fn contains_fact(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.facts.contains_key(&(fold(head), fold(relation), fold(tail)))
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats { entities: self.entities.len(), relations: self.relations.len(), facts: self.facts.len() }
    }

    /// Inserts or enriches an entity. Existing fields win; views are unioned.
    pub fn upsert_entity(&mut self, e: Entity) -> bool {
        let key = fold(&e.name);
        if key.is_empty() {
            return false;
        }
        match self.entities.get_mut(&key) {
            Some(cur) => {
                if cur.geometry.is_none() {
                    cur.geometry = e.geometry;
                }
                if cur.entity_type.is_none() {
                    cur.entity_type = e.entity_type;
                }
                cur.views.extend(e.views);
            }
            None => {
                let mut e = e;
                e.name = e.name.trim().to_string();
                self.entities.insert(key, e);
            }
        }
        true
    }

    pub fn add_triplet(&mut self, t: Triplet) -> AddOutcome {
        let (h, r, tl) = t.key();
        if h.is_empty() || tl.is_empty() {
            return AddOutcome::Rejected("empty entity name");
        }
        if r.is_empty() {
            return AddOutcome::Rejected("empty relation label");
        }
        if h == tl && !t.self_loop {
            return AddOutcome::Rejected("unflagged self-loop");
        }
        if self.facts.contains_key(&(h.clone(), r.clone(), tl.clone())) {
            return AddOutcome::Duplicate;
        }
        for name in [&t.head, &t.tail] {
            let mut e = Entity::named(name.as_str());
            e.views.insert(t.view);
            self.upsert_entity(e);
        }
        self.relations
            .entry(r.clone())
            .or_insert_with(|| Relation { label: t.relation.clone(), view: t.view, frequency: 0 })
            .frequency += 1;
        self.facts.insert((h, r, tl), t);
        AddOutcome::Inserted
    }

    /// Union of two graphs. Facts of `other` are re-added, so relation
    /// frequencies count distinct facts of the union.
    pub fn merge(&self, other: &UrbanGraph) -> UrbanGraph {
        let mut out = self.clone();
        for e in other.entities.values() {
            out.upsert_entity(e.clone());
        }
        for r in other.relations.values() {
            out.relations
                .entry(fold(&r.label))
                .or_insert_with(|| Relation { frequency: 0, ..r.clone() });
        }
        for t in other.facts.values() {
            out.add_triplet(t.clone());
        }
        out.relations.retain(|_, r| r.frequency > 0);
        out
    }

    /// Rebuilds the fact set with relation labels rewritten through `mapping`
    /// (keys case-folded) and facts of `dropped` labels removed. Entities are
    /// all kept; facts that collapse onto an existing fact are deduplicated.
    pub fn relabel(&self, mapping: &BTreeMap<String, String>, dropped: &BTreeSet<String>) -> UrbanGraph {
        let mut out = UrbanGraph { entities: self.entities.clone(), ..Default::default() };
        for t in self.facts.values() {
            let key = fold(&t.relation);
            if dropped.contains(&key) {
                continue;
            }
            let mut t = t.clone();
            if let Some(target) = mapping.get(&key) {
                if let Some(rel) = self.relations.get(&fold(target)) {
                    t.relation = rel.label.clone();
                    t.view = rel.view;
                } else {
                    t.relation = target.clone();
                }
            }
            out.add_triplet(t);
        }
        out
    }

    /// Checks referential integrity and that frequencies match fact counts.
    pub fn check_integrity(&self) -> Result<(), String> {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for (k, t) in &self.facts {
            if !self.entities.contains_key(&k.0) || !self.entities.contains_key(&k.2) {
                return Err(format!("fact {t} references a missing entity"));
            }
            if !self.relations.contains_key(&k.1) {
                return Err(format!("fact {t} references a missing relation"));
            }
            *counts.entry(k.1.as_str()).or_default() += 1;
        }
        for (k, r) in &self.relations {
            let n = counts.get(k.as_str()).copied().unwrap_or(0);
            if r.frequency != n {
                return Err(format!("relation {:?} has frequency {} but {} facts", r.label, r.frequency, n));
            }
        }
        Ok(())
    }

    /// Writes the graph as JSON lines: entities, relations, facts, then one
    /// stats line.
    pub fn export(&self, path: &Path) -> Result<(), KgError> {
        let io = |source| KgError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for line in self.export_lines() {
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn export_lines(&self) -> Vec<String> {
        let mut lines = Vec::with_capacity(self.entities.len() + self.relations.len() + self.facts.len() + 1);
        let ser = |l: ExportLine| serde_json::to_string(&l).expect("export lines serialize");
        for e in self.entities.values() {
            lines.push(ser(ExportLine::Entity(e.clone())));
        }
        for r in self.relations.values() {
            lines.push(ser(ExportLine::Relation(r.clone())));
        }
        for t in self.facts.values() {
            lines.push(ser(ExportLine::Fact(FactLine {
                head: t.head.clone(),
                relation: t.relation.clone(),
                tail: t.tail.clone(),
                view: t.view,
                record_id: t.provenance.record_id.clone(),
                stage: t.provenance.stage,
                self_loop: t.self_loop,
            })));
        }
        lines.push(ser(ExportLine::Stats(self.stats())));
        lines
    }

    pub fn import(path: &Path) -> Result<UrbanGraph, KgError> {
        let file = File::open(path).map_err(|source| KgError::Io { path: path.to_path_buf(), source })?;
        let mut g = UrbanGraph::new();
        let mut declared: BTreeMap<String, u64> = BTreeMap::new();
        let mut stats = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| KgError::Io { path: path.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ExportLine = serde_json::from_str(&line).map_err(|e| KgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ExportLine::Entity(e) => {
                    g.upsert_entity(e);
                }
                ExportLine::Relation(r) => {
                    declared.insert(fold(&r.label), r.frequency);
                    g.relations.insert(fold(&r.label), Relation { frequency: 0, ..r });
                }
                ExportLine::Fact(f) => {
                    let t = Triplet {
                        head: f.head,
                        relation: f.relation,
                        tail: f.tail,
                        view: f.view,
                        provenance: Provenance { record_id: f.record_id, stage: f.stage },
                        self_loop: f.self_loop,
                    };
                    if g.add_triplet(t) != AddOutcome::Inserted {
                        return Err(KgError::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            message: "duplicate or invalid fact".into(),
                        });
                    }
                }
                ExportLine::Stats(s) => stats = Some(s),
            }
        }
        let integrity = |message: String| KgError::Integrity { path: path.to_path_buf(), message };
        match stats {
            Some(s) if s == g.stats() => {}
            Some(s) => return Err(integrity(format!("stats line says {s}, file holds {}", g.stats()))),
            None => return Err(integrity("missing stats line".into())),
        }
        for (k, r) in &g.relations {
            if declared.get(k) != Some(&r.frequency) {
                return Err(integrity(format!("frequency mismatch for relation {:?}", r.label)));
            }
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ExportLine {
    Entity(Entity),
    Relation(Relation),
    Fact(FactLine),
    Stats(GraphStats),
}

#[derive(Serialize, Deserialize)]
struct FactLine {
    head: String,
    relation: String,
    tail: String,
    view: View,
    record_id: String,
    stage: Stage,
    #[serde(default)]
    self_loop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RteRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgcRecord {
    pub id: String,
    pub head_name: String,
    pub head_geometry: Geometry,
    pub tail_name: String,
    pub tail_geometry: Geometry,
}
