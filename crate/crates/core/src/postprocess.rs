//! Relation clean-up after extraction: low-frequency relations are merged
//! into similar frequent ones or dropped, then similar relations are
//! clustered and an LLM decides which to merge.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{cosine, ChatRequest, Gateway, GatewayError, Message};
use crate::geotools::Rcc5Relation;
use crate::instruct::TemplateSet;
use crate::kg::{fold, UrbanGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Relations with at most this many facts count as low-frequency.
    pub freq_threshold: u64,
    pub sim_threshold: f64,
    pub link_sim: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { freq_threshold: 5, sim_threshold: 0.85, link_sim: 0.80 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStage {
    Frequency,
    Cluster,
}

/// Relabeling decided by one stage. Keys of `mapping` and members of
/// `dropped` are case-folded labels; targets keep their display form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub stage: PlanStage,
    pub mapping: BTreeMap<String, String>,
    pub dropped: BTreeSet<String>,
}

impl MergePlan {
    pub fn empty(stage: PlanStage) -> Self {
        MergePlan { stage, mapping: BTreeMap::new(), dropped: BTreeSet::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty() && self.dropped.is_empty()
    }

    /// Targets must not be sources or dropped labels.
    pub fn validate(&self) -> Result<(), String> {
        for (src, tgt) in &self.mapping {
            let t = fold(tgt);
            if self.mapping.contains_key(&t) {
                return Err(format!("target {tgt:?} of {src:?} is itself remapped"));
            }
            if self.dropped.contains(&t) {
                return Err(format!("target {tgt:?} is also dropped"));
            }
        }
        Ok(())
    }
}

pub fn apply_plan(g: &UrbanGraph, plan: &MergePlan) -> UrbanGraph {
    g.relabel(&plan.mapping, &plan.dropped)
}

/// RCC-5 codes produced by completion are never merged or dropped.
pub fn is_protected(label: &str) -> bool {
    Rcc5Relation::from_code(label.trim()).is_some()
}

fn labels(g: &UrbanGraph) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = g
        .relations()
        .filter(|r| !is_protected(&r.label))
        .map(|r| (r.label.clone(), r.frequency))
        .collect();
    v.sort_by_key(|(l, _)| fold(l));
    v
}

/// Stage one. Each relation with frequency at most `freq_threshold` is
/// relabeled to its most similar frequent relation when the cosine reaches
/// `sim_threshold` (ties go to the lexicographically smaller label), and its
/// facts are dropped otherwise. Embedding failures leave the graph untouched.
pub fn merge_low_frequency(
    g: &UrbanGraph,
    gateway: &Gateway,
    cfg: &MergeConfig,
) -> Result<(UrbanGraph, MergePlan), GatewayError> {
    let all = labels(g);
    let (low, high): (Vec<_>, Vec<_>) = all.into_iter().partition(|(_, f)| *f <= cfg.freq_threshold);
    let mut plan = MergePlan::empty(PlanStage::Frequency);
    if low.is_empty() {
        return Ok((g.clone(), plan));
    }
    if high.is_empty() {
        plan.dropped = low.iter().map(|(l, _)| fold(l)).collect();
        return Ok((apply_plan(g, &plan), plan));
    }
    let texts: Vec<String> = low.iter().chain(&high).map(|(l, _)| l.clone()).collect();
    let vecs = gateway.embed(&texts, "merge")?;
    let (lv, hv) = vecs.split_at(low.len());
    for ((label, _), v) in low.iter().zip(lv) {
        let mut best: Option<(f64, &str)> = None;
        for ((h, _), w) in high.iter().zip(hv) {
            let s = cosine(v, w);
            // `high` is sorted, so a strict comparison keeps the smaller label on ties.
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, h));
            }
        }
        match best {
            Some((s, h)) if s >= cfg.sim_threshold => {
                tracing::debug!(label, target = h, sim = s, "merging low-frequency relation");
                plan.mapping.insert(fold(label), h.to_string());
            }
            _ => {
                plan.dropped.insert(fold(label));
            }
        }
    }
    Ok((apply_plan(g, &plan), plan))
}

/// Single-link clusters of labels (sorted by folded label) whose pairwise
/// cosine reaches `link_sim`. Clusters and members are in label order.
pub fn single_link_clusters(labels: &[String], vectors: &[Vec<f64>], link_sim: f64) -> Vec<Vec<String>> {
    let n = labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&vectors[i], &vectors[j]) >= link_sim {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(label.clone());
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeReply {
    None,
    Merges(Vec<(Vec<String>, String)>),
}

/// Reads `merge: a, b -> canonical` lines. A reply with neither merge lines
/// nor a bare "none" is unparseable.
pub fn parse_merge_reply(reply: &str) -> Option<MergeReply> {
    let mut merges = Vec::new();
    let mut saw_none = false;
    for line in reply.lines() {
        let line = line.trim().trim_start_matches(['-', '*', ' ']);
        let lower = line.to_lowercase();
        if lower.trim_end_matches('.') == "none" {
            saw_none = true;
            continue;
        }
        let Some(rest) = lower.strip_prefix("merge:").map(|_| &line["merge:".len()..]) else { continue };
        let Some((lhs, canon)) = rest.split_once("->") else { continue };
        let canon = canon.trim().trim_end_matches('.').trim();
        let members: Vec<String> =
            lhs.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if canon.is_empty() || members.is_empty() {
            continue;
        }
        merges.push((members, canon.to_string()));
    }
    if !merges.is_empty() {
        Some(MergeReply::Merges(merges))
    } else if saw_none {
        Some(MergeReply::None)
    } else {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterOutcome {
    pub clusters: Vec<Vec<String>>,
    pub warnings: Vec<String>,
}

/// Stage two. Relations are clustered by embedding similarity and each
/// multi-member cluster is put to the model. Failures of any kind leave the
/// affected cluster unmerged and add a warning.
pub fn cluster_and_merge(
    g: &UrbanGraph,
    gateway: &Gateway,
    templates: &TemplateSet,
    model_id: &str,
    cfg: &MergeConfig,
) -> (UrbanGraph, MergePlan, ClusterOutcome) {
    let mut plan = MergePlan::empty(PlanStage::Cluster);
    let mut out = ClusterOutcome::default();
    let names: Vec<String> = labels(g).into_iter().map(|(l, _)| l).collect();
    if names.len() < 2 {
        return (g.clone(), plan, out);
    }
    let vecs = match gateway.embed(&names, "merge") {
        Ok(v) => v,
        Err(e) => {
            out.warnings.push(format!("relation embedding failed: {e}"));
            return (g.clone(), plan, out);
        }
    };
    out.clusters = single_link_clusters(&names, &vecs, cfg.link_sim);
    let mut targets: BTreeSet<String> = BTreeSet::new();
    for cluster in out.clusters.iter().filter(|c| c.len() > 1) {
        let members: BTreeMap<String, &String> = cluster.iter().map(|m| (fold(m), m)).collect();
        let reply = templates
            .relation_merge(std::slice::from_ref(cluster))
            .map_err(|e| e.to_string())
            .and_then(|p| {
                let req = ChatRequest::new(model_id, vec![Message::user(p)]).purpose("merge");
                gateway.chat(&req).map(|r| r.content).map_err(|e| e.to_string())
            });
        let reply = match reply {
            Ok(r) => r,
            Err(e) => {
                out.warnings.push(format!("cluster {cluster:?}: {e}"));
                continue;
            }
        };
        let merges = match parse_merge_reply(&reply) {
            Some(MergeReply::Merges(m)) => m,
            Some(MergeReply::None) => continue,
            None => {
                out.warnings.push(format!("cluster {cluster:?}: unparseable merge reply"));
                continue;
            }
        };
        for (srcs, canon) in merges {
            let ck = fold(&canon);
            // Prefer the existing spelling of a member used as the canonical label.
            let canon = members.get(&ck).map_or(canon.clone(), |m| (*m).clone());
            let srcs: Vec<String> = srcs.iter().map(|s| fold(s)).filter(|s| *s != ck).collect();
            let foreign = srcs.iter().find(|s| !members.contains_key(*s));
            if let Some(f) = foreign {
                out.warnings.push(format!("cluster {cluster:?}: {f:?} is not a member, line skipped"));
                continue;
            }
            if plan.mapping.contains_key(&ck) || srcs.iter().any(|s| plan.mapping.contains_key(s) || targets.contains(s)) {
                out.warnings.push(format!("cluster {cluster:?}: conflicting merge into {canon:?}, line skipped"));
                continue;
            }
            targets.insert(ck);
            for s in srcs {
                plan.mapping.insert(s, canon.clone());
            }
        }
    }
    for w in &out.warnings {
        tracing::warn!("{w}");
    }
    (apply_plan(g, &plan), plan, out)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
enum AuditLine {
    Merge { stage: PlanStage, source: String, target: String },
    Drop { stage: PlanStage, label: String },
}

pub fn plan_lines(plan: &MergePlan) -> Vec<String> {
    let merges = plan.mapping.iter().map(|(s, t)| AuditLine::Merge {
        stage: plan.stage,
        source: s.clone(),
        target: t.clone(),
    });
    let drops = plan.dropped.iter().map(|l| AuditLine::Drop { stage: plan.stage, label: l.clone() });
    merges.chain(drops).map(|l| serde_json::to_string(&l).expect("audit line serializes")).collect()
}

pub fn save_plans(path: &Path, plans: &[MergePlan]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in plans {
        for l in plan_lines(p) {
            writeln!(w, "{l}")?;
        }
    }
    w.flush()
}

/// Reads an audit file back into one plan per stage, in stage order.
pub fn load_plans(path: &Path) -> std::io::Result<Vec<MergePlan>> {
    let mut plans: BTreeMap<PlanStage, MergePlan> = BTreeMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: AuditLine = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        match l {
            AuditLine::Merge { stage, source, target } => {
                plans.entry(stage).or_insert_with(|| MergePlan::empty(stage)).mapping.insert(fold(&source), target);
            }
            AuditLine::Drop { stage, label } => {
                plans.entry(stage).or_insert_with(|| MergePlan::empty(stage)).dropped.insert(fold(&label));
            }
        }
    }
    Ok(plans.into_values().collect())
}
