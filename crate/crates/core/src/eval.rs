//! Accuracy from judgments, model-based grading with repeat voting,
//! Spearman consistency between graders, and cost reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::parallel_map;
use crate::gateway::{ChatRequest, CostLedger, Gateway, Message, UsageTotals};
use crate::geotools::{toolkit_evidence, Rcc5Relation};
use crate::instruct::TemplateSet;
use crate::kg::{KgcRecord, Stage, Triplet};

pub const CONFIDENCE_MIN: f64 = 1.0;
pub const CONFIDENCE_MAX: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no judgments to score")]
    EmptyInput,
    #[error("judgments mix RTE and KGC items")]
    MixedTasks,
    #[error("sequences have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("input is constant or shorter than two items")]
    DegenerateInput,
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Evaluator {
    Human,
    Model,
}

/// The judged outcome: a true/false verdict for completion, and the counts
/// of true and false triplets for extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verdict {
    Rte { true_count: u32, false_count: u32 },
    Kgc { verdict: bool },
}

impl Verdict {
    pub fn task(self) -> Stage {
        match self {
            Verdict::Rte { .. } => Stage::Rte,
            Verdict::Kgc { .. } => Stage::Kgc,
        }
    }

    /// Per-item score in [0, 1]; an extraction judged with no triplets scores 0.
    pub fn score(self) -> f64 {
        match self {
            Verdict::Kgc { verdict } => f64::from(u8::from(verdict)),
            Verdict::Rte { true_count, false_count } if true_count + false_count == 0 => 0.0,
            Verdict::Rte { true_count, false_count } => f64::from(true_count) / f64::from(true_count + false_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJudgment {
    pub item_id: String,
    pub task: Stage,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub confidence: f64,
    pub evaluator: Evaluator,
    #[serde(default)]
    pub repeat_index: u32,
}

impl EvalJudgment {
    pub fn check(&self) -> Result<(), String> {
        if self.verdict.task() != self.task {
            return Err(format!("{}: verdict does not match task {}", self.item_id, self.task));
        }
        if !(CONFIDENCE_MIN..=CONFIDENCE_MAX).contains(&self.confidence) {
            return Err(format!("{}: confidence {} outside [1, 5]", self.item_id, self.confidence));
        }
        Ok(())
    }
}

fn single_task(js: &[EvalJudgment]) -> Result<Stage, EvalError> {
    let first = js.first().ok_or(EvalError::EmptyInput)?.task;
    if js.iter().any(|j| j.task != first) {
        return Err(EvalError::MixedTasks);
    }
    Ok(first)
}

/// Extraction: true triplets over all judged triplets. Completion: fraction
/// of True verdicts.
pub fn accuracy(js: &[EvalJudgment]) -> Result<f64, EvalError> {
    match single_task(js)? {
        Stage::Kgc => Ok(js.iter().map(|j| j.verdict.score()).sum::<f64>() / js.len() as f64),
        Stage::Rte => {
            let (t, f) = js.iter().fold((0u64, 0u64), |(t, f), j| match j.verdict {
                Verdict::Rte { true_count, false_count } => (t + u64::from(true_count), f + u64::from(false_count)),
                Verdict::Kgc { .. } => (t, f),
            });
            if t + f == 0 {
                return Err(EvalError::EmptyInput);
            }
            Ok(t as f64 / (t + f) as f64)
        }
    }
}

pub fn mean_confidence(js: &[EvalJudgment]) -> Option<f64> {
    (!js.is_empty()).then(|| js.iter().map(|j| j.confidence).sum::<f64>() / js.len() as f64)
}

/// Most frequent verdict. Ties go to the more conservative answer: False for
/// completion, and for extraction the tied count pair with the lowest share
/// of true triplets (then fewer true, then more false triplets).
pub fn majority_vote(votes: &[Verdict]) -> Option<Verdict> {
    let mut counts: BTreeMap<Verdict, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(*v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    counts
        .into_iter()
        .filter(|(_, n)| *n == top)
        .map(|(v, _)| v)
        .min_by(|a, b| conservative_key(*a).partial_cmp(&conservative_key(*b)).expect("finite scores"))
}

fn conservative_key(v: Verdict) -> (f64, i64, i64) {
    match v {
        Verdict::Kgc { verdict } => (v.score(), i64::from(verdict), 0),
        Verdict::Rte { true_count, false_count } => (v.score(), i64::from(true_count), -i64::from(false_count)),
    }
}

fn field_value<'a>(reply: &'a str, key: &str) -> Option<&'a str> {
    let key = key.to_lowercase();
    reply.lines().rev().find_map(|l| {
        let l = l.trim().trim_start_matches(['-', '*', ' ']);
        let lower = l.to_lowercase();
        lower.starts_with(&key).then(|| l[key.len()..].trim_start_matches([':', ' ']).trim())
    })
}

fn leading_number(s: &str) -> Option<f64> {
    let end = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    s[..end].trim_end_matches('.').parse().ok()
}

/// Reads a grading reply. Returns `None` when a required line is missing or
/// the confidence is out of range.
pub fn parse_eval_reply(task: Stage, reply: &str) -> Option<(Verdict, f64)> {
    let confidence = leading_number(field_value(reply, "confidence")?)?;
    if !(CONFIDENCE_MIN..=CONFIDENCE_MAX).contains(&confidence) {
        return None;
    }
    let count = |k| leading_number(field_value(reply, k)?).filter(|n| n.fract() == 0.0).map(|n| n as u32);
    let verdict = match task {
        Stage::Rte => Verdict::Rte {
            true_count: count("number of the true triplet")?,
            false_count: count("number of the false triplet")?,
        },
        Stage::Kgc => {
            let v = field_value(reply, "verdict")?.to_lowercase();
            let v = v.trim_end_matches('.');
            match v {
                "true" => Verdict::Kgc { verdict: true },
                "false" => Verdict::Kgc { verdict: false },
                _ => return None,
            }
        }
    };
    Some((verdict, confidence))
}

/// One result to grade.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalItem {
    Rte { id: String, text: String, triplets: Vec<Triplet> },
    Kgc { record: KgcRecord, relation: Rcc5Relation },
}

impl EvalItem {
    pub fn id(&self) -> &str {
        match self {
            EvalItem::Rte { id, .. } => id,
            EvalItem::Kgc { record, .. } => &record.id,
        }
    }

    pub fn task(&self) -> Stage {
        match self {
            EvalItem::Rte { .. } => Stage::Rte,
            EvalItem::Kgc { .. } => Stage::Kgc,
        }
    }

    /// Completion prompts carry every tool's result as evidence.
    pub fn prompt(&self, templates: &TemplateSet) -> Result<String, crate::instruct::PromptError> {
        match self {
            EvalItem::Rte { text, triplets, .. } => templates.eval_rte(text, triplets),
            EvalItem::Kgc { record, relation } => {
                let evidence = toolkit_evidence(&record.head_geometry, &record.tail_geometry);
                templates.eval_kgc(record, *relation, &evidence)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model_id: String,
    pub repeats: u32,
    /// Sampling temperature for grading calls; repeats are pointless at 0
    /// against a live model.
    pub temperature: f64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { model_id: "mock".into(), repeats: 1, temperature: 0.7, workers: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelEvaluation {
    /// Every parsed repeat.
    pub judgments: Vec<EvalJudgment>,
    /// One majority judgment per evaluated item, in item order.
    pub finals: Vec<EvalJudgment>,
    /// (item id, reason) for items with no usable repeat.
    pub unevaluated: Vec<(String, String)>,
}

/// Grades every item `repeats` times and takes the majority per item.
/// Failed or unparseable repeats are left out of the vote; an item with no
/// usable repeat is unevaluated.
pub fn model_evaluate(items: &[EvalItem], gateway: &Gateway, templates: &TemplateSet, cfg: &EvalConfig) -> ModelEvaluation {
    let per_item = parallel_map(items, cfg.workers, |item| {
        let prompt = match item.prompt(templates) {
            Ok(p) => p,
            Err(e) => return (Vec::new(), Some(e.to_string())),
        };
        let mut got = Vec::new();
        let mut last_err = None;
        for k in 0..cfg.repeats.max(1) {
            let mut req = ChatRequest::new(cfg.model_id.clone(), vec![Message::user(prompt.clone())]).purpose("eval");
            req.temperature = cfg.temperature;
            match gateway.chat(&req) {
                Ok(r) => match parse_eval_reply(item.task(), &r.content) {
                    Some((verdict, confidence)) => got.push(EvalJudgment {
                        item_id: item.id().to_string(),
                        task: item.task(),
                        verdict,
                        confidence,
                        evaluator: Evaluator::Model,
                        repeat_index: k,
                    }),
                    None => last_err = Some(format!("unparseable verdict: {:?}", r.content)),
                },
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        gateway.record_task("eval");
        (got, last_err)
    });

    let mut out = ModelEvaluation::default();
    for (item, (got, err)) in items.iter().zip(per_item) {
        let votes: Vec<Verdict> = got.iter().map(|j| j.verdict).collect();
        match majority_vote(&votes) {
            Some(verdict) => out.finals.push(EvalJudgment {
                item_id: item.id().to_string(),
                task: item.task(),
                verdict,
                confidence: mean_confidence(&got).expect("votes are non-empty"),
                evaluator: Evaluator::Model,
                repeat_index: 0,
            }),
            None => {
                let why = err.unwrap_or_else(|| "no repeats".into());
                tracing::warn!(item = item.id(), reason = %why, "item left unevaluated");
                out.unevaluated.push((item.id().to_string(), why));
            }
        }
        out.judgments.extend(got);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Stage,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub items: usize,
    pub unevaluated: usize,
    pub usage: UsageTotals,
}

impl EvalReport {
    pub fn new(finals: &[EvalJudgment], unevaluated: usize, ledger: &CostLedger) -> Result<Self, EvalError> {
        Ok(EvalReport {
            task: single_task(finals)?,
            accuracy: accuracy(finals)?,
            mean_confidence: mean_confidence(finals).unwrap_or(0.0),
            items: finals.len(),
            unevaluated,
            usage: ledger.total(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} acc={:.4} confidence={:.2} items={} unevaluated={} calls={} tokens={} cost={:.4}",
            self.task,
            self.accuracy,
            self.mean_confidence,
            self.items,
            self.unevaluated,
            self.usage.calls,
            self.usage.prompt_tokens + self.usage.completion_tokens,
            self.usage.cost
        )
    }
}

/// 1-based ranks, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::DegenerateInput);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub groups: BTreeMap<String, f64>,
    pub overall: Option<f64>,
    /// (group, reason) for groups without a usable overlap.
    pub skipped: Vec<(String, String)>,
}

/// Majority judgment per item id.
fn per_item(js: &[EvalJudgment]) -> BTreeMap<&str, Verdict> {
    let mut votes: BTreeMap<&str, Vec<Verdict>> = BTreeMap::new();
    for j in js {
        votes.entry(j.item_id.as_str()).or_default().push(j.verdict);
    }
    votes.into_iter().filter_map(|(k, v)| Some((k, majority_vote(&v)?))).collect()
}

/// Spearman correlation of per-item scores between two graders, per group
/// (`grouping` maps item id to group) and over all shared items.
pub fn consistency_report(
    human: &[EvalJudgment],
    model: &[EvalJudgment],
    grouping: &BTreeMap<String, String>,
) -> ConsistencyReport {
    let (h, m) = (per_item(human), per_item(model));
    let shared: Vec<(&str, f64, f64)> =
        h.iter().filter_map(|(id, hv)| m.get(id).map(|mv| (*id, hv.score(), mv.score()))).collect();
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for g in grouping.values() {
        groups.entry(g.as_str()).or_default();
    }
    for (id, a, b) in &shared {
        if let Some(g) = grouping.get(*id) {
            let e = groups.entry(g.as_str()).or_default();
            e.0.push(*a);
            e.1.push(*b);
        }
    }
    let mut report = ConsistencyReport::default();
    for (g, (a, b)) in groups {
        match spearman(&a, &b) {
            Ok(r) => {
                report.groups.insert(g.to_string(), r);
            }
            Err(e) => {
                let why = if a.is_empty() { "no shared items".to_string() } else { e.to_string() };
                tracing::warn!(group = g, reason = %why, "consistency group skipped");
                report.skipped.push((g.to_string(), why));
            }
        }
    }
    let (a, b): (Vec<f64>, Vec<f64>) = shared.iter().map(|(_, a, b)| (*a, *b)).unzip();
    report.overall = spearman(&a, &b).ok();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationLine {
    #[serde(flatten)]
    judgment: EvalJudgment,
    #[serde(default)]
    group: Option<String>,
}

/// Reads a JSON-lines judgment file. Each line holds `item_id`, `task`,
/// either `true_count`/`false_count` or `verdict`, `confidence`,
/// `evaluator`, and optionally `repeat_index` and `group`.
pub fn load_judgments(path: &Path) -> Result<(Vec<EvalJudgment>, BTreeMap<String, String>), EvalError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|source| EvalError::Io { path: p.clone(), source })?;
    let mut js = Vec::new();
    let mut grouping = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| EvalError::Parse { path: p.clone(), line: i + 1, message };
        let a: AnnotationLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        a.judgment.check().map_err(parse_err)?;
        if let Some(g) = a.group {
            grouping.insert(a.judgment.item_id.clone(), g);
        }
        js.push(a.judgment);
    }
    Ok((js, grouping))
}

pub fn judgment_lines(js: &[EvalJudgment]) -> Vec<String> {
    js.iter().map(|j| serde_json::to_string(j).expect("judgment serializes")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub tasks: u64,
    pub calls: f64,
    pub prompt_tokens: f64,
    pub completion_tokens: f64,
    pub cost: f64,
    pub wall_time_s: f64,
    /// False when per-1000 scaling was asked for but no tasks were recorded.
    pub normalized: bool,
}

impl CostRow {
    fn new(tasks: u64, u: &UsageTotals, per_1000: bool) -> Self {
        let scale = if per_1000 && tasks > 0 { 1000.0 / tasks as f64 } else { 1.0 };
        CostRow {
            tasks,
            calls: u.calls as f64 * scale,
            prompt_tokens: u.prompt_tokens as f64 * scale,
            completion_tokens: u.completion_tokens as f64 * scale,
            cost: u.cost * scale,
            wall_time_s: u.wall_time_s * scale,
            normalized: per_1000 && tasks > 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_1000: bool,
    pub by_task: BTreeMap<String, CostRow>,
    pub total: CostRow,
    pub failed_calls: u64,
}

/// Totals per task type (call purpose), optionally scaled to 1,000 task
/// records using the ledger's finished-task counts.
pub fn cost_report(ledger: &CostLedger, per_1000: bool) -> CostReport {
    let usage = ledger.by_purpose();
    let mut keys: Vec<&String> = usage.keys().chain(ledger.tasks.keys()).collect();
    keys.sort();
    keys.dedup();
    let by_task = keys
        .into_iter()
        .map(|k| {
            let tasks = ledger.tasks.get(k).copied().unwrap_or(0);
            (k.clone(), CostRow::new(tasks, &usage.get(k).copied().unwrap_or_default(), per_1000))
        })
        .collect();
    CostReport {
        per_1000,
        by_task,
        total: CostRow::new(ledger.tasks.values().sum(), &ledger.total(), per_1000),
        failed_calls: ledger.failed_calls,
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = if self.per_1000 { " (per 1000 tasks)" } else { "" };
        writeln!(f, "{:<8} {:>7} {:>10} {:>14} {:>14} {:>10} {:>10}{unit}", "task", "tasks", "calls", "prompt_tok", "compl_tok", "cost", "time_s")?;
        let rows = self.by_task.iter().map(|(k, r)| (k.as_str(), r)).chain([("total", &self.total)]);
        for (k, r) in rows {
            writeln!(
                f,
                "{k:<8} {:>7} {:>10.1} {:>14.1} {:>14.1} {:>10.4} {:>10.3}{}",
                r.tasks,
                r.calls,
                r.prompt_tokens,
                r.completion_tokens,
                r.cost,
                r.wall_time_s,
                if self.per_1000 && !r.normalized { "  (not normalized)" } else { "" }
            )?;
        }
        write!(f, "failed calls: {}", self.failed_calls)
    }
}
