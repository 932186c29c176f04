//! Extraction and completion pipelines: prompt, parse, call tools, and run
//! the verifier/updater refinement loop, logging every step.

use std::collections::hash_map::{Entry, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatRequest, CostLedger, Gateway, GatewayError, Message};
use crate::geotools::{self, Rcc5Relation, ToolName, ToolResult};
use crate::instruct::{parse_type_lists, TemplateSet, TRIPLET_GRAMMAR};
use crate::kg::{fold, Entity, KgcRecord, Provenance, RteRecord, Stage, Triplet, UrbanGraph, View};

pub const DEFAULT_MAX_ITERATIONS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no <head, relation, tail> line found")]
    NoTripletsFound,
    #[error("no relation code found")]
    NoRelationFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedTriplets {
    pub triplets: Vec<(String, String, String)>,
    /// Non-empty lines that held no triplet.
    pub ignored_lines: usize,
}

/// Reads every `<head, relation, tail>` group. Fields split at the first and
/// last comma, so relations may contain commas but heads and tails may not.
pub fn parse_triplets(response: &str) -> Result<ParsedTriplets, ParseError> {
    let mut out = ParsedTriplets::default();
    for line in response.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut found = false;
        let mut rest = line;
        while let Some(open) = rest.find('<') {
            let after = &rest[open + 1..];
            let Some(close) = after.find('>') else { break };
            let inner = &after[..close];
            rest = &after[close + 1..];
            let (Some(a), Some(b)) = (inner.find(','), inner.rfind(',')) else { continue };
            if a == b {
                continue;
            }
            let (h, r, t) = (inner[..a].trim(), inner[a + 1..b].trim(), inner[b + 1..].trim());
            if h.is_empty() || r.is_empty() || t.is_empty() {
                continue;
            }
            if format!("<{h}, {r}, {t}>") == TRIPLET_GRAMMAR {
                continue;
            }
            out.triplets.push((h.to_string(), r.to_string(), t.to_string()));
            found = true;
        }
        if !found {
            out.ignored_lines += 1;
        }
    }
    if out.triplets.is_empty() {
        Err(ParseError::NoTripletsFound)
    } else {
        Ok(out)
    }
}

fn word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Byte offsets of whole-word occurrences of `needle`.
fn word_matches(hay: &str, needle: &str, ignore_case: bool) -> Vec<usize> {
    let (h, n) = if ignore_case {
        (hay.to_ascii_lowercase(), needle.to_ascii_lowercase())
    } else {
        (hay.to_string(), needle.to_string())
    };
    h.match_indices(&n)
        .filter(|(i, _)| !word_char(h[..*i].chars().next_back()) && !word_char(h[i + n.len()..].chars().next()))
        .map(|(i, _)| i)
        .collect()
}

/// The relation mentioned last, by code (case-sensitive) or full name.
pub fn parse_relation(response: &str) -> Result<Rcc5Relation, ParseError> {
    Rcc5Relation::PROMPT_ORDER
        .iter()
        .flat_map(|&r| {
            word_matches(response, r.code(), false)
                .into_iter()
                .chain(word_matches(response, r.full_name(), true))
                .map(move |at| (at, r))
        })
        .max_by_key(|(at, _)| *at)
        .map(|(_, r)| r)
        .ok_or(ParseError::NoRelationFound)
}

/// Tool names in first-mention order, case-insensitive, deduplicated.
pub fn parse_tool_request(response: &str) -> Vec<ToolName> {
    let mut hits: Vec<(usize, ToolName)> = ToolName::ALL
        .iter()
        .filter_map(|&t| word_matches(response, t.as_str(), true).first().map(|&at| (at, t)))
        .collect();
    hits.sort();
    if hits.is_empty() {
        tracing::warn!(response, "no known tool named in tool request");
    }
    hits.into_iter().map(|(_, t)| t).collect()
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Instruction,
    ModelResponse,
    ToolCall,
    ToolResult,
    VerifierFeedback,
    UpdaterRevision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepPayload {
    Text(String),
    Tool(ToolResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub kind: StepKind,
    pub iteration: u32,
    pub payload: StepPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HaltReason {
    Faithful,
    MaxIterations,
    Error,
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum FinalAnswer {
    Triplets(Vec<[String; 3]>),
    Relation(Rcc5Relation),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub record_id: String,
    pub task: Stage,
    pub steps: Vec<TrajectoryStep>,
    pub final_answer: FinalAnswer,
    pub halted_by: HaltReason,
    pub error: Option<String>,
}

impl Trajectory {
    fn new(record_id: &str, task: Stage) -> Self {
        Trajectory {
            record_id: record_id.to_string(),
            task,
            steps: Vec::new(),
            final_answer: FinalAnswer::None,
            halted_by: HaltReason::Error,
            error: None,
        }
    }

    fn push(&mut self, kind: StepKind, iteration: u32, text: impl Into<String>) {
        self.steps.push(TrajectoryStep { kind, iteration, payload: StepPayload::Text(text.into()) });
    }

    pub fn count(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }

    /// Model calls made for this record.
    pub fn model_calls(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.kind, StepKind::ModelResponse | StepKind::VerifierFeedback | StepKind::UpdaterRevision))
            .count()
    }

    pub fn last_feedback(&self) -> Option<&str> {
        self.steps.iter().rev().find(|s| s.kind == StepKind::VerifierFeedback).and_then(|s| match &s.payload {
            StepPayload::Text(t) => Some(t.as_str()),
            StepPayload::Tool(_) => None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    record_id: String,
    task: Stage,
    seq: usize,
    kind: StepKind,
    iteration: u32,
    payload: StepPayload,
}

#[derive(Serialize, Deserialize)]
struct HaltLine {
    record_id: String,
    task: Stage,
    seq: usize,
    kind: String,
    halted_by: HaltReason,
    final_answer: FinalAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn trajectory_lines(t: &Trajectory) -> Vec<String> {
    let mut lines: Vec<String> = t
        .steps
        .iter()
        .enumerate()
        .map(|(seq, s)| {
            serde_json::to_string(&StepLine {
                record_id: t.record_id.clone(),
                task: t.task,
                seq,
                kind: s.kind,
                iteration: s.iteration,
                payload: s.payload.clone(),
            })
            .expect("step serializes")
        })
        .collect();
    lines.push(
        serde_json::to_string(&HaltLine {
            record_id: t.record_id.clone(),
            task: t.task,
            seq: t.steps.len(),
            kind: "Halt".into(),
            halted_by: t.halted_by,
            final_answer: t.final_answer.clone(),
            error: t.error.clone(),
        })
        .expect("halt line serializes"),
    );
    lines
}

pub fn write_trajectories(path: &Path, ts: &[Trajectory]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ts {
        for line in trajectory_lines(t) {
            writeln!(w, "{line}")?;
        }
    }
    w.flush()
}

/// Reads a log written by `write_trajectories` back into trajectories.
pub fn read_trajectories(path: &Path) -> std::io::Result<Vec<Trajectory>> {
    let bad = |n: usize, e: String| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {n}: {e}"));
    let mut out = Vec::new();
    let mut cur: Option<Trajectory> = None;
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        if v.get("kind").and_then(Value::as_str) == Some("Halt") {
            let h: HaltLine = serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?;
            let mut t = cur.take().unwrap_or_else(|| Trajectory::new(&h.record_id, h.task));
            if t.record_id != h.record_id || t.steps.len() != h.seq {
                return Err(bad(i + 1, "halt line does not close the preceding steps".into()));
            }
            t.halted_by = h.halted_by;
            t.final_answer = h.final_answer;
            t.error = h.error;
            out.push(t);
        } else {
            let s: StepLine = serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?;
            let t = cur.get_or_insert_with(|| Trajectory::new(&s.record_id, s.task));
            if t.record_id != s.record_id || t.steps.len() != s.seq {
                return Err(bad(i + 1, "step out of sequence".into()));
            }
            t.steps.push(TrajectoryStep { kind: s.kind, iteration: s.iteration, payload: s.payload });
        }
    }
    if cur.is_some() {
        return Err(bad(0, "log ends without a halt line".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pipelines

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub model_id: String,
    pub max_iterations: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Records processed in parallel by `run_batch`.
    pub workers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            model_id: "mock".into(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            temperature: 0.0,
            max_tokens: 1024,
            workers: 1,
        }
    }
}

pub const SENTINEL_MARK: &str = "faithful trajectory";

pub fn is_faithful(feedback: &str) -> bool {
    feedback.to_lowercase().contains(SENTINEL_MARK)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RteOutcome {
    pub trajectory: Trajectory,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KgcOutcome {
    pub trajectory: Trajectory,
    pub relation: Option<Rcc5Relation>,
}

pub struct Agent<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub cfg: AgentConfig,
}

enum Halt {
    Error(String),
}

impl From<GatewayError> for Halt {
    fn from(e: GatewayError) -> Self {
        Halt::Error(e.to_string())
    }
}

impl From<crate::instruct::PromptError> for Halt {
    fn from(e: crate::instruct::PromptError) -> Self {
        Halt::Error(e.to_string())
    }
}

fn render_triplets(ts: &[(String, String, String)]) -> String {
    ts.iter().map(|(h, r, t)| format!("<{h}, {r}, {t}>")).collect::<Vec<_>>().join("\n")
}

impl<'a> Agent<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, cfg: AgentConfig) -> Self {
        Agent { gateway, templates, cfg }
    }

    fn chat(&self, messages: Vec<Message>, purpose: &str) -> Result<String, GatewayError> {
        let mut req = ChatRequest::new(self.cfg.model_id.clone(), messages).purpose(purpose);
        req.temperature = self.cfg.temperature;
        req.max_tokens = self.cfg.max_tokens;
        Ok(self.gateway.chat(&req)?.content)
    }

    /// Verifier/updater iterations over `answer`; returns the last revision,
    /// or `None` when the first verification was already faithful.
    fn refine_loop(&self, traj: &mut Trajectory, context: &str, answer: &str) -> Result<Option<String>, Halt> {
        let purpose = purpose(traj.task);
        let mut current = answer.to_string();
        let mut revised = None;
        for it in 1..=self.cfg.max_iterations {
            let shown = format!("{context}\n\n{current}");
            let vp = self.templates.verifier(traj.task, &shown)?;
            traj.push(StepKind::Instruction, it, vp.clone());
            let feedback = self.chat(vec![Message::user(vp)], purpose)?;
            traj.push(StepKind::VerifierFeedback, it, feedback.clone());
            if is_faithful(&feedback) {
                traj.halted_by = HaltReason::Faithful;
                return Ok(revised);
            }
            let up = self.templates.updater(traj.task, &shown, &feedback)?;
            traj.push(StepKind::Instruction, it, up.clone());
            let revision = self.chat(vec![Message::user(up)], purpose)?;
            traj.push(StepKind::UpdaterRevision, it, revision.clone());
            current = revision.clone();
            revised = Some(revision);
        }
        traj.halted_by = HaltReason::MaxIterations;
        Ok(revised)
    }

    pub fn run_rte(&self, rec: &RteRecord) -> RteOutcome {
        let mut traj = Trajectory::new(&rec.id, Stage::Rte);
        let result = self.rte_steps(rec, &mut traj);
        let triplets = match result {
            Ok(ts) => ts,
            Err(Halt::Error(e)) => {
                traj.halted_by = HaltReason::Error;
                traj.error = Some(e);
                Vec::new()
            }
        };
        traj.final_answer = FinalAnswer::Triplets(
            triplets.iter().map(|t| [t.head.clone(), t.relation.clone(), t.tail.clone()]).collect(),
        );
        RteOutcome { trajectory: traj, triplets }
    }

    fn rte_steps(&self, rec: &RteRecord, traj: &mut Trajectory) -> Result<Vec<Triplet>, Halt> {
        let mut union: Vec<(String, String, String)> = Vec::new();
        let mut view_of: HashMap<(String, String, String), View> = HashMap::new();
        let mut sections = Vec::new();
        for view in View::EXTRACTION {
            let p1 = self.templates.rte_turn1(view, &rec.text)?;
            traj.push(StepKind::Instruction, 0, p1.clone());
            let mut messages = vec![Message::user(p1)];
            let r1 = self.chat(messages.clone(), "rte")?;
            traj.push(StepKind::ModelResponse, 0, r1.clone());
            let (ents, rels) = parse_type_lists(&r1);
            let p2 = self.templates.rte_turn2(view, &rec.text, &ents, &rels)?;
            traj.push(StepKind::Instruction, 0, p2.clone());
            messages.extend([Message::assistant(r1), Message::user(p2)]);
            let r2 = self.chat(messages, "rte")?;
            traj.push(StepKind::ModelResponse, 0, r2.clone());
            if let Ok(parsed) = parse_triplets(&r2) {
                for t in parsed.triplets {
                    let key = (fold(&t.0), fold(&t.1), fold(&t.2));
                    if let Entry::Vacant(e) = view_of.entry(key) {
                        e.insert(view);
                        union.push(t);
                    }
                }
            }
            sections.push(format!("[{view} view]\n{}", r2.trim()));
        }
        let context = format!("Text: {}", rec.text);
        let answer = format!("{}\n\nFinal triplets:\n{}", sections.join("\n\n"), render_triplets(&union));
        let revised = self.refine_loop(traj, &context, &answer)?;
        let finals = match revised {
            None => union,
            Some(rev) => match parse_triplets(&rev) {
                Ok(p) => {
                    let mut seen = std::collections::HashSet::new();
                    p.triplets.into_iter().filter(|t| seen.insert((fold(&t.0), fold(&t.1), fold(&t.2)))).collect()
                }
                Err(e) => return Err(Halt::Error(format!("final revision: {e}"))),
            },
        };
        if finals.is_empty() {
            return Err(Halt::Error(ParseError::NoTripletsFound.to_string()));
        }
        let prov = Provenance { record_id: rec.id.clone(), stage: Stage::Rte };
        Ok(finals
            .into_iter()
            .map(|(h, r, t)| {
                let view = view_of.get(&(fold(&h), fold(&r), fold(&t))).copied().unwrap_or_default();
                Triplet::new(&h, &r, &t, view, prov.clone())
            })
            .collect())
    }

    pub fn run_kgc(&self, rec: &KgcRecord) -> KgcOutcome {
        let mut traj = Trajectory::new(&rec.id, Stage::Kgc);
        let relation = match self.kgc_steps(rec, &mut traj) {
            Ok(r) => Some(r),
            Err(Halt::Error(e)) => {
                traj.halted_by = HaltReason::Error;
                traj.error = Some(e);
                None
            }
        };
        traj.final_answer = relation.map_or(FinalAnswer::None, FinalAnswer::Relation);
        KgcOutcome { trajectory: traj, relation }
    }

    fn kgc_steps(&self, rec: &KgcRecord, traj: &mut Trajectory) -> Result<Rcc5Relation, Halt> {
        let p = self.templates.kgc_instruction(rec)?;
        traj.push(StepKind::Instruction, 0, p.clone());
        let mut messages = vec![Message::user(p)];
        let first = self.chat(messages.clone(), "kgc")?;
        traj.push(StepKind::ModelResponse, 0, first.clone());

        let tp = self.templates.tool_prompt(rec, &ToolName::toolkit())?;
        traj.push(StepKind::Instruction, 0, tp.clone());
        messages.extend([Message::assistant(first.clone()), Message::user(tp)]);
        let request = self.chat(messages.clone(), "kgc")?;
        traj.push(StepKind::ModelResponse, 0, request.clone());

        let (head, tail) = (&rec.head_geometry, &rec.tail_geometry);
        let mut tools = parse_tool_request(&request);
        if tools.is_empty() {
            tools = geotools::applicable_tools(head, tail);
        }
        let mut results = Vec::new();
        for tool in tools {
            let arg_sets = geotools::tool_arguments(tool, head, tail);
            if arg_sets.is_empty() {
                tracing::warn!(record = %rec.id, %tool, "requested tool does not fit the geometry kinds");
            }
            for args in arg_sets {
                let call = format!(
                    "{tool}({})",
                    args.iter().map(|g| g.to_wkt()).collect::<Vec<_>>().join(", ")
                );
                traj.push(StepKind::ToolCall, 0, call);
                let res = geotools::invoke_tool(tool, &args).map_err(|e| Halt::Error(e.to_string()))?;
                traj.steps.push(TrajectoryStep { kind: StepKind::ToolResult, iteration: 0, payload: StepPayload::Tool(res.clone()) });
                results.push(res);
            }
        }

        let dp = self.templates.deliberation(&results, &first)?;
        traj.push(StepKind::Instruction, 0, dp.clone());
        messages.extend([Message::assistant(request), Message::user(dp)]);
        let deliberated = self.chat(messages, "kgc")?;
        traj.push(StepKind::ModelResponse, 0, deliberated.clone());

        let evidence = results.iter().map(ToolResult::render).collect::<Vec<_>>().join("\n");
        let context = format!(
            "Head entity: {} {}\nTail entity: {} {}\nTool results:\n{}",
            rec.head_name, rec.head_geometry, rec.tail_name, rec.tail_geometry, evidence
        );
        let revised = self.refine_loop(traj, &context, &deliberated)?;
        let last = revised.unwrap_or(deliberated);
        parse_relation(&last).map_err(|e| Halt::Error(format!("final revision: {e}")))
    }

    /// Processes extraction records then completion records, `cfg.workers`
    /// at a time, and assembles the graph in record order.
    pub fn run_batch(&self, rte: &[RteRecord], kgc: &[KgcRecord]) -> BatchOutput {
        let rte_out = parallel_map(rte, self.cfg.workers, |r| {
            let o = self.run_rte(r);
            self.gateway.record_task("rte");
            o
        });
        let kgc_out = parallel_map(kgc, self.cfg.workers, |r| {
            let o = self.run_kgc(r);
            self.gateway.record_task("kgc");
            o
        });

        let mut out = BatchOutput::default();
        let mut g1 = UrbanGraph::new();
        for o in rte_out {
            for t in &o.triplets {
                g1.add_triplet(t.clone());
            }
            if let Some(e) = &o.trajectory.error {
                out.failures.push((o.trajectory.record_id.clone(), e.clone()));
            }
            out.trajectories.push(o.trajectory);
        }
        let mut g2 = UrbanGraph::new();
        for (rec, o) in kgc.iter().zip(kgc_out) {
            if let Some(rel) = o.relation {
                g2.upsert_entity(Entity::named(rec.head_name.as_str()).with_geometry(rec.head_geometry.clone()));
                g2.upsert_entity(Entity::named(rec.tail_name.as_str()).with_geometry(rec.tail_geometry.clone()));
                let prov = Provenance { record_id: rec.id.clone(), stage: Stage::Kgc };
                g2.add_triplet(Triplet::new(&rec.head_name, rel.code(), &rec.tail_name, View::Spatial, prov));
            }
            if let Some(e) = &o.trajectory.error {
                out.failures.push((o.trajectory.record_id.clone(), e.clone()));
            }
            out.trajectories.push(o.trajectory);
        }
        out.graph = g1.merge(&g2);
        out.ledger = self.gateway.ledger();
        out
    }
}

fn purpose(task: Stage) -> &'static str {
    match task {
        Stage::Rte => "rte",
        Stage::Kgc => "kgc",
    }
}

#[derive(Debug, Default)]
pub struct BatchOutput {
    pub graph: UrbanGraph,
    pub trajectories: Vec<Trajectory>,
    /// (record id, error) for records that halted with an error.
    pub failures: Vec<(String, String)>,
    pub ledger: CostLedger,
}

/// Order-preserving map over `items` with at most `workers` threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every slot filled")).collect()
}
