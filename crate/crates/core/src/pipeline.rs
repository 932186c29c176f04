//! Stage runners shared by the command-line tool: each reads its inputs,
//! runs one or more modules and writes line-delimited outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{write_trajectories, Agent, BatchOutput};
use crate::config::{BackendKind, PipelineConfig, TemplateSource};
use crate::gateway::{Gateway, GatewayError, HttpBackend, LlmBackend, MockBackend};
use crate::ingest::{filter_record, load_records, to_task_records, FilterOutcome, IngestError, SourceKind};
use crate::instruct::{PromptError, TemplateSet};
use crate::kg::{GraphStats, KgError, KgcRecord, RteRecord, UrbanGraph};
use crate::postprocess::{cluster_and_merge, merge_low_frequency, save_plans, MergePlan};

pub const GRAPH_FILE: &str = "graph.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const RTE_TASKS_FILE: &str = "rte_tasks.jsonl";
pub const KGC_TASKS_FILE: &str = "kgc_tasks.jsonl";
pub const MERGE_PLAN_FILE: &str = "merge_plan.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("mock script: {0}")]
    Script(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for it in items {
        let line = serde_json::to_string(it).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Backend, retry policy, prices and in-flight cap from the config. The API
/// key for HTTP backends is read from the configured environment variable.
pub fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let backend: Arc<dyn LlmBackend> = match &cfg.backend.kind {
        BackendKind::Mock { script: Some(p) } => Arc::new(MockBackend::from_file(p).map_err(PipelineError::Script)?),
        BackendKind::Mock { script: None } => Arc::new(MockBackend::new(Vec::new())),
        BackendKind::Http { base_url, api_key_env, timeout } => {
            let key = std::env::var(api_key_env).ok().filter(|k| !k.is_empty());
            if key.is_none() {
                tracing::warn!(var = %api_key_env, "no API key in environment; sending unauthenticated requests");
            }
            Arc::new(HttpBackend::new(base_url, key, *timeout)?.with_embed_model(cfg.backend.embed_model.clone()))
        }
    };
    Ok(Gateway::new(backend)
        .with_retry(cfg.retry)
        .with_prices(cfg.prices.clone())
        .with_concurrency(cfg.backend.max_in_flight)
        .with_embed_model(cfg.backend.embed_model.clone()))
}

pub fn load_templates(cfg: &PipelineConfig) -> Result<TemplateSet, PromptError> {
    match &cfg.templates {
        TemplateSource::Builtin => Ok(TemplateSet::builtin()),
        TemplateSource::Dir(d) => TemplateSet::from_dir(d),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub loaded: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub line_errors: usize,
    pub error_reports: Vec<PathBuf>,
    pub rte_tasks: usize,
    pub kgc_tasks: usize,
}

/// Loads and filters raw source files and writes the extraction and
/// completion task files into `out_dir`.
pub fn run_ingest(cfg: &PipelineConfig, inputs: &[(PathBuf, SourceKind)], out_dir: &Path) -> Result<IngestSummary, PipelineError> {
    ensure_dir(out_dir)?;
    let mut s = IngestSummary::default();
    let mut kept = Vec::new();
    for (path, kind) in inputs {
        let report = load_records(path, *kind)?;
        s.loaded += report.records.len();
        s.line_errors += report.errors.len();
        s.error_reports.extend(report.error_report);
        for r in report.records {
            match filter_record(&r) {
                FilterOutcome::Kept => kept.push(r),
                FilterOutcome::Dropped(why) => {
                    let key = serde_json::to_value(why).expect("reason serializes");
                    *s.dropped.entry(key.as_str().unwrap_or_default().to_string()).or_default() += 1;
                }
            }
        }
    }
    s.kept = kept.len();
    let (rte, kgc) = to_task_records(&kept, cfg.kgc_limit, cfg.seed);
    s.rte_tasks = rte.len();
    s.kgc_tasks = kgc.len();
    write_jsonl(&out_dir.join(RTE_TASKS_FILE), &rte)?;
    write_jsonl(&out_dir.join(KGC_TASKS_FILE), &kgc)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub stats: GraphStats,
    pub rte_records: usize,
    pub kgc_records: usize,
    pub failures: Vec<(String, String)>,
    pub graph: PathBuf,
    pub trajectories: PathBuf,
    pub ledger: PathBuf,
}

/// Runs extraction then completion, and writes the merged graph, the
/// trajectory log and the cost ledger into `out_dir`.
pub fn run_build(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    rte: &[RteRecord],
    kgc: &[KgcRecord],
    out_dir: &Path,
) -> Result<BuildSummary, PipelineError> {
    ensure_dir(out_dir)?;
    let agent = Agent::new(gateway, templates, cfg.agent_config());
    let BatchOutput { graph, trajectories, failures, ledger } = agent.run_batch(rte, kgc);
    let s = BuildSummary {
        stats: graph.stats(),
        rte_records: rte.len(),
        kgc_records: kgc.len(),
        failures,
        graph: out_dir.join(GRAPH_FILE),
        trajectories: out_dir.join(TRAJECTORY_FILE),
        ledger: out_dir.join(LEDGER_FILE),
    };
    graph.export(&s.graph)?;
    write_trajectories(&s.trajectories, &trajectories).map_err(io_err(&s.trajectories))?;
    ledger.save(&s.ledger).map_err(io_err(&s.ledger))?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub before: GraphStats,
    pub after_frequency: GraphStats,
    pub after_cluster: GraphStats,
    pub merged: usize,
    pub dropped: usize,
    pub warnings: Vec<String>,
    pub graph: PathBuf,
    pub plan: PathBuf,
}

/// Both relation clean-up stages. Writes the final graph and the merge
/// audit into `out_dir`.
pub fn run_merge(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    templates: &TemplateSet,
    graph: &UrbanGraph,
    out_dir: &Path,
) -> Result<MergeSummary, PipelineError> {
    ensure_dir(out_dir)?;
    let (g1, p1) = merge_low_frequency(graph, gateway, &cfg.merge)?;
    let (g2, p2, outcome) = cluster_and_merge(&g1, gateway, templates, &cfg.backend.model_id, &cfg.merge);
    let plans: [MergePlan; 2] = [p1, p2];
    let s = MergeSummary {
        before: graph.stats(),
        after_frequency: g1.stats(),
        after_cluster: g2.stats(),
        merged: plans.iter().map(|p| p.mapping.len()).sum(),
        dropped: plans.iter().map(|p| p.dropped.len()).sum(),
        warnings: outcome.warnings,
        graph: out_dir.join(GRAPH_FILE),
        plan: out_dir.join(MERGE_PLAN_FILE),
    };
    g2.export(&s.graph)?;
    save_plans(&s.plan, &plans).map_err(io_err(&s.plan))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let rs = vec![RteRecord { id: "a".into(), text: "x".into() }, RteRecord { id: "b".into(), text: "y".into() }];
        write_jsonl(&p, &rs).unwrap();
        assert_eq!(read_jsonl::<RteRecord>(&p).unwrap(), rs);
        fs::write(&p, "{\"id\":\"a\",\"text\":\"x\"}\n\nnot json\n").unwrap();
        assert!(matches!(read_jsonl::<RteRecord>(&p), Err(PipelineError::Parse { line: 3, .. })));
        assert!(matches!(read_jsonl::<RteRecord>(&dir.path().join("missing")), Err(PipelineError::Io { .. })));
    }

    #[test]
    fn bad_mock_script_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("s.jsonl"), "{oops\n").unwrap();
        let cfg = PipelineConfig::from_toml_str(
            "seed = 1\n[backend]\nkind = \"mock\"\nmodel_id = \"m\"\nscript = \"s.jsonl\"",
            dir.path(),
        )
        .unwrap();
        assert!(matches!(build_gateway(&cfg), Err(PipelineError::Script(_))));
    }
}
