use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use urbankg::config::{ConfigError, PipelineConfig};
use urbankg::eval::{self, EvalItem, EvalReport};
use urbankg::gateway::CostLedger;
use urbankg::geometry::parse_wkt;
use urbankg::geotools::{classify_rcc5, invoke_tool, Rcc5Relation, ToolName, ToolValue, DEFAULT_RCC_EPS};
use urbankg::ingest::SourceKind;
use urbankg::kg::{KgcRecord, RteRecord, Stage, UrbanGraph};
use urbankg::pipeline::{self, read_jsonl, write_jsonl, KGC_TASKS_FILE, RTE_TASKS_FILE};

#[derive(Parser)]
#[command(name = "urbankg", version, about = "Build urban knowledge graphs with LLM agents and geospatial tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw source records and write extraction/completion task files.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// KIND=PATH, where KIND is aoi, road, poi, review or webpage. Repeatable.
        #[arg(long = "input", value_name = "KIND=PATH", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run relational triplet extraction over a task file.
    Rte {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run geospatial relation completion over a task file.
    Kgc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extraction then completion, merged into one graph.
    BuildKg {
        #[arg(long)]
        config: PathBuf,
        /// Extraction tasks; defaults to <tasks>/rte_tasks.jsonl.
        #[arg(long)]
        rte: Option<PathBuf>,
        /// Completion tasks; defaults to <tasks>/kgc_tasks.jsonl.
        #[arg(long)]
        kgc: Option<PathBuf>,
        /// Directory written by `ingest`.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge or drop low-frequency relations, then merge clustered synonyms.
    MergeRelations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade a built graph with the configured model.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Extraction task file whose records are graded.
        #[arg(long, required_unless_present = "kgc_tasks")]
        rte_tasks: Option<PathBuf>,
        /// Completion task file whose records are graded.
        #[arg(long, conflicts_with = "rte_tasks")]
        kgc_tasks: Option<PathBuf>,
        /// Overrides the configured repeat count.
        #[arg(long)]
        repeats: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman consistency between two judgment files.
    Correlate {
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Token, cost and time totals from a ledger.
    ReportCosts {
        #[arg(long)]
        ledger: PathBuf,
        /// Scale to 1,000 task records.
        #[arg(long)]
        per_1000: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run one geospatial tool (or `rcc5`) on WKT arguments.
    Tool {
        name: String,
        #[arg(required = true)]
        wkt: Vec<String>,
        /// Contact tolerance in degrees for `rcc5`.
        #[arg(long, default_value_t = DEFAULT_RCC_EPS)]
        eps: f64,
    },
}

/// Fatal error with the exit code to use.
struct Fatal {
    code: u8,
    summary: serde_json::Value,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = classify(name, e);
            eprintln!("{}", f.summary);
            ExitCode::from(f.code)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Rte { .. } => "rte",
        Command::Kgc { .. } => "kgc",
        Command::BuildKg { .. } => "build-kg",
        Command::MergeRelations { .. } => "merge-relations",
        Command::Evaluate { .. } => "evaluate",
        Command::Correlate { .. } => "correlate",
        Command::ReportCosts { .. } => "report-costs",
        Command::Tool { .. } => "tool",
    }
}

fn classify(command: &str, e: anyhow::Error) -> Fatal {
    if let Some(ConfigError::Invalid(errs)) = e.downcast_ref::<ConfigError>() {
        return Fatal {
            code: 2,
            summary: json!({"command": command, "error": "invalid config", "details": errs}),
        };
    }
    let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
    Fatal { code: 1, summary: json!({"command": command, "error": chain[0], "causes": &chain[1..]}) }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    Ok(PipelineConfig::load(path)?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { config, inputs, out } => {
            let cfg = load_config(&config)?;
            let inputs = inputs.iter().map(|s| parse_input(s)).collect::<Result<Vec<_>>>()?;
            print_json(&pipeline::run_ingest(&cfg, &inputs, &out)?)
        }
        Command::Rte { config, input, out } => {
            let rte: Vec<RteRecord> = read_jsonl(&input)?;
            build(&config, &rte, &[], &out)
        }
        Command::Kgc { config, input, out } => {
            let kgc: Vec<KgcRecord> = read_jsonl(&input)?;
            build(&config, &[], &kgc, &out)
        }
        Command::BuildKg { config, rte, kgc, tasks, out } => {
            let pick = |explicit: Option<PathBuf>, file: &str| {
                explicit.or_else(|| tasks.as_ref().map(|d| d.join(file)))
            };
            let (Some(rte), Some(kgc)) = (pick(rte, RTE_TASKS_FILE), pick(kgc, KGC_TASKS_FILE)) else {
                bail!("give --tasks or both --rte and --kgc");
            };
            let rte: Vec<RteRecord> = read_jsonl(&rte)?;
            let kgc: Vec<KgcRecord> = read_jsonl(&kgc)?;
            build(&config, &rte, &kgc, &out)
        }
        Command::MergeRelations { config, graph, out } => {
            let cfg = load_config(&config)?;
            let gateway = pipeline::build_gateway(&cfg)?;
            let templates = pipeline::load_templates(&cfg)?;
            let g = UrbanGraph::import(&graph)?;
            let s = pipeline::run_merge(&cfg, &gateway, &templates, &g, &out)?;
            print_json(&s)
        }
        Command::Evaluate { config, graph, rte_tasks, kgc_tasks, repeats, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = repeats {
                if r == 0 {
                    bail!("--repeats must be at least 1");
                }
                cfg.eval.repeats = r;
            }
            let gateway = pipeline::build_gateway(&cfg)?;
            let templates = pipeline::load_templates(&cfg)?;
            let g = UrbanGraph::import(&graph)?;
            let items = match (rte_tasks, kgc_tasks) {
                (Some(p), _) => rte_items(&g, &read_jsonl(&p)?),
                (None, Some(p)) => kgc_items(&g, &read_jsonl(&p)?),
                (None, None) => unreachable!("clap requires one task file"),
            };
            if items.is_empty() {
                bail!("no gradable records: none of the task records has a fact in the graph");
            }
            let res = eval::model_evaluate(&items, &gateway, &templates, &cfg.eval);
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            write_lines(&out.join("judgments.jsonl"), &eval::judgment_lines(&res.judgments))?;
            write_lines(&out.join("final_judgments.jsonl"), &eval::judgment_lines(&res.finals))?;
            let unevaluated: Vec<_> = res.unevaluated.iter().map(|(id, why)| json!({"item_id": id, "reason": why})).collect();
            write_jsonl(&out.join("unevaluated.jsonl"), &unevaluated)?;
            let ledger = gateway.ledger();
            ledger.save(&out.join(pipeline::LEDGER_FILE))?;
            let report = EvalReport::new(&res.finals, res.unevaluated.len(), &ledger)
                .context("no item could be evaluated")?;
            std::fs::write(out.join("report.txt"), format!("{report}\n"))?;
            write_jsonl(&out.join("report.jsonl"), std::slice::from_ref(&report))?;
            eprintln!("{report}");
            print_json(&report)
        }
        Command::Correlate { human, model } => {
            let (h, grouping) = eval::load_judgments(&human)?;
            let (m, model_groups) = eval::load_judgments(&model)?;
            let mut grouping: BTreeMap<String, String> = grouping;
            for (k, v) in model_groups {
                grouping.entry(k).or_insert(v);
            }
            print_json(&eval::consistency_report(&h, &m, &grouping))
        }
        Command::ReportCosts { ledger, per_1000, json } => {
            let l = CostLedger::load(&ledger).with_context(|| ledger.display().to_string())?;
            let r = eval::cost_report(&l, per_1000);
            if json {
                print_json(&r)
            } else {
                println!("{r}");
                Ok(())
            }
        }
        Command::Tool { name, wkt, eps } => {
            let geoms = wkt
                .iter()
                .map(|w| parse_wkt(w).with_context(|| format!("bad WKT {w:?}")))
                .collect::<Result<Vec<_>>>()?;
            if name.eq_ignore_ascii_case("rcc5") {
                let [a, b] = geoms.as_slice() else { bail!("rcc5 takes two geometries, got {}", geoms.len()) };
                println!("{}", classify_rcc5(a, b, eps).code());
                return Ok(());
            }
            let tool: ToolName = name.parse()?;
            let res = invoke_tool(tool, &geoms)?;
            match res.value {
                ToolValue::DistanceKm(d) => println!("{d:.3}"),
                v => println!("{v}"),
            }
            Ok(())
        }
    }
}

fn parse_input(s: &str) -> Result<(PathBuf, SourceKind)> {
    let Some((kind, path)) = s.split_once('=') else { bail!("--input expects KIND=PATH, got {s:?}") };
    let kind: SourceKind = kind.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((PathBuf::from(path), kind))
}

fn build(config: &Path, rte: &[RteRecord], kgc: &[KgcRecord], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let gateway = pipeline::build_gateway(&cfg)?;
    let templates = pipeline::load_templates(&cfg)?;
    let s = pipeline::run_build(&cfg, &gateway, &templates, rte, kgc, out)?;
    for (id, e) in &s.failures {
        tracing::warn!(record = %id, error = %e, "record failed");
    }
    print_json(&s)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(path, body).with_context(|| path.display().to_string())
}

/// Extraction items: each task record with the extraction facts it produced.
fn rte_items(g: &UrbanGraph, tasks: &[RteRecord]) -> Vec<EvalItem> {
    tasks
        .iter()
        .map(|r| EvalItem::Rte {
            id: r.id.clone(),
            text: r.text.clone(),
            triplets: g
                .facts()
                .filter(|t| t.provenance.stage == Stage::Rte && t.provenance.record_id == r.id)
                .cloned()
                .collect(),
        })
        .collect()
}

/// Completion items: task records whose pair received a relation.
fn kgc_items(g: &UrbanGraph, tasks: &[KgcRecord]) -> Vec<EvalItem> {
    tasks
        .iter()
        .filter_map(|r| {
            let t = g.facts().find(|t| t.provenance.stage == Stage::Kgc && t.provenance.record_id == r.id)?;
            let relation = Rcc5Relation::from_code(&t.relation)?;
            Some(EvalItem::Kgc { record: r.clone(), relation })
        })
        .collect()
}
