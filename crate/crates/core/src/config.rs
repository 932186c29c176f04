//! Pipeline configuration file (TOML). Every problem in the file is collected
//! and reported together before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;
use toml::{Table, Value};

use crate::agent::{AgentConfig, DEFAULT_MAX_ITERATIONS};
use crate::eval::EvalConfig;
use crate::gateway::{Price, PriceTable, RetryPolicy};
use crate::geotools::DEFAULT_RCC_EPS;
use crate::postprocess::MergeConfig;

pub const DEFAULT_API_KEY_ENV: &str = "URBANKG_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    /// Scripted backend; without a script every chat call fails.
    Mock { script: Option<PathBuf> },
    Http { base_url: String, api_key_env: String, timeout: Duration },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    pub embed_model: String,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateSource {
    Builtin,
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_iterations: u32,
    pub rcc_eps: f64,
    pub workers: usize,
    pub kgc_limit: Option<usize>,
    pub templates: TemplateSource,
    pub backend: BackendConfig,
    pub retry: RetryPolicy,
    pub merge: MergeConfig,
    pub prices: PriceTable,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Relative paths in the file resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let root: Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut r = Reader::default();
        r.unknown(&root, "", &[
            "seed", "max_iterations", "rcc_eps", "workers", "kgc_limit", "template_version", "templates_dir",
            "backend", "retry", "thresholds", "prices", "eval",
        ]);

        let seed = r.int(&root, "", "seed", true, 0);
        let max_iterations = r.int(&root, "", "max_iterations", false, 1).unwrap_or(DEFAULT_MAX_ITERATIONS.into());
        let rcc_eps = r.float(&root, "", "rcc_eps", false, Some((0.0, 1.0)), false).unwrap_or(DEFAULT_RCC_EPS);
        let workers = r.int(&root, "", "workers", false, 1).unwrap_or(1);
        let kgc_limit = r.int(&root, "", "kgc_limit", false, 0);
        let version = r.string(&root, "", "template_version", false);
        let dir = r.string(&root, "", "templates_dir", false);
        let templates = match (version.as_deref(), dir) {
            (_, Some(d)) => TemplateSource::Dir(base_dir.join(d)),
            (None | Some("v1"), None) => TemplateSource::Builtin,
            (Some(v), None) => {
                r.err(format!("template_version: unknown built-in version {v:?} (available: \"v1\")"));
                TemplateSource::Builtin
            }
        };

        let backend = match r.table(&root, "backend", true) {
            Some(b) => r.backend(b, base_dir),
            None => None,
        };

        let mut retry = RetryPolicy::default();
        if let Some(t) = r.table(&root, "retry", false) {
            r.unknown(t, "retry.", &["max_retries", "initial_backoff_ms", "max_backoff_ms"]);
            retry.max_retries = r.int(t, "retry.", "max_retries", false, 0).map_or(retry.max_retries, |v| v as u32);
            retry.initial_backoff_ms = r.int(t, "retry.", "initial_backoff_ms", false, 0).unwrap_or(retry.initial_backoff_ms);
            retry.max_backoff_ms = r.int(t, "retry.", "max_backoff_ms", false, 0).unwrap_or(retry.max_backoff_ms);
        }

        let mut merge = MergeConfig::default();
        if let Some(t) = r.table(&root, "thresholds", false) {
            r.unknown(t, "thresholds.", &["freq", "sim", "link"]);
            merge.freq_threshold = r.int(t, "thresholds.", "freq", false, 0).unwrap_or(merge.freq_threshold);
            merge.sim_threshold = r.float(t, "thresholds.", "sim", false, Some((-1.0, 1.0)), true).unwrap_or(merge.sim_threshold);
            merge.link_sim = r.float(t, "thresholds.", "link", false, Some((-1.0, 1.0)), true).unwrap_or(merge.link_sim);
        }

        let mut prices = PriceTable::new();
        if let Some(t) = r.table(&root, "prices", false) {
            for (model, v) in t {
                let prefix = format!("prices.{model}.");
                let Some(pt) = v.as_table() else {
                    r.err(format!("prices.{model}: expected a table"));
                    continue;
                };
                r.unknown(pt, &prefix, &["prompt_per_1k", "completion_per_1k"]);
                let p = r.float(pt, &prefix, "prompt_per_1k", true, Some((0.0, f64::INFINITY)), true);
                let c = r.float(pt, &prefix, "completion_per_1k", true, Some((0.0, f64::INFINITY)), true);
                if let (Some(p), Some(c)) = (p, c) {
                    prices.insert(model.clone(), Price { prompt_per_1k: p, completion_per_1k: c });
                }
            }
        }

        let mut eval = EvalConfig { workers: workers as usize, ..EvalConfig::default() };
        let mut eval_model = None;
        if let Some(t) = r.table(&root, "eval", false) {
            r.unknown(t, "eval.", &["repeats", "temperature", "model_id"]);
            eval.repeats = r.int(t, "eval.", "repeats", false, 1).map_or(eval.repeats, |v| v as u32);
            eval.temperature = r.float(t, "eval.", "temperature", false, Some((0.0, 2.0)), true).unwrap_or(eval.temperature);
            eval_model = r.string(t, "eval.", "model_id", false);
        }

        if !r.errors.is_empty() {
            return Err(ConfigError::Invalid(r.errors));
        }
        let backend = backend.expect("backend present when no errors");
        eval.model_id = eval_model.unwrap_or_else(|| backend.model_id.clone());
        Ok(PipelineConfig {
            seed: seed.expect("seed present when no errors"),
            max_iterations: max_iterations as u32,
            rcc_eps,
            workers: workers as usize,
            kgc_limit: kgc_limit.map(|v| v as usize),
            templates,
            backend,
            retry,
            merge,
            prices,
            eval,
        })
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            model_id: self.backend.model_id.clone(),
            max_iterations: self.max_iterations,
            temperature: self.backend.temperature,
            max_tokens: self.backend.max_tokens,
            workers: self.workers,
        }
    }
}

#[derive(Default)]
struct Reader {
    errors: Vec<String>,
}

enum Kind {
    Int,
    Float,
    Str,
    Table,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Int => "an integer",
            Kind::Float => "a number",
            Kind::Str => "a string",
            Kind::Table => "a table",
        })
    }
}

impl Reader {
    fn err(&mut self, e: String) {
        self.errors.push(e);
    }

    fn unknown(&mut self, t: &Table, prefix: &str, allowed: &[&str]) {
        for k in t.keys().filter(|k| !allowed.contains(&k.as_str())) {
            self.err(format!("{prefix}{k}: unknown key"));
        }
    }

    fn get<'t>(&mut self, t: &'t Table, prefix: &str, key: &str, required: bool, kind: Kind) -> Option<&'t Value> {
        let v = t.get(key);
        let ok = match (v, &kind) {
            (None, _) => {
                if required {
                    self.err(format!("{prefix}{key}: missing required key"));
                }
                return None;
            }
            (Some(Value::Integer(_)), Kind::Int | Kind::Float) => true,
            (Some(Value::Float(_)), Kind::Float) => true,
            (Some(Value::String(_)), Kind::Str) => true,
            (Some(Value::Table(_)), Kind::Table) => true,
            _ => false,
        };
        if !ok {
            self.err(format!("{prefix}{key}: expected {kind}"));
            return None;
        }
        v
    }

    fn int(&mut self, t: &Table, prefix: &str, key: &str, required: bool, min: i64) -> Option<u64> {
        let v = self.get(t, prefix, key, required, Kind::Int)?.as_integer()?;
        if v < min {
            self.err(format!("{prefix}{key}: must be at least {min}, got {v}"));
            return None;
        }
        Some(v as u64)
    }

    /// `inclusive` controls whether the lower bound itself is allowed.
    fn float(&mut self, t: &Table, prefix: &str, key: &str, required: bool, range: Option<(f64, f64)>, inclusive: bool) -> Option<f64> {
        let v = match self.get(t, prefix, key, required, Kind::Float)? {
            Value::Integer(i) => *i as f64,
            Value::Float(f) => *f,
            _ => return None,
        };
        if let Some((lo, hi)) = range {
            let above = if inclusive { v >= lo } else { v > lo };
            if !(above && v <= hi && v.is_finite()) {
                let open = if inclusive { "[" } else { "(" };
                self.err(format!("{prefix}{key}: must lie in {open}{lo}, {hi}], got {v}"));
                return None;
            }
        }
        Some(v)
    }

    fn string(&mut self, t: &Table, prefix: &str, key: &str, required: bool) -> Option<String> {
        let s = self.get(t, prefix, key, required, Kind::Str)?.as_str()?.trim().to_string();
        if s.is_empty() {
            self.err(format!("{prefix}{key}: must not be empty"));
            return None;
        }
        Some(s)
    }

    fn table<'t>(&mut self, t: &'t Table, key: &str, required: bool) -> Option<&'t Table> {
        self.get(t, "", key, required, Kind::Table)?.as_table()
    }

    fn backend(&mut self, b: &Table, base_dir: &Path) -> Option<BackendConfig> {
        let p = "backend.";
        self.unknown(b, p, &[
            "kind", "model_id", "script", "base_url", "api_key_env", "timeout_s", "embed_model", "max_in_flight",
            "temperature", "max_tokens",
        ]);
        let kind = self.string(b, p, "kind", true);
        let model_id = self.string(b, p, "model_id", true);
        let embed_model = self.string(b, p, "embed_model", false).unwrap_or_else(|| "embedding".into());
        let max_in_flight = self.int(b, p, "max_in_flight", false, 1).unwrap_or(1) as usize;
        let temperature = self.float(b, p, "temperature", false, Some((0.0, 2.0)), true).unwrap_or(0.0);
        let max_tokens = self.int(b, p, "max_tokens", false, 1).unwrap_or(1024) as u32;
        let script = self.string(b, p, "script", false);
        let base_url = self.string(b, p, "base_url", false);
        let api_key_env = self.string(b, p, "api_key_env", false).unwrap_or_else(|| DEFAULT_API_KEY_ENV.into());
        let timeout_s = self.float(b, p, "timeout_s", false, Some((0.0, 3600.0)), false).unwrap_or(60.0);
        let kind = match kind.as_deref() {
            Some("mock") => BackendKind::Mock { script: script.map(|s| base_dir.join(s)) },
            Some("http") => {
                let Some(base_url) = base_url else {
                    self.err("backend.base_url: missing required key (backend.kind = \"http\")".into());
                    return None;
                };
                BackendKind::Http { base_url, api_key_env, timeout: Duration::from_secs_f64(timeout_s) }
            }
            Some(other) => {
                self.err(format!("backend.kind: expected \"mock\" or \"http\", got {other:?}"));
                return None;
            }
            None => return None,
        };
        Some(BackendConfig { kind, model_id: model_id?, embed_model, max_in_flight, temperature, max_tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::from_toml_str(s, Path::new("/cfg"))
    }

    fn errors(s: &str) -> Vec<String> {
        match parse(s) {
            Err(ConfigError::Invalid(e)) => e,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_mock_config() {
        let c = parse("seed = 7\n[backend]\nkind = \"mock\"\nmodel_id = \"m\"\nscript = \"s.jsonl\"").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.max_iterations, 3);
        assert_eq!(c.rcc_eps, 1e-4);
        assert_eq!(c.merge, MergeConfig::default());
        assert_eq!(c.backend.kind, BackendKind::Mock { script: Some(PathBuf::from("/cfg/s.jsonl")) });
        assert_eq!(c.eval.model_id, "m");
        assert_eq!(c.templates, TemplateSource::Builtin);
    }

    #[test]
    fn full_config() {
        let c = parse(
            r#"
seed = 1
max_iterations = 5
rcc_eps = 0.001
workers = 4
kgc_limit = 100
[backend]
kind = "http"
model_id = "gpt-4"
base_url = "https://api.example.com/v1"
timeout_s = 30
max_in_flight = 8
[retry]
max_retries = 2
[thresholds]
freq = 3
sim = 0.9
link = 0.75
[prices.gpt-4]
prompt_per_1k = 0.03
completion_per_1k = 0.06
[eval]
repeats = 3
"#,
        )
        .unwrap();
        assert_eq!(c.max_iterations, 5);
        assert_eq!(c.merge.freq_threshold, 3);
        assert_eq!(c.prices["gpt-4"].completion_per_1k, 0.06);
        assert_eq!(c.retry.max_retries, 2);
        assert_eq!(c.eval.repeats, 3);
        assert!(matches!(c.backend.kind, BackendKind::Http { ref api_key_env, .. } if api_key_env == DEFAULT_API_KEY_ENV));
        assert_eq!(c.agent_config().workers, 4);
    }

    #[test]
    fn errors_are_exhaustive() {
        let e = errors("max_iterations = 0\nrcc_eps = -1\nbogus = 1\n[thresholds]\nsim = 2\n");
        assert_eq!(e.len(), 6, "{e:?}");
        for key in ["seed", "backend", "max_iterations", "rcc_eps", "bogus", "thresholds.sim"] {
            assert!(e.iter().any(|m| m.starts_with(key)), "{key} not reported in {e:?}");
        }
    }

    #[test]
    fn missing_backend_keys_are_named() {
        let e = errors("seed = 1\n[backend]\nkind = \"http\"\n");
        assert!(e.iter().any(|m| m.starts_with("backend.model_id: missing")));
        assert!(e.iter().any(|m| m.starts_with("backend.base_url: missing")));
        let e = errors("seed = \"x\"\n[backend]\nkind = \"grpc\"\nmodel_id = \"m\"");
        assert!(e[0].starts_with("seed: expected an integer"));
        assert!(e[1].contains("\"grpc\""));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse("seed = "), Err(ConfigError::Syntax(_))));
    }
}
