//! Chat and embedding backends behind one gateway that handles retries,
//! in-flight limits and token/cost accounting.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(s: impl Into<String>) -> Self {
        Message { role: Role::System, content: s.into() }
    }
    pub fn user(s: impl Into<String>) -> Self {
        Message { role: Role::User, content: s.into() }
    }
    pub fn assistant(s: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Accounting bucket, e.g. "rte", "kgc", "eval".
    #[serde(default)]
    pub purpose: String,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest { messages, model_id: model_id.into(), temperature: 0.0, max_tokens: 1024, purpose: String::new() }
    }

    pub fn purpose(mut self, p: impl Into<String>) -> Self {
        self.purpose = p.into();
        self
    }

    pub fn last_user(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str())
    }

    /// All message contents joined, for diagnostics and matching.
    pub fn transcript(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("request has no user message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub vectors: Vec<Vec<f64>>,
    pub prompt_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused the request with status {status}: {body}")]
    BackendRefusal { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("mock script has no unconsumed step matching request: {request}")]
    ScriptExhausted { request: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::Timeout)
    }
}

pub trait LlmBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
    fn embed(&self, texts: &[String]) -> Result<Embeddings, GatewayError>;
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// Accounting

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

pub type PriceTable = BTreeMap<String, Price>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub model: String,
    pub purpose: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub attempts: u32,
    pub wall_time_s: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_s: f64,
    pub cost: f64,
}

impl UsageTotals {
    fn add(&mut self, r: &CallRecord) {
        self.calls += 1;
        self.attempts += u64::from(r.attempts);
        self.prompt_tokens += r.prompt_tokens;
        self.completion_tokens += r.completion_tokens;
        self.wall_time_s += r.wall_time_s;
        self.cost += r.cost;
    }
}

/// Every successful call, plus failed-call and finished-task counters.
/// Totals are always derived from the records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub records: Vec<CallRecord>,
    pub failed_calls: u64,
    /// Finished task records per purpose, for per-task normalization.
    pub tasks: BTreeMap<String, u64>,
}

impl CostLedger {
    pub fn total(&self) -> UsageTotals {
        let mut t = UsageTotals::default();
        self.records.iter().for_each(|r| t.add(r));
        t
    }

    pub fn by_model(&self) -> BTreeMap<String, UsageTotals> {
        self.group(|r| r.model.clone())
    }

    pub fn by_purpose(&self) -> BTreeMap<String, UsageTotals> {
        self.group(|r| r.purpose.clone())
    }

    fn group(&self, key: impl Fn(&CallRecord) -> String) -> BTreeMap<String, UsageTotals> {
        let mut m: BTreeMap<String, UsageTotals> = BTreeMap::new();
        for r in &self.records {
            m.entry(key(r)).or_default().add(r);
        }
        m
    }

    pub fn absorb(&mut self, other: CostLedger) {
        self.records.extend(other.records);
        self.failed_calls += other.failed_calls;
        for (k, v) in other.tasks {
            *self.tasks.entry(k).or_default() += v;
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("ledger serializes") + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<CostLedger> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_backoff_ms: 500, max_backoff_ms: 8000 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared entry point for all model calls. Cheap to share across threads.
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    retry: RetryPolicy,
    prices: PriceTable,
    ledger: Mutex<CostLedger>,
    limiter: Limiter,
    embed_model: String,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Gateway {
            backend,
            retry: RetryPolicy::default(),
            prices: PriceTable::new(),
            ledger: Mutex::new(CostLedger::default()),
            limiter: Limiter { in_flight: Mutex::new(0), freed: Condvar::new(), cap: 1 },
            embed_model: "embedding".into(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_prices(mut self, prices: PriceTable) -> Self {
        self.prices = prices;
        self
    }

    pub fn with_concurrency(mut self, cap: usize) -> Self {
        self.limiter.cap = cap.max(1);
        self
    }

    pub fn with_embed_model(mut self, model: impl Into<String>) -> Self {
        self.embed_model = model.into();
        self
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn record_task(&self, purpose: &str) {
        *self.ledger.lock().expect("ledger lock").tasks.entry(purpose.to_string()).or_default() += 1;
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> (Result<T, GatewayError>, u32) {
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Err(e) if e.is_retryable() && attempt <= self.retry.max_retries => {
                    tracing::warn!(attempt, error = %e, "retrying model call");
                    std::thread::sleep(self.retry.backoff(attempt - 1));
                }
                other => return (other, attempt),
            }
        }
    }

    fn record(&self, model: &str, purpose: &str, prompt: u64, completion: u64, attempts: u32, started: Instant) {
        let price = self.prices.get(model).copied().unwrap_or_default();
        let cost = prompt as f64 / 1000.0 * price.prompt_per_1k + completion as f64 / 1000.0 * price.completion_per_1k;
        self.ledger.lock().expect("ledger lock").records.push(CallRecord {
            model: model.to_string(),
            purpose: purpose.to_string(),
            prompt_tokens: prompt,
            completion_tokens: completion,
            attempts,
            wall_time_s: started.elapsed().as_secs_f64(),
            cost,
        });
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let started = Instant::now();
        let (res, attempts) = self.with_retries(|| self.backend.chat(req));
        match &res {
            Ok(r) => self.record(&req.model_id, &req.purpose, r.prompt_tokens, r.completion_tokens, attempts, started),
            Err(_) => self.ledger.lock().expect("ledger lock").failed_calls += 1,
        }
        res
    }

    pub fn embed(&self, texts: &[String], purpose: &str) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let started = Instant::now();
        let (res, attempts) = self.with_retries(|| self.backend.embed(texts));
        match res {
            Ok(e) => {
                if e.vectors.len() != texts.len() {
                    return Err(GatewayError::Protocol(format!(
                        "{} vectors for {} texts",
                        e.vectors.len(),
                        texts.len()
                    )));
                }
                self.record(&self.embed_model, purpose, e.prompt_tokens, 0, attempts, started);
                Ok(e.vectors)
            }
            Err(err) => {
                self.ledger.lock().expect("ledger lock").failed_calls += 1;
                Err(err)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted mock

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Any,
    /// Substring of the most recent user message.
    LastUserContains(String),
    /// Substring anywhere in the request's messages.
    TranscriptContains(String),
    /// All substrings present in the request's messages.
    TranscriptContainsAll(Vec<String>),
}

impl Matcher {
    pub fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::LastUserContains(s) => req.last_user().contains(s.as_str()),
            Matcher::TranscriptContains(s) => req.messages.iter().any(|m| m.content.contains(s.as_str())),
            Matcher::TranscriptContainsAll(all) => {
                let t = req.transcript();
                all.iter().all(|s| t.contains(s.as_str()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
    /// A repeating step answers every matching call and is never consumed.
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptStep {
    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        ScriptStep { matcher, response: response.into(), repeat: false }
    }

    pub fn repeating(matcher: Matcher, response: impl Into<String>) -> Self {
        ScriptStep { matcher, response: response.into(), repeat: true }
    }
}

pub const MOCK_EMBED_DIM: usize = 1024;

/// Deterministic backend driven by an ordered script.
#[derive(Default)]
pub struct MockBackend {
    steps: Mutex<Vec<(ScriptStep, bool)>>,
    failures: Mutex<VecDeque<GatewayError>>,
    embed_overrides: HashMap<String, Vec<f64>>,
    transcript: Mutex<Vec<(ChatRequest, String)>>,
}

impl MockBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        MockBackend { steps: Mutex::new(steps.into_iter().map(|s| (s, false)).collect()), ..Default::default() }
    }

    /// Reads a script file: a JSON array of steps, or one step per line.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let steps: Vec<ScriptStep> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
                .collect::<Result<_, _>>()?
        };
        Ok(MockBackend::new(steps))
    }

    /// Queues errors returned (in order) before any scripted step is consulted.
    pub fn fail_next(self, errors: Vec<GatewayError>) -> Self {
        self.failures.lock().expect("mock lock").extend(errors);
        self
    }

    pub fn with_embedding(mut self, text: &str, v: Vec<f64>) -> Self {
        let mut v = v;
        l2_normalize(&mut v);
        self.embed_overrides.insert(text.to_string(), v);
        self
    }

    pub fn transcript(&self) -> Vec<(ChatRequest, String)> {
        self.transcript.lock().expect("mock lock").clone()
    }

    pub fn unconsumed(&self) -> usize {
        self.steps.lock().expect("mock lock").iter().filter(|(s, used)| !s.repeat && !used).count()
    }
}

fn word_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x100000001b3))
}

/// Feature-hashed character 1-3-grams of each boundary-marked lowercase word.
pub fn hashed_ngram_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let marked: Vec<char> = format!("<{word}>").chars().collect();
        for n in 1..=3 {
            for gram in marked.windows(n) {
                let s: String = gram.iter().collect();
                v[(fnv1a(s.as_bytes()) % dim as u64) as usize] += 1.0;
            }
        }
    }
    l2_normalize(&mut v);
    v
}

impl LlmBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if let Some(e) = self.failures.lock().expect("mock lock").pop_front() {
            return Err(e);
        }
        let content = {
            let mut steps = self.steps.lock().expect("mock lock");
            let hit = steps.iter_mut().find(|(s, used)| !*used && s.matcher.matches(req));
            match hit {
                Some((step, used)) => {
                    *used = !step.repeat;
                    step.response.clone()
                }
                None => return Err(GatewayError::ScriptExhausted { request: req.last_user().to_string() }),
            }
        };
        self.transcript.lock().expect("mock lock").push((req.clone(), content.clone()));
        Ok(ChatResponse {
            prompt_tokens: req.messages.iter().map(|m| word_tokens(&m.content)).sum(),
            completion_tokens: word_tokens(&content),
            content,
            latency_s: 0.0,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Embeddings, GatewayError> {
        if let Some(e) = self.failures.lock().expect("mock lock").pop_front() {
            return Err(e);
        }
        let vectors = texts
            .iter()
            .map(|t| self.embed_overrides.get(t).cloned().unwrap_or_else(|| hashed_ngram_embedding(t, MOCK_EMBED_DIM)))
            .collect();
        Ok(Embeddings { vectors, prompt_tokens: texts.iter().map(|t| word_tokens(t)).sum() })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend (chat-completions wire shape)

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    embed_model: String,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("base_url", &self.base_url).finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            embed_model: "text-embedding-3-small".into(),
            client,
        })
    }

    pub fn with_embed_model(mut self, m: impl Into<String>) -> Self {
        self.embed_model = m.into();
        self
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut rb = self.client.post(format!("{}/{route}", self.base_url)).json(body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(map_reqwest)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(map_reqwest)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(e.to_string())),
            408 | 429 | 500..=599 => Err(GatewayError::Transport(format!("status {status}: {}", truncate(&text)))),
            _ => Err(GatewayError::BackendRefusal { status, body: truncate(&text) }),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(500).collect()
}

fn map_reqwest(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

impl LlmBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let body = json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let v = self.post("chat/completions", &body)?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))?
            .to_string();
        let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(ChatResponse {
            content,
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
            latency_s: started.elapsed().as_secs_f64(),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Embeddings, GatewayError> {
        let v = self.post("embeddings", &json!({ "model": self.embed_model, "input": texts }))?;
        let data = v.get("data").and_then(Value::as_array).ok_or_else(|| GatewayError::Protocol("missing data".into()))?;
        let mut vectors = Vec::with_capacity(data.len());
        for item in data {
            let mut vec: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Protocol("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| GatewayError::Protocol("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            l2_normalize(&mut vec);
            vectors.push(vec);
        }
        let prompt_tokens = v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0);
        Ok(Embeddings { vectors, prompt_tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![Message::user(text)]).purpose("rte")
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_retries: 3, initial_backoff_ms: 0, max_backoff_ms: 0 }
    }

    #[test]
    fn mock_returns_sentinel_verbatim() {
        let mock = MockBackend::new(vec![ScriptStep::new(Matcher::Any, "This is a faithful trajectory.")]);
        let gw = Gateway::new(Arc::new(mock));
        assert_eq!(gw.chat(&req("judge")).unwrap().content, "This is a faithful trajectory.");
    }

    #[test]
    fn script_order_and_exhaustion() {
        let mock = MockBackend::new(vec![
            ScriptStep::new(Matcher::Any, "one"),
            ScriptStep::new(Matcher::Any, "two"),
            ScriptStep::new(Matcher::Any, "three"),
        ]);
        let got: Vec<_> = (0..3).map(|_| mock.chat(&req("x")).unwrap().content).collect();
        assert_eq!(got, ["one", "two", "three"]);
        assert_eq!(mock.chat(&req("fourth")), Err(GatewayError::ScriptExhausted { request: "fourth".into() }));
    }

    #[test]
    fn substring_matcher_targets_cot_prompts() {
        let mock = MockBackend::new(vec![
            ScriptStep::new(Matcher::LastUserContains("step by step".into()), "cot"),
            ScriptStep::repeating(Matcher::Any, "plain"),
        ]);
        assert_eq!(mock.chat(&req("Extract entities.")).unwrap().content, "plain");
        assert_eq!(mock.chat(&req("Extract. Let's think step by step")).unwrap().content, "cot");
        assert_eq!(mock.chat(&req("Let's think step by step")).unwrap().content, "plain");
    }

    #[test]
    fn ledger_sums_and_prices() {
        struct Fixed;
        impl LlmBackend for Fixed {
            fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
                Ok(ChatResponse { content: "ok".into(), prompt_tokens: 10, completion_tokens: 5, latency_s: 0.0 })
            }
            fn embed(&self, _: &[String]) -> Result<Embeddings, GatewayError> {
                unreachable!()
            }
        }
        let prices = PriceTable::from([("m".to_string(), Price { prompt_per_1k: 1.0, completion_per_1k: 2.0 })]);
        let gw = Gateway::new(Arc::new(Fixed)).with_prices(prices);
        gw.chat(&req("a")).unwrap();
        gw.chat(&req("b")).unwrap();
        let t = gw.ledger().total();
        assert_eq!((t.calls, t.prompt_tokens, t.completion_tokens), (2, 20, 10));
        assert!((t.cost - 0.04).abs() < 1e-12);
        assert_eq!(gw.ledger().by_purpose()["rte"].calls, 2);
    }

    #[test]
    fn retries_then_succeeds() {
        let mock = MockBackend::new(vec![ScriptStep::new(Matcher::Any, "ok")])
            .fail_next(vec![GatewayError::Transport("reset".into()), GatewayError::Timeout]);
        let gw = Gateway::new(Arc::new(mock)).with_retry(fast());
        assert_eq!(gw.chat(&req("x")).unwrap().content, "ok");
        assert_eq!(gw.ledger().records[0].attempts, 3);

        let mock = MockBackend::new(vec![]).fail_next(vec![GatewayError::Timeout; 5]);
        let gw = Gateway::new(Arc::new(mock)).with_retry(fast());
        assert_eq!(gw.chat(&req("x")), Err(GatewayError::Timeout));
        assert_eq!(gw.ledger().failed_calls, 1);
        assert!(gw.ledger().records.is_empty());
    }

    #[test]
    fn invalid_requests() {
        let gw = Gateway::new(Arc::new(MockBackend::new(vec![])));
        let r = ChatRequest::new("m", vec![Message::system("only system")]);
        assert!(matches!(gw.chat(&r), Err(GatewayError::InvalidRequest(_))));
        let mut r = req("x");
        r.temperature = -1.0;
        assert!(matches!(gw.chat(&r), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(gw.embed(&[], "e"), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn mock_embeddings() {
        let mock = MockBackend::new(vec![]);
        let texts: Vec<String> = ["locate in", "located in", "founded in", "locate in"].map(String::from).to_vec();
        let v = mock.embed(&texts).unwrap().vectors;
        for x in &v {
            assert!((x.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(v[0], v[3]);
        assert!((cosine(&v[0], &v[3]) - 1.0).abs() < 1e-12);
        assert!(cosine(&v[0], &v[1]) > cosine(&v[0], &v[2]));
    }

    #[test]
    fn limiter_bounds_in_flight() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Slow(AtomicUsize, AtomicUsize);
        impl LlmBackend for Slow {
            fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
                let now = self.0.fetch_add(1, Ordering::SeqCst) + 1;
                self.1.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.0.fetch_sub(1, Ordering::SeqCst);
                Ok(ChatResponse { content: String::new(), prompt_tokens: 0, completion_tokens: 0, latency_s: 0.0 })
            }
            fn embed(&self, _: &[String]) -> Result<Embeddings, GatewayError> {
                unreachable!()
            }
        }
        let backend = Arc::new(Slow(AtomicUsize::new(0), AtomicUsize::new(0)));
        let gw = Gateway::new(backend.clone()).with_concurrency(2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.chat(&req("x")).unwrap());
            }
        });
        assert!(backend.1.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.ledger().total().calls, 8);
    }

    /// Serves canned (status, body, delay) responses, one per connection.
    fn serve(responses: Vec<(u16, String, u64)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body, delay) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut line = String::new();
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                std::thread::sleep(Duration::from_millis(delay));
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
            bodies
        });
        (url, handle)
    }

    const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":7,"completion_tokens":1}}"#;

    #[test]
    fn http_retry_then_success() {
        let (url, h) = serve(vec![(503, "{}".into(), 0), (503, "{}".into(), 0), (200, OK_BODY.into(), 0)]);
        let backend = HttpBackend::new(&url, Some("k".into()), Duration::from_secs(5)).unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_retry(fast());
        let r = gw.chat(&req("hello")).unwrap();
        assert_eq!((r.content.as_str(), r.prompt_tokens, r.completion_tokens), ("hi", 7, 1));
        assert_eq!(gw.ledger().records[0].attempts, 3);
        let bodies = h.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn http_refusal_is_not_retried() {
        let (url, h) = serve(vec![(401, r#"{"error":"bad key"}"#.into(), 0)]);
        let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_retry(fast());
        match gw.chat(&req("hello")) {
            Err(GatewayError::BackendRefusal { status: 401, body }) => assert!(body.contains("bad key")),
            other => panic!("{other:?}"),
        }
        h.join().unwrap();
    }

    #[test]
    fn http_timeout_is_bounded() {
        let (url, h) = serve(vec![(200, OK_BODY.into(), 600)]);
        let backend = HttpBackend::new(&url, None, Duration::from_millis(100)).unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_retry(RetryPolicy { max_retries: 0, ..fast() });
        assert_eq!(gw.chat(&req("hello")), Err(GatewayError::Timeout));
        h.join().unwrap();
    }

    #[test]
    fn http_embeddings_normalized() {
        let body = r#"{"data":[{"embedding":[3,4]},{"embedding":[0,2]}],"usage":{"prompt_tokens":4}}"#;
        let (url, h) = serve(vec![(200, body.into(), 0)]);
        let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap();
        let gw = Gateway::new(Arc::new(backend));
        let v = gw.embed(&["a".into(), "b".into()], "merge").unwrap();
        assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        h.join().unwrap();
    }
}
