//! Chat backends: the live HTTP client, the scripted test backend, and the
//! usage ledger / cost accounting shared by both.
//!
//! Every call — live or scripted — lands in the ledger, so cost reports and
//! call counts are complete by construction.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// One chat-completion request: a system message and a user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Call-site label ("planner", "node-exec", ...) carried into the ledger.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

/// Ledger record for a single call. Token counts come from the server's usage
/// block (or the script); they are never re-estimated client-side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub tag: String,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_ms: u64,
}

/// A chat-capable backend. Implementations must be safe to share across
/// threads; the engine itself drives them sequentially.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse>;

    /// The ledger this backend records into.
    fn ledger(&self) -> &UsageLedger;
}

// ---------------------------------------------------------------------------
// Usage ledger
// ---------------------------------------------------------------------------

/// Append-only, thread-safe record of every call made through a backend.
#[derive(Debug, Clone, Default)]
pub struct UsageLedger {
    entries: Arc<Mutex<Vec<Usage>>>,
}

impl UsageLedger {
    pub fn new() -> UsageLedger {
        UsageLedger::default()
    }

    pub fn record(&self, usage: Usage) {
        self.entries.lock().expect("ledger poisoned").push(usage);
    }

    pub fn snapshot(&self) -> Vec<Usage> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.entries.lock().expect("ledger poisoned").len()
    }

    /// Calls recorded under a given tag.
    pub fn calls_tagged(&self, tag: &str) -> usize {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|u| u.tag == tag)
            .count()
    }

    /// One JSON record per line: `{tag, model, prompt_tokens, completion_tokens, wall_time_ms}`.
    pub fn export(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| FlowError::io(path.display(), e))?;
        let mut w = std::io::BufWriter::new(file);
        for usage in self.snapshot() {
            serde_json::to_writer(&mut w, &usage)?;
            writeln!(w).map_err(|e| FlowError::io(path.display(), e))?;
        }
        w.flush().map_err(|e| FlowError::io(path.display(), e))?;
        Ok(())
    }

    pub fn import(path: &std::path::Path) -> Result<Vec<Usage>> {
        use std::io::BufRead;
        let file = std::fs::File::open(path).map_err(|e| FlowError::io(path.display(), e))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| FlowError::io(path.display(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Per-model prices in integer micro-dollars per million tokens.
/// ($0.15 per 1M tokens == 150_000.)
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: std::collections::BTreeMap<String, PriceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceEntry {
    pub prompt_micro_per_mtok: u64,
    pub completion_micro_per_mtok: u64,
}

impl PriceEntry {
    /// Convenience constructor from dollars per million tokens.
    pub fn per_mtok_dollars(prompt: f64, completion: f64) -> PriceEntry {
        PriceEntry {
            prompt_micro_per_mtok: (prompt * 1e6).round() as u64,
            completion_micro_per_mtok: (completion * 1e6).round() as u64,
        }
    }
}

impl PriceTable {
    pub fn insert(&mut self, model: impl Into<String>, entry: PriceEntry) {
        self.models.insert(model.into(), entry);
    }

    pub fn get(&self, model: &str) -> Option<&PriceEntry> {
        self.models.get(model)
    }

    pub fn load(path: &std::path::Path) -> Result<PriceTable> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path.display(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exact money amount. One pico-dollar is the natural unit for
/// `tokens x micro-dollars-per-megatoken`, so sums stay integral.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cost {
    picodollars: u128,
}

impl Cost {
    pub fn zero() -> Cost {
        Cost::default()
    }

    pub fn from_picodollars(picodollars: u128) -> Cost {
        Cost { picodollars }
    }

    pub fn picodollars(&self) -> u128 {
        self.picodollars
    }

    /// Whole micro-dollars (floor).
    pub fn microdollars(&self) -> u128 {
        self.picodollars / 1_000_000
    }

    /// Approximate dollars, for display only.
    pub fn dollars(&self) -> f64 {
        self.picodollars as f64 / 1e12
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost {
            picodollars: self.picodollars + rhs.picodollars,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.picodollars += rhs.picodollars;
    }
}

/// Exact cost of a single call under the given prices.
pub fn call_cost(usage: &Usage, prices: &PriceTable) -> Result<Cost> {
    let entry = prices
        .get(&usage.model)
        .ok_or_else(|| FlowError::UnpricedModel(usage.model.clone()))?;
    let pico = usage.prompt_tokens as u128 * entry.prompt_micro_per_mtok as u128
        + usage.completion_tokens as u128 * entry.completion_micro_per_mtok as u128;
    Ok(Cost::from_picodollars(pico))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_microdollars: u64,
    /// Exact value as a decimal string (may exceed u64 in pathological runs).
    pub cost_picodollars: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_model: std::collections::BTreeMap<String, ModelCost>,
    pub total_calls: u64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub total_cost_microdollars: u64,
    pub total_cost_picodollars: String,
}

impl CostReport {
    pub fn total_cost(&self) -> Cost {
        Cost::from_picodollars(
            self.total_cost_picodollars
                .parse()
                .expect("report picodollars are always a decimal integer"),
        )
    }
}

/// Aggregate a usage slice into an exact cost report.
pub fn cost_report(usages: &[Usage], prices: &PriceTable) -> Result<CostReport> {
    let mut report = CostReport::default();
    let mut per_model_pico: std::collections::BTreeMap<String, u128> = Default::default();
    let mut total = Cost::zero();
    for usage in usages {
        let cost = call_cost(usage, prices)?;
        let entry = report.per_model.entry(usage.model.clone()).or_default();
        entry.calls += 1;
        entry.prompt_tokens += usage.prompt_tokens;
        entry.completion_tokens += usage.completion_tokens;
        *per_model_pico.entry(usage.model.clone()).or_default() += cost.picodollars();
        report.total_calls += 1;
        report.total_prompt_tokens += usage.prompt_tokens;
        report.total_completion_tokens += usage.completion_tokens;
        total += cost;
    }
    for (model, pico) in per_model_pico {
        let entry = report
            .per_model
            .get_mut(&model)
            .expect("entry created above");
        entry.cost_microdollars = (pico / 1_000_000) as u64;
        entry.cost_picodollars = pico.to_string();
    }
    report.total_cost_microdollars = total.microdollars() as u64;
    report.total_cost_picodollars = total.picodollars().to_string();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Response entry in a script. Token counts default to whitespace token
/// counts of the request/response when omitted, keeping ledgers deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> ScriptedResponse {
        ScriptedResponse {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

/// Keyed rule: serves `response` when `key` occurs as a substring of the
/// rendered request (system + user text). First matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub key: String,
    #[serde(flatten)]
    pub response: ScriptedResponse,
}

/// Script body: strict FIFO or keyed-by-content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Script {
    Fifo { responses: Vec<ScriptedResponse> },
    Keyed { rules: Vec<ScriptRule> },
}

impl Script {
    pub fn load(path: &std::path::Path) -> Result<Script> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path.display(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

enum ScriptState {
    Fifo {
        queue: VecDeque<ScriptedResponse>,
        served: usize,
    },
    Keyed {
        rules: Vec<ScriptRule>,
    },
}

/// Deterministic in-process backend driven by a script. Logs every request
/// verbatim; records usage like the live client would.
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
    log: Mutex<Vec<ChatRequest>>,
    ledger: UsageLedger,
}

fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl ScriptedBackend {
    pub fn new(script: Script) -> ScriptedBackend {
        ScriptedBackend::with_ledger(script, UsageLedger::new())
    }

    pub fn with_ledger(script: Script, ledger: UsageLedger) -> ScriptedBackend {
        let state = match script {
            Script::Fifo { responses } => ScriptState::Fifo {
                queue: responses.into(),
                served: 0,
            },
            Script::Keyed { rules } => ScriptState::Keyed { rules },
        };
        ScriptedBackend {
            state: Mutex::new(state),
            log: Mutex::new(Vec::new()),
            ledger,
        }
    }

    /// Convenience: FIFO script from plain strings.
    pub fn fifo<I, S>(texts: I) -> ScriptedBackend
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend::new(Script::Fifo {
            responses: texts
                .into_iter()
                .map(|t| ScriptedResponse::text(t))
                .collect(),
        })
    }

    /// Convenience: keyed script from (key, response text) pairs.
    pub fn keyed<I, K, V>(rules: I) -> ScriptedBackend
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        ScriptedBackend::new(Script::Keyed {
            rules: rules
                .into_iter()
                .map(|(k, v)| ScriptRule {
                    key: k.into(),
                    response: ScriptedResponse::text(v),
                })
                .collect(),
        })
    }

    /// Every request served so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log poisoned").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        self.log.lock().expect("log poisoned").push(req.clone());
        let response = {
            let mut state = self.state.lock().expect("script poisoned");
            match &mut *state {
                ScriptState::Fifo { queue, served } => match queue.pop_front() {
                    Some(r) => {
                        *served += 1;
                        r
                    }
                    None => return Err(FlowError::ScriptExhausted { served: *served }),
                },
                ScriptState::Keyed { rules } => {
                    let rendered = format!("{}\n{}", req.system, req.user);
                    match rules.iter().find(|r| rendered.contains(&r.key)) {
                        Some(rule) => rule.response.clone(),
                        None => {
                            return Err(FlowError::KeyMiss {
                                tag: req.tag.clone(),
                            })
                        }
                    }
                }
            }
        };
        let usage = Usage {
            tag: req.tag.clone(),
            model: req.model.clone(),
            prompt_tokens: response
                .prompt_tokens
                .unwrap_or_else(|| whitespace_tokens(&req.system) + whitespace_tokens(&req.user)),
            completion_tokens: response
                .completion_tokens
                .unwrap_or_else(|| whitespace_tokens(&response.text)),
            wall_time_ms: 0,
        };
        self.ledger.record(usage.clone());
        Ok(ChatResponse {
            text: response.text,
            usage,
        })
    }

    fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL up to and including the API version segment,
    /// e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub api_key: String,
    pub timeout: Duration,
    /// Total attempts per request (first try + retries).
    pub max_attempts: u32,
    /// First backoff delay; doubled after each failed attempt.
    pub backoff_base: Duration,
    /// Maximum simultaneous in-flight requests.
    pub in_flight_cap: usize,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            api_key: String::new(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
            in_flight_cap: 8,
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Counting semaphore used to cap in-flight requests.
struct Gate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Gate {
        Gate {
            slots: Mutex::new(slots.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().expect("gate poisoned");
        while *slots == 0 {
            slots = self.cv.wait(slots).expect("gate poisoned");
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.slots.lock().expect("gate poisoned") += 1;
        self.gate.cv.notify_one();
    }
}

/// Chat-completions client with bounded retries and exponential backoff.
/// Authentication failures are never retried.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    ledger: UsageLedger,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<HttpBackend> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| FlowError::Http(e.to_string()))?;
        let gate = Gate::new(config.in_flight_cap);
        Ok(HttpBackend {
            config,
            client,
            gate,
            ledger: UsageLedger::new(),
        })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, AttemptError> {
        let body = WireRequest {
            model: &req.model,
            messages: vec![
                WireMessage {
                    role: "system",
                    content: &req.system,
                },
                WireMessage {
                    role: "user",
                    content: &req.user,
                },
            ],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let start = std::time::Instant::now();
        let result = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send();
        let response = match result {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(AttemptError::Timeout),
            Err(e) => return Err(AttemptError::Transient(e.to_string())),
        };
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptError::Fatal(FlowError::Auth(status.as_u16())));
        }
        if status.as_u16() == 429 {
            return Err(AttemptError::RateLimited);
        }
        if status.is_server_error() {
            return Err(AttemptError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(FlowError::Http(format!(
                "status {status}"
            ))));
        }
        let wire: WireResponse = match response.json() {
            Ok(w) => w,
            Err(e) => {
                return Err(AttemptError::Fatal(FlowError::MalformedResponse(
                    e.to_string(),
                )))
            }
        };
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                AttemptError::Fatal(FlowError::MalformedResponse("no choices".into()))
            })?;
        let usage = wire.usage.ok_or_else(|| {
            AttemptError::Fatal(FlowError::MalformedResponse("missing usage block".into()))
        })?;
        Ok(ChatResponse {
            text,
            usage: Usage {
                tag: req.tag.clone(),
                model: req.model.clone(),
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                wall_time_ms: start.elapsed().as_millis() as u64,
            },
        })
    }
}

enum AttemptError {
    Timeout,
    RateLimited,
    Transient(String),
    Fatal(FlowError),
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let _permit = self.gate.acquire();
        let mut backoff = self.config.backoff_base;
        let mut last: Option<AttemptError> = None;
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(req) {
                Ok(resp) => {
                    self.ledger.record(resp.usage.clone());
                    return Ok(resp);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        let attempts = self.config.max_attempts;
        Err(match last {
            Some(AttemptError::Timeout) => FlowError::Timeout { attempts },
            Some(AttemptError::RateLimited) => FlowError::RateLimited { attempts },
            Some(AttemptError::Transient(msg)) => FlowError::Http(msg),
            _ => FlowError::Http("no attempts made".into()),
        })
    }

    fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }
}
