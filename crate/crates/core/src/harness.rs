//! Operational layer: task ingestion, metric evaluators, trace generation for
//! network construction, the training and inference drivers, and their
//! on-disk artifacts and reports.

use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{cost_report, ChatBackend, ChatRequest, CostReport, PriceTable, Usage};
use crate::embedding::{EmbeddingCache, HashEmbedder, DEFAULT_DIM};
use crate::error::{FlowError, Result};
use crate::executor::{run_episode, run_inference, InferenceResult, RunContext, RunSettings};
use crate::network::{build_network, inject_noise, system_prompt_for_role, FlowNetwork};
use crate::policy::{reinforce_update, AdamState, Baseline, Checkpoint, PolicyParams, Trajectory};
use crate::textgrad::batch_round;
use crate::textgrad::PromptStore;
use crate::workflow::{Metric, TaskRecord, Workflow};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Artifact file names inside an output directory, shared by train, infer,
/// and the command-line front end.
pub const NETWORK_FILE: &str = "network.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROMPT_STORE_FILE: &str = "prompt_store.jsonl";
pub const CACHE_FILE: &str = "cache.jsonl";
pub const REPORT_FILE: &str = "report.json";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Every knob of the pipeline. Serialized into the training report so
/// inference can verify it is reading compatible artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Similarity threshold for joining an existing node during construction.
    pub delta: f64,
    /// Maximum hop distance per routing action.
    pub skip_k: u32,
    /// Reward blend: alpha * per-step routing match + (1-alpha) * final score.
    pub alpha: f64,
    /// Return discount factor.
    pub gamma: f64,
    /// Adam step size for policy updates.
    pub lr: f64,
    /// Sampled episodes per task per epoch, batched into one policy update.
    pub episodes_per_task: u32,
    /// Number of training epochs; prompt optimization runs once per epoch.
    pub tg_episodes: u32,
    /// Tasks per prompt-optimization batch.
    pub batch_size: u32,
    /// Sentence budget per prompt update.
    pub eta: u32,
    /// Upper bound on planner steps.
    pub max_step: u32,
    pub seed: u64,
    /// Fraction of training workflows to corrupt before construction.
    pub noise_rate: f64,
    /// Dimension of the offline hash embedder.
    pub embed_dim: usize,
    /// Model used for planning and node profiling (node executions use each
    /// node's own model).
    pub model_id: String,
    /// Run prompt optimization after every task instead of once per epoch.
    pub tg_per_task: bool,
    /// Let walks extend an exhausted plan instead of forcing a path to sink.
    pub replan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            delta: 0.7,
            skip_k: 1,
            alpha: 0.5,
            gamma: 0.95,
            lr: 0.001,
            episodes_per_task: 100,
            tg_episodes: 5,
            batch_size: 30,
            eta: 3,
            max_step: 5,
            seed: 0,
            noise_rate: 0.0,
            embed_dim: DEFAULT_DIM,
            model_id: "default".into(),
            tg_per_task: false,
            replan: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) || !self.delta.is_finite() {
            return Err(FlowError::InvalidDelta(self.delta));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(FlowError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !self.gamma.is_finite() {
            return Err(FlowError::GammaOutOfRange(self.gamma));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(FlowError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !self.noise_rate.is_finite() {
            return Err(FlowError::InvalidNoiseRate(self.noise_rate));
        }
        if self.skip_k == 0 {
            return Err(FlowError::InvalidConfig(
                "skip distance must be >= 1".into(),
            ));
        }
        if self.episodes_per_task == 0 {
            return Err(FlowError::InvalidConfig(
                "episodes_per_task must be >= 1".into(),
            ));
        }
        if self.tg_episodes == 0 {
            return Err(FlowError::InvalidConfig("tg_episodes must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FlowError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.eta == 0 {
            return Err(FlowError::InvalidSentenceBudget(self.eta));
        }
        if self.max_step == 0 {
            return Err(FlowError::InvalidConfig("max_step must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(FlowError::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(FlowError::InvalidConfig(
                "model_id must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash of the full configuration (hex SHA-256 of its
    /// canonical JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn settings(&self) -> RunSettings {
        RunSettings {
            skip_k: self.skip_k,
            max_step: self.max_step,
            model_id: self.model_id.clone(),
            replan: self.replan,
        }
    }

    fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.embed_dim, self.seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-(stream, a, b) seed so runs don't depend on incidental
/// RNG draw counts elsewhere in the pipeline.
fn derived_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(base) ^ stream) ^ a) ^ b)
}

// ---------------------------------------------------------------------------
// Task ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct StepLine {
    text: String,
    model_id: String,
}

#[derive(Deserialize)]
struct TaskLine {
    task_id: String,
    prompt: String,
    ground_truth: String,
    metric: Metric,
    #[serde(default)]
    workflow: Option<Vec<StepLine>>,
}

/// Read a JSONL task file: one object per line with fields
/// `{task_id, prompt, ground_truth, metric, workflow?: [{text, model_id}]}`.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let file = std::fs::File::open(path).map_err(|e| FlowError::io(path.display(), e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| FlowError::io(path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TaskLine = serde_json::from_str(&line).map_err(|e| FlowError::TaskParse {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !seen.insert(parsed.task_id.clone()) {
            return Err(FlowError::DuplicateTaskId(parsed.task_id));
        }
        let workflow = match parsed.workflow {
            Some(steps) => Some(
                Workflow::from_steps(
                    &parsed.task_id,
                    steps.into_iter().map(|s| (s.text, s.model_id)).collect(),
                )
                .map_err(|e| FlowError::TaskParse {
                    line: line_no,
                    reason: e.to_string(),
                })?,
            ),
            None => None,
        };
        records.push(TaskRecord {
            task_id: parsed.task_id,
            prompt: parsed.prompt,
            ground_truth: parsed.ground_truth,
            metric: parsed.metric,
            workflow,
        });
    }
    Ok(records)
}

/// Write tasks as JSONL in the same shape `load_tasks` reads.
pub fn save_tasks(path: &Path, tasks: &[TaskRecord]) -> Result<()> {
    let mut out = String::new();
    for task in tasks {
        let mut line = serde_json::json!({
            "task_id": task.task_id,
            "prompt": task.prompt,
            "ground_truth": task.ground_truth,
            "metric": task.metric,
        });
        if let Some(w) = &task.workflow {
            line["workflow"] = w
                .operations
                .iter()
                .map(|op| serde_json::json!({"text": op.text, "model_id": op.model_id}))
                .collect();
        }
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| FlowError::io(path.display(), e))
}

// ---------------------------------------------------------------------------
// Evaluators
// ---------------------------------------------------------------------------

fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn last_number(text: &str) -> Option<f64> {
    let re = Regex::new(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?").expect("static regex");
    re.find_iter(text)
        .last()
        .and_then(|m| m.as_str().parse().ok())
}

fn token_f1(prediction: &str, ground_truth: &str) -> f64 {
    let count = |s: &str| {
        let mut map = std::collections::BTreeMap::new();
        for token in s.split_whitespace() {
            *map.entry(token.to_lowercase()).or_insert(0usize) += 1;
        }
        map
    };
    let pred = count(prediction);
    let gt = count(ground_truth);
    let pred_total: usize = pred.values().sum();
    let gt_total: usize = gt.values().sum();
    if pred_total == 0 && gt_total == 0 {
        return 1.0;
    }
    if pred_total == 0 || gt_total == 0 {
        return 0.0;
    }
    let overlap: usize = pred
        .iter()
        .map(|(token, n)| n.min(gt.get(token).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_total as f64;
    let recall = overlap as f64 / gt_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Score a prediction against the ground truth in [0, 1].
///
/// - exact: normalized string equality (casefold, trim, collapsed whitespace)
/// - numeric: last number in each string, |a-b| <= 1e-6 * max(1, |b|); a
///   prediction with no number scores 0, a ground truth with no number is a
///   data error
/// - token-f1: bag-of-token F1 over casefolded whitespace tokens
pub fn evaluate(prediction: &str, ground_truth: &str, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Exact => {
            Ok((normalize_text(prediction) == normalize_text(ground_truth)) as u8 as f64)
        }
        Metric::Numeric => {
            let truth = last_number(ground_truth)
                .ok_or_else(|| FlowError::UnparsableNumber(ground_truth.to_string()))?;
            let Some(pred) = last_number(prediction) else {
                return Ok(0.0);
            };
            Ok(((pred - truth).abs() <= 1e-6 * truth.abs().max(1.0)) as u8 as f64)
        }
        Metric::TokenF1 => Ok(token_f1(prediction, ground_truth)),
    }
}

// ---------------------------------------------------------------------------
// Trace generation
// ---------------------------------------------------------------------------

const TRACE_GEN_SYSTEM: &str = "You are an assistant. Provide workflow steps for tasks \
without test and verify process. For each step, the content and role description must \
follow the following format:\n\n{\n  (<serial number>)Content: <abstract content> | \
<specific content>.\n  Role Description: <role> | <related description>.(/<serial \
number>)\n}\n\nThe \" | \" part must be included. The \"abstract content\" refers to \
the abstract action of the step. The \"specific content\" refers to specific content \
of the step.";

fn trace_gen_user(task: &str, ground_truth: &str) -> String {
    format!(
        "For the task: {task}\nBased on the correct answer: {ground_truth}\n\
         Generate a clear and concise workflow consisting of several steps. Produce a \
         \"minimal-sufficient\" workflow that completes the task with the fewest \
         steps. Each step should be actionable and ordered sequentially. For each \
         step, give a role description that can perform this kind of things."
    )
}

#[derive(Debug, Clone)]
struct TraceStep {
    content: String,
    role: String,
}

/// Parse one tagged candidate workflow; None when the block is malformed
/// (missing tags, serial gaps, missing " | " separators).
fn parse_trace_candidate(text: &str) -> Option<Vec<TraceStep>> {
    let re = Regex::new(r"(?s)\((\d+)\)\s*Content:(.*?)Role Description:(.*?)\(/(\d+)\)")
        .expect("static regex");
    let mut steps = Vec::new();
    for cap in re.captures_iter(text) {
        let open: u32 = cap[1].parse().ok()?;
        let close: u32 = cap[4].parse().ok()?;
        if open != close || open != steps.len() as u32 + 1 {
            return None;
        }
        let content = cap[2].trim().trim_end_matches('.').trim().to_string();
        let role = cap[3].trim().trim_end_matches('.').trim().to_string();
        if content.is_empty() || role.is_empty() || !content.contains('|') {
            return None;
        }
        steps.push(TraceStep { content, role });
    }
    if steps.is_empty() {
        None
    } else {
        Some(steps)
    }
}

/// Short role phrase for executing a step: the `<role>` half of the
/// "role | description" pair.
fn role_phrase(role: &str) -> &str {
    role.split('|').next().unwrap_or(role).trim()
}

/// Execute a candidate's steps one by one through the backend and return the
/// final step's output.
fn replay_candidate(
    task: &TaskRecord,
    steps: &[TraceStep],
    backend: &dyn ChatBackend,
    model_id: &str,
) -> Result<String> {
    let mut context: Vec<(usize, String)> = Vec::new();
    let mut last = String::new();
    for (i, step) in steps.iter().enumerate() {
        let mut user = format!("TASK: {}\n", task.prompt);
        if !context.is_empty() {
            user.push_str("\nCONTEXT:\n");
            for (n, output) in &context {
                user.push_str(&format!("[step {n}] {output}\n"));
            }
        }
        user.push_str(&format!("\nCURRENT_STEP: {}\n", step.content));
        let resp = backend.chat(&ChatRequest {
            model: model_id.to_string(),
            system: system_prompt_for_role(role_phrase(&step.role)),
            user,
            temperature: 0.0,
            max_tokens: None,
            tag: "trace-verify".into(),
        })?;
        last = resp.text.trim().to_string();
        context.push((i + 1, last.clone()));
    }
    Ok(last)
}

/// Outcome of trace generation for one task, for the report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub task_id: String,
    pub attempts: u32,
    pub candidates_parsed: u32,
    pub verified: bool,
    pub kept_steps: Option<u32>,
}

/// Generate candidate workflows per task (up to `max_attempts` backend
/// samples), verify each candidate by step-wise execution against the task's
/// metric, and keep the shortest verified one. Tasks with no verified
/// candidate are skipped and show up in the outcomes with `verified: false`.
pub fn generate_traces(
    tasks: &[TaskRecord],
    backend: &dyn ChatBackend,
    model_id: &str,
    max_attempts: u32,
) -> Result<(Vec<Workflow>, Vec<TraceOutcome>)> {
    if max_attempts == 0 {
        return Err(FlowError::InvalidConfig("max_attempts must be >= 1".into()));
    }
    let mut workflows = Vec::new();
    let mut outcomes = Vec::new();
    for task in tasks {
        if task.ground_truth.trim().is_empty() {
            return Err(FlowError::MissingGroundTruth);
        }
        let mut candidates: Vec<Vec<TraceStep>> = Vec::new();
        for _ in 0..max_attempts {
            let resp = backend.chat(&ChatRequest {
                model: model_id.to_string(),
                system: TRACE_GEN_SYSTEM.into(),
                user: trace_gen_user(&task.prompt, &task.ground_truth),
                temperature: 0.0,
                max_tokens: None,
                tag: "trace-gen".into(),
            })?;
            if let Some(steps) = parse_trace_candidate(&resp.text) {
                candidates.push(steps);
            }
        }
        let parsed = candidates.len() as u32;
        // Verify in ascending length (stable, so earlier samples win ties);
        // the first success is the shortest verified candidate.
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by_key(|&i| candidates[i].len());
        let mut kept: Option<&Vec<TraceStep>> = None;
        for i in order {
            let answer = replay_candidate(task, &candidates[i], backend, model_id)?;
            if evaluate(&answer, &task.ground_truth, task.metric)? >= 1.0 {
                kept = Some(&candidates[i]);
                break;
            }
        }
        outcomes.push(TraceOutcome {
            task_id: task.task_id.clone(),
            attempts: max_attempts,
            candidates_parsed: parsed,
            verified: kept.is_some(),
            kept_steps: kept.map(|s| s.len() as u32),
        });
        if let Some(steps) = kept {
            workflows.push(Workflow::from_steps(
                &task.task_id,
                steps
                    .iter()
                    .map(|s| (s.content.clone(), model_id.to_string()))
                    .collect(),
            )?);
        }
    }
    Ok((workflows, outcomes))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Token/call totals over a slice of ledger entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageTotals {
    pub fn from_usages(usages: &[Usage]) -> UsageTotals {
        UsageTotals {
            calls: usages.len(),
            prompt_tokens: usages.iter().map(|u| u.prompt_tokens).sum(),
            completion_tokens: usages.iter().map(|u| u.completion_tokens).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub episodes: u32,
    /// Mean over episodes of the episode's mean step reward.
    pub mean_reward: f64,
    pub mean_final_score: f64,
    pub policy_updates: u32,
    pub prompt_updates: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub tasks: usize,
    pub nodes: usize,
    /// Workflows corrupted by noise injection before construction.
    pub corrupted_workflows: usize,
    pub epochs: Vec<EpochReport>,
    pub usage: UsageTotals,
    /// Present when a price table was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| FlowError::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<TrainReport> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path.display(), e))?;
        let report: TrainReport = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(FlowError::ArtifactMismatch(format!(
                "report schema {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Per-task outcome of an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub metric: Metric,
    pub score: f64,
    pub final_answer: String,
    pub path: Vec<crate::network::NodeRef>,
}

/// Scores and accounting for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub per_task: Vec<TaskResult>,
    /// Mean of the per-task scores.
    pub aggregate: f64,
    pub usage: UsageTotals,
    pub warnings: Vec<String>,
}

impl EvalResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| FlowError::io(path.display(), e))
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

/// Build the network from the tasks' workflows, train the routing policy with
/// sampled episodes, refine node prompts once per epoch, and persist all
/// artifacts to `out_dir`. Fully deterministic for a scripted backend and
/// fixed seed. On mid-run failure the artifacts built so far are still
/// flushed before the error is returned.
pub fn train(
    config: &TrainConfig,
    tasks: &[TaskRecord],
    backend: &dyn ChatBackend,
    prices: Option<&PriceTable>,
    out_dir: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(FlowError::EmptyTaskList);
    }
    let workflows: Vec<Workflow> = tasks
        .iter()
        .map(|t| {
            t.workflow
                .clone()
                .ok_or_else(|| FlowError::MissingWorkflow(t.task_id.clone()))
        })
        .collect::<Result<_>>()?;

    let embedder = config.embedder();
    let mut cache = EmbeddingCache::new();
    let noisy = inject_noise(&workflows, config.noise_rate, config.seed)?;
    let corrupted = noisy.iter().filter(|w| !w.correct).count();
    let (mut network, _) = build_network(&noisy, config.delta, &embedder, &mut cache)?;
    network.profile_all(backend, &config.model_id)?;
    network.refresh_embeddings(&embedder, &mut cache)?;

    // Tasks as the trainer sees them: workflow = the (possibly corrupted)
    // one actually inserted, so filled steps match the recorded assignment.
    let train_tasks: Vec<TaskRecord> = tasks
        .iter()
        .zip(&noisy)
        .map(|(t, w)| TaskRecord {
            workflow: Some(w.clone()),
            ..t.clone()
        })
        .collect();

    let mut params = PolicyParams::init(config.seed);
    let mut opt = AdamState::new(config.lr);
    let mut baseline = Baseline::new(0.9);
    let mut store = PromptStore::new();
    store.seed(&network);

    std::fs::create_dir_all(out_dir).map_err(|e| FlowError::io(out_dir.display(), e))?;

    let mut epochs: Vec<EpochReport> = Vec::new();
    let loop_outcome = run_training_loop(
        config,
        &train_tasks,
        backend,
        &embedder,
        &mut cache,
        &mut network,
        &mut params,
        &mut opt,
        &mut baseline,
        &mut store,
        &mut epochs,
    );

    // Flush whatever exists, even when the loop failed part-way.
    network.save(&out_dir.join(NETWORK_FILE))?;
    Checkpoint::capture(&params, &opt, &baseline, config.gamma)
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    store.save(&out_dir.join(PROMPT_STORE_FILE))?;
    cache.save(&out_dir.join(CACHE_FILE))?;
    loop_outcome?;

    let usages = backend.ledger().snapshot();
    let report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        tasks: tasks.len(),
        nodes: network.node_count(),
        corrupted_workflows: corrupted,
        epochs,
        usage: UsageTotals::from_usages(&usages),
        cost: prices.map(|p| cost_report(&usages, p)).transpose()?,
    };
    report.save(&out_dir.join(REPORT_FILE))?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_training_loop(
    config: &TrainConfig,
    train_tasks: &[TaskRecord],
    backend: &dyn ChatBackend,
    embedder: &HashEmbedder,
    cache: &mut EmbeddingCache,
    network: &mut FlowNetwork,
    params: &mut PolicyParams,
    opt: &mut AdamState,
    baseline: &mut Baseline,
    store: &mut PromptStore,
    epochs: &mut Vec<EpochReport>,
) -> Result<()> {
    for epoch in 0..config.tg_episodes {
        let mut episode_rewards: Vec<f64> = Vec::new();
        let mut final_scores: Vec<f64> = Vec::new();
        let mut policy_updates = 0u32;
        let mut prompt_updates = 0u32;
        for (ti, task) in train_tasks.iter().enumerate() {
            let workflow = task.workflow.as_ref().expect("training task has workflow");
            let assignment = network.assignment_for(&task.task_id);
            let mut rng =
                ChaCha8Rng::seed_from_u64(derived_seed(config.seed, 1, epoch as u64, ti as u64));
            let mut trajectories: Vec<Trajectory> = Vec::new();
            for _ in 0..config.episodes_per_task {
                let mut ctx = RunContext {
                    backend,
                    embedder,
                    cache,
                    settings: config.settings(),
                };
                let (traj, _, _) = run_episode(
                    network,
                    params,
                    task,
                    workflow,
                    assignment.as_ref(),
                    config.alpha,
                    |answer| evaluate(answer, &task.ground_truth, task.metric),
                    &mut rng,
                    &mut ctx,
                )?;
                if !traj.steps.is_empty() {
                    episode_rewards.push(
                        traj.steps.iter().map(|s| s.reward).sum::<f64>() / traj.steps.len() as f64,
                    );
                }
                final_scores.push(traj.final_score);
                trajectories.push(traj);
            }
            reinforce_update(params, opt, baseline, &trajectories, config.gamma)?;
            policy_updates += 1;
            if config.tg_per_task {
                prompt_updates += run_tg(
                    config,
                    std::slice::from_ref(task),
                    derived_seed(config.seed, 2, epoch as u64, ti as u64),
                    backend,
                    embedder,
                    cache,
                    network,
                    params,
                    store,
                )?;
            }
        }
        if !config.tg_per_task {
            for (ci, chunk) in train_tasks.chunks(config.batch_size as usize).enumerate() {
                prompt_updates += run_tg(
                    config,
                    chunk,
                    derived_seed(config.seed, 2, epoch as u64, ci as u64),
                    backend,
                    embedder,
                    cache,
                    network,
                    params,
                    store,
                )?;
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        epochs.push(EpochReport {
            epoch,
            episodes: train_tasks.len() as u32 * config.episodes_per_task,
            mean_reward: mean(&episode_rewards),
            mean_final_score: mean(&final_scores),
            policy_updates,
            prompt_updates,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_tg(
    config: &TrainConfig,
    chunk: &[TaskRecord],
    seed: u64,
    backend: &dyn ChatBackend,
    embedder: &HashEmbedder,
    cache: &mut EmbeddingCache,
    network: &mut FlowNetwork,
    params: &PolicyParams,
    store: &mut PromptStore,
) -> Result<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = RunContext {
        backend,
        embedder,
        cache,
        settings: config.settings(),
    };
    let updates = batch_round(
        network,
        params,
        chunk,
        config.eta,
        config.alpha,
        store,
        |task, answer| evaluate(answer, &task.ground_truth, task.metric),
        &mut rng,
        &mut ctx,
    )?;
    Ok(updates.len() as u32)
}

// ---------------------------------------------------------------------------
// Inference driver
// ---------------------------------------------------------------------------

/// Load trained artifacts from `artifact_dir` and greedily route every task
/// through the network. Differences between the requested config and the one
/// stored with the artifacts are reported as warnings; the stored config
/// wins, since the artifacts embody it.
pub fn infer(
    artifact_dir: &Path,
    tasks: &[TaskRecord],
    backend: &dyn ChatBackend,
    requested: &TrainConfig,
) -> Result<(EvalResult, Vec<InferenceResult>)> {
    if tasks.is_empty() {
        return Err(FlowError::EmptyTaskList);
    }
    let report = TrainReport::load(&artifact_dir.join(REPORT_FILE))?;
    let stored = report.config;
    let mut warnings = Vec::new();
    if requested.hash() != stored.hash() {
        for (field, req, art) in [
            (
                "delta",
                requested.delta.to_string(),
                stored.delta.to_string(),
            ),
            (
                "skip_k",
                requested.skip_k.to_string(),
                stored.skip_k.to_string(),
            ),
            (
                "max_step",
                requested.max_step.to_string(),
                stored.max_step.to_string(),
            ),
            (
                "embed_dim",
                requested.embed_dim.to_string(),
                stored.embed_dim.to_string(),
            ),
            ("seed", requested.seed.to_string(), stored.seed.to_string()),
            (
                "model_id",
                requested.model_id.clone(),
                stored.model_id.clone(),
            ),
        ] {
            if req != art {
                warnings.push(format!(
                    "requested {field}={req} differs from artifact {field}={art}; \
                     proceeding with the artifact's value"
                ));
            }
        }
        if warnings.is_empty() {
            warnings.push(
                "requested config differs from the artifact's training config; \
                 proceeding with the artifact's values"
                    .into(),
            );
        }
    }

    let embedder = stored.embedder();
    let cache_path = artifact_dir.join(CACHE_FILE);
    let mut cache = if cache_path.exists() {
        EmbeddingCache::load(&cache_path)?
    } else {
        EmbeddingCache::new()
    };
    let network = FlowNetwork::load(&artifact_dir.join(NETWORK_FILE), &embedder, &mut cache)?;
    let checkpoint = Checkpoint::load(&artifact_dir.join(CHECKPOINT_FILE))?;
    let (params, _, _, _) = checkpoint.restore()?;

    let before = backend.ledger().snapshot().len();
    let mut per_task = Vec::new();
    let mut transcripts = Vec::new();
    for task in tasks {
        let mut ctx = RunContext {
            backend,
            embedder: &embedder,
            cache: &mut cache,
            settings: stored.settings(),
        };
        let outcome = run_inference(&network, &params, task, &mut ctx)?;
        let score = evaluate(&outcome.final_answer, &task.ground_truth, task.metric)?;
        per_task.push(TaskResult {
            task_id: task.task_id.clone(),
            metric: task.metric,
            score,
            final_answer: outcome.final_answer.clone(),
            path: outcome.path.clone(),
        });
        transcripts.push(outcome);
    }
    let usages = backend.ledger().snapshot();
    let aggregate = per_task.iter().map(|t| t.score).sum::<f64>() / per_task.len() as f64;
    Ok((
        EvalResult {
            schema_version: REPORT_SCHEMA_VERSION,
            per_task,
            aggregate,
            usage: UsageTotals::from_usages(&usages[before..]),
            warnings,
        },
        transcripts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::network::NodeRef;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        path
    }

    #[test]
    fn tasks_load_and_reject_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            "tasks.jsonl",
            &[
                r#"{"task_id":"t1","prompt":"add 1 and 2","ground_truth":"3","metric":"numeric","workflow":[{"text":"add the numbers","model_id":"m1"}]}"#,
                "",
                r#"{"task_id":"t2","prompt":"name the capital","ground_truth":"Paris","metric":"exact"}"#,
            ],
        );
        let tasks = load_tasks(&path).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].workflow.as_ref().unwrap().operations.len(), 1);
        assert!(tasks[1].workflow.is_none());

        let bad = write_lines(
            dir.path(),
            "bad.jsonl",
            &[
                r#"{"task_id":"t1","prompt":"p","ground_truth":"g","metric":"exact"}"#,
                "{nope",
            ],
        );
        assert!(matches!(
            load_tasks(&bad),
            Err(FlowError::TaskParse { line: 2, .. })
        ));

        let dup = write_lines(
            dir.path(),
            "dup.jsonl",
            &[
                r#"{"task_id":"t1","prompt":"p","ground_truth":"g","metric":"exact"}"#,
                r#"{"task_id":"t1","prompt":"q","ground_truth":"h","metric":"exact"}"#,
            ],
        );
        assert!(matches!(load_tasks(&dup), Err(FlowError::DuplicateTaskId(id)) if id == "t1"));
    }

    #[test]
    fn tasks_roundtrip_through_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.jsonl");
        let tasks = vec![
            TaskRecord {
                task_id: "t1".into(),
                prompt: "add 1 and 2".into(),
                ground_truth: "3".into(),
                metric: Metric::Numeric,
                workflow: Some(
                    Workflow::from_steps("t1", vec![("add the numbers".into(), "m1".into())])
                        .unwrap(),
                ),
            },
            TaskRecord {
                task_id: "t2".into(),
                prompt: "name the capital".into(),
                ground_truth: "Paris".into(),
                metric: Metric::Exact,
                workflow: None,
            },
        ];
        save_tasks(&path, &tasks).unwrap();
        let loaded = load_tasks(&path).unwrap();
        assert_eq!(loaded, tasks);
    }

    #[test]
    fn evaluators_match_their_rules() {
        assert_eq!(evaluate("4", " 4 ", Metric::Exact).unwrap(), 1.0);
        assert_eq!(
            evaluate("The  Answer", "the answer", Metric::Exact).unwrap(),
            1.0
        );
        assert_eq!(evaluate("4", "5", Metric::Exact).unwrap(), 0.0);

        assert_eq!(
            evaluate("answer is 2.0000001", "2", Metric::Numeric).unwrap(),
            1.0
        );
        assert_eq!(evaluate("got 3", "2", Metric::Numeric).unwrap(), 0.0);
        assert_eq!(
            evaluate("x = -1.5e2", "-150", Metric::Numeric).unwrap(),
            1.0
        );
        assert_eq!(
            evaluate("no digits here", "2", Metric::Numeric).unwrap(),
            0.0
        );
        assert!(matches!(
            evaluate("2", "no digits here", Metric::Numeric),
            Err(FlowError::UnparsableNumber(_))
        ));
        // Relative tolerance scales with the magnitude of the truth.
        assert_eq!(
            evaluate("1000000.5", "1000000", Metric::Numeric).unwrap(),
            1.0
        );

        assert_eq!(evaluate("a b", "b c", Metric::TokenF1).unwrap(), 0.5);
        assert_eq!(evaluate("", "", Metric::TokenF1).unwrap(), 1.0);
        assert_eq!(evaluate("a", "", Metric::TokenF1).unwrap(), 0.0);
        let f1 = evaluate("a a b", "a b b", Metric::TokenF1).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validates_and_hashes_stably() {
        let config = TrainConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), config.hash());
        let mut other = config.clone();
        other.delta = 0.8;
        assert_ne!(config.hash(), other.hash());

        for bad in [
            TrainConfig {
                delta: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                alpha: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                gamma: 2.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                skip_k: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                eta: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                noise_rate: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should fail validation");
        }
    }

    fn trace_candidate(n: usize) -> String {
        (1..=n)
            .map(|i| {
                format!(
                    "({i})Content: compute | work out part {i} of the sum.\n\
                     Role Description: calculator | does arithmetic.(/{i})"
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn traces_keep_shortest_verified_candidate() {
        let task = TaskRecord {
            task_id: "t1".into(),
            prompt: "add 2 and 3".into(),
            ground_truth: "5".into(),
            metric: Metric::Numeric,
            workflow: None,
        };
        // Two generation attempts (3 steps, then 2), then replay of the
        // 2-step candidate succeeds: outputs "partial", then "5".
        let backend = ScriptedBackend::fifo([
            trace_candidate(3),
            trace_candidate(2),
            "partial".into(),
            "5".into(),
        ]);
        let (workflows, outcomes) = generate_traces(&[task], &backend, "m1", 2).unwrap();
        assert_eq!(workflows.len(), 1);
        assert_eq!(workflows[0].operations.len(), 2);
        assert!(workflows[0].operations[0].text.contains('|'));
        assert_eq!(outcomes[0].kept_steps, Some(2));
        assert!(outcomes[0].verified);
        assert_eq!(outcomes[0].candidates_parsed, 2);
        // Replay calls used the role-derived system prompt.
        let reqs = backend.requests();
        assert!(reqs[2].system.starts_with("Target: You are a calculator."));
    }

    #[test]
    fn traces_discard_malformed_and_report_unverified() {
        let task = TaskRecord {
            task_id: "t1".into(),
            prompt: "add 2 and 3".into(),
            ground_truth: "5".into(),
            metric: Metric::Numeric,
            workflow: None,
        };
        // First attempt malformed (missing separator), second parses but its
        // replay answers wrong.
        let backend = ScriptedBackend::fifo([
            "(1)Content: no separator here. Role Description: x.(/1)".to_string(),
            trace_candidate(1),
            "17".into(),
        ]);
        let (workflows, outcomes) = generate_traces(&[task], &backend, "m1", 2).unwrap();
        assert!(workflows.is_empty());
        assert_eq!(outcomes[0].candidates_parsed, 1);
        assert!(!outcomes[0].verified);
        assert_eq!(outcomes[0].kept_steps, None);
    }

    fn toy_tasks() -> Vec<TaskRecord> {
        let mk = |id: &str, prompt: &str, gt: &str, step: &str| TaskRecord {
            task_id: id.into(),
            prompt: prompt.into(),
            ground_truth: gt.into(),
            metric: Metric::Exact,
            workflow: Some(
                Workflow::from_steps(id, vec![(step.into(), "default".into())]).unwrap(),
            ),
        };
        vec![
            mk("t1", "add 2 and 3", "5", "add the two numbers together"),
            mk(
                "t2",
                "multiply 3 and 4",
                "12",
                "multiply the two numbers together",
            ),
        ]
    }

    /// Keyed script covering every call the trainer makes. Specific keys
    /// first: planner (GIVEN_TASK contains "TASK:"), critique and optimizer
    /// calls quote node prompts, and node executions match per-task rules.
    fn toy_script() -> ScriptedBackend {
        ScriptedBackend::keyed([
            ("You derive a concise role description", "arithmetic worker"),
            ("Evaluate the final response", "re-check the arithmetic"),
            ("OBJECTIVE_FUNCTION", ""),
            (
                "FOCUS",
                "<IMPROVED_SYSTEM_PROMPT> Target: solve it cleanly. </IMPROVED_SYSTEM_PROMPT>\
                 <IMPROVED_ROLE_DESCRIPTION> arithmetic worker </IMPROVED_ROLE_DESCRIPTION>",
            ),
            (
                "GIVEN_TASK: add 2 and 3",
                "(1) add the two numbers together (/1)",
            ),
            (
                "GIVEN_TASK: multiply 3 and 4",
                "(1) multiply the two numbers together (/1)",
            ),
            ("TASK: add 2 and 3", "5"),
            ("TASK: multiply 3 and 4", "12"),
        ])
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            episodes_per_task: 3,
            tg_episodes: 2,
            embed_dim: 32,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_produces_artifacts_and_is_deterministic() {
        let tasks = toy_tasks();
        let config = toy_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let report_a = train(&config, &tasks, &toy_script(), None, dir_a.path()).unwrap();
        let report_b = train(&config, &tasks, &toy_script(), None, dir_b.path()).unwrap();

        for name in [
            NETWORK_FILE,
            CHECKPOINT_FILE,
            PROMPT_STORE_FILE,
            CACHE_FILE,
            REPORT_FILE,
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between identical runs");
        }
        assert_eq!(report_a, report_b);
        assert_eq!(report_a.epochs.len(), 2);
        assert_eq!(report_a.epochs[0].episodes, 6);
        assert!(report_a.epochs[0].mean_final_score > 0.99);
        assert_eq!(report_a.corrupted_workflows, 0);
        assert_eq!(report_a.config_hash, config.hash());
        assert!(report_a.usage.calls > 0);
        assert!(report_a.cost.is_none());
    }

    #[test]
    fn infer_scores_perfectly_on_oracle_scripts_and_warns_on_config_drift() {
        let tasks = toy_tasks();
        let config = toy_config();
        let dir = tempfile::tempdir().unwrap();
        train(&config, &tasks, &toy_script(), None, dir.path()).unwrap();

        let (result, transcripts) = infer(dir.path(), &tasks, &toy_script(), &config).unwrap();
        assert_eq!(result.aggregate, 1.0);
        assert!(result.warnings.is_empty());
        assert_eq!(result.per_task.len(), 2);
        assert_eq!(result.per_task[0].final_answer, "5");
        assert_eq!(transcripts.len(), 2);
        assert_eq!(result.per_task[0].path.first(), Some(&NodeRef::Source));
        assert_eq!(result.per_task[0].path.last(), Some(&NodeRef::Sink));
        let check =
            result.per_task.iter().map(|t| t.score).sum::<f64>() / result.per_task.len() as f64;
        assert!((result.aggregate - check).abs() < 1e-12);

        // Requesting a different delta warns and proceeds with the artifact's.
        let requested = TrainConfig {
            delta: 0.9,
            ..config.clone()
        };
        let (result, _) = infer(dir.path(), &tasks, &toy_script(), &requested).unwrap();
        assert_eq!(result.aggregate, 1.0);
        assert!(result.warnings.iter().any(|w| w.contains("delta")));

        assert!(matches!(
            infer(dir.path(), &[], &toy_script(), &config),
            Err(FlowError::EmptyTaskList)
        ));
    }

    #[test]
    fn train_reports_noise_injection_and_costs() {
        let mut tasks = toy_tasks();
        tasks.extend(vec![
            TaskRecord {
                task_id: "t3".into(),
                prompt: "add 2 and 3".into(),
                ground_truth: "5".into(),
                metric: Metric::Exact,
                workflow: Some(
                    Workflow::from_steps(
                        "t3",
                        vec![
                            ("add the two numbers together".into(), "default".into()),
                            ("state the sum plainly".into(), "default".into()),
                        ],
                    )
                    .unwrap(),
                ),
            },
            TaskRecord {
                task_id: "t4".into(),
                prompt: "multiply 3 and 4".into(),
                ground_truth: "12".into(),
                metric: Metric::Exact,
                workflow: Some(
                    Workflow::from_steps(
                        "t4",
                        vec![
                            ("multiply the two numbers together".into(), "default".into()),
                            ("state the product plainly".into(), "default".into()),
                        ],
                    )
                    .unwrap(),
                ),
            },
        ]);
        let config = TrainConfig {
            noise_rate: 0.5,
            episodes_per_task: 2,
            tg_episodes: 1,
            embed_dim: 32,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut prices = PriceTable::default();
        prices.insert(
            "default",
            crate::backend::PriceEntry::per_mtok_dollars(0.15, 0.6),
        );
        prices.insert(
            "optimizer",
            crate::backend::PriceEntry::per_mtok_dollars(0.15, 0.6),
        );
        let dir = tempfile::tempdir().unwrap();
        let backend = toy_script();
        let report = train(&config, &tasks, &backend, Some(&prices), dir.path()).unwrap();
        assert_eq!(
            report.corrupted_workflows, 2,
            "floor(0.5 * 4) workflows corrupted"
        );
        let cost = report.cost.expect("price table supplied");
        let oracle = cost_report(&backend.ledger().snapshot(), &prices).unwrap();
        assert_eq!(
            cost.total_cost().picodollars(),
            oracle.total_cost().picodollars()
        );
    }

    #[test]
    fn train_rejects_missing_workflows_and_empty_sets() {
        let config = toy_config();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&config, &[], &toy_script(), None, dir.path()),
            Err(FlowError::EmptyTaskList)
        ));
        let mut tasks = toy_tasks();
        tasks[1].workflow = None;
        assert!(matches!(
            train(&config, &tasks, &toy_script(), None, dir.path()),
            Err(FlowError::MissingWorkflow(id)) if id == "t2"
        ));
    }
}
