//! `flownet` — build agent networks from task workflows, train the routing
//! policy and node prompts, and run or score inference over the artifacts.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 backend error,
//! 4 artifact mismatch.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flownet_core::backend::{
    cost_report, ChatBackend, HttpBackend, HttpBackendConfig, PriceTable, Script, ScriptedBackend,
    UsageLedger,
};
use flownet_core::harness::{
    self, EvalResult, TaskResult, TrainConfig, UsageTotals, REPORT_SCHEMA_VERSION,
};
use flownet_core::network::{build_network, inject_noise};
use flownet_core::{
    evaluate, generate_traces, infer, load_tasks, save_tasks, train, EmbeddingCache, FlowError,
    HashEmbedder, TaskRecord,
};
use serde::Deserialize;

/// Ledger export written next to the other artifacts, consumable by
/// `report-costs`.
const USAGE_FILE: &str = "usage.jsonl";

#[derive(Parser)]
#[command(
    name = "flownet",
    version,
    about = "Agent flow networks: construction, routing policy training, and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the agent network from tasks that already carry workflows
    BuildNetwork(BuildNetworkArgs),
    /// Generate candidate workflows per task, verify them step-wise, and
    /// keep the shortest verified one
    GenerateTraces(GenerateTracesArgs),
    /// Train the routing policy and node prompts, writing all artifacts
    Train(TrainArgs),
    /// Route tasks through trained artifacts and score the final answers
    Infer(InferArgs),
    /// Score a predictions file against task ground truths
    Eval(EvalArgs),
    /// Summarize spend for an exported usage ledger under a price table
    ReportCosts(ReportCostsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Chat-completions HTTP endpoint
    Live,
    /// Deterministic replay from a script file
    Scripted,
}

#[derive(Args)]
struct BackendArgs {
    /// Which chat backend to use
    #[arg(long, value_enum, default_value_t = BackendKind::Live)]
    backend: BackendKind,
    /// Script file for `--backend scripted` (JSON, fifo or keyed mode)
    #[arg(long)]
    script: Option<PathBuf>,
    /// Base URL of the chat-completions API, up to the version segment
    #[arg(long, default_value = "http://localhost:8000/v1")]
    base_url: String,
    /// Environment variable holding the API key for the live backend
    #[arg(long, default_value = "FLOWNET_API_KEY")]
    api_key_env: String,
    /// Per-request timeout for the live backend, in seconds
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

impl BackendArgs {
    fn build(&self) -> Result<Box<dyn ChatBackend>> {
        match self.backend {
            BackendKind::Scripted => {
                let path = self.script.as_ref().ok_or_else(|| {
                    FlowError::InvalidConfig("--backend scripted requires --script <file>".into())
                })?;
                let script = Script::load(path)?;
                Ok(Box::new(ScriptedBackend::new(script)))
            }
            BackendKind::Live => {
                let api_key = std::env::var(&self.api_key_env).unwrap_or_default();
                let backend = HttpBackend::new(HttpBackendConfig {
                    base_url: self.base_url.clone(),
                    api_key,
                    timeout: Duration::from_secs(self.timeout_secs),
                    ..HttpBackendConfig::default()
                })?;
                Ok(Box::new(backend))
            }
        }
    }
}

/// Pipeline knobs. Start from `--config <json>` (or built-in defaults) and
/// override per flag.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file holding a full config; the flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Similarity threshold for merging operations into one node
    #[arg(long)]
    delta: Option<f64>,
    /// Maximum hop distance per routing action
    #[arg(long)]
    skip_k: Option<u32>,
    /// Reward blend between per-step routing match and final score
    #[arg(long)]
    alpha: Option<f64>,
    /// Return discount factor
    #[arg(long)]
    gamma: Option<f64>,
    /// Adam step size for policy updates
    #[arg(long)]
    lr: Option<f64>,
    /// Sampled episodes per task per epoch
    #[arg(long)]
    episodes_per_task: Option<u32>,
    /// Training epochs; prompt optimization runs on this schedule
    #[arg(long)]
    tg_episodes: Option<u32>,
    /// Tasks per prompt-optimization batch
    #[arg(long)]
    batch_size: Option<u32>,
    /// Sentence budget per prompt update
    #[arg(long)]
    eta: Option<u32>,
    /// Upper bound on planner steps
    #[arg(long)]
    max_step: Option<u32>,
    /// Seed for every random choice in the pipeline
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of training workflows to corrupt before construction
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Dimension of the offline hash embedder
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Model for planning and node profiling
    #[arg(long)]
    model_id: Option<String>,
    /// Run prompt optimization after every task instead of once per epoch
    #[arg(long)]
    tg_per_task: bool,
    /// Let walks extend an exhausted plan instead of forcing a path to sink
    #[arg(long)]
    replan: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| {
                    FlowError::InvalidConfig(format!("config {}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { config.$field = v.clone(); })*
            };
        }
        apply!(
            delta,
            skip_k,
            alpha,
            gamma,
            lr,
            episodes_per_task,
            tg_episodes,
            batch_size,
            eta,
            max_step,
            seed,
            noise_rate,
            embed_dim,
            model_id
        );
        config.tg_per_task |= self.tg_per_task;
        config.replan |= self.replan;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct BuildNetworkArgs {
    /// Task file (JSONL); every task must include a workflow
    #[arg(long)]
    tasks: PathBuf,
    /// Output directory for the network and embedding cache
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct GenerateTracesArgs {
    /// Task file (JSONL) without workflows
    #[arg(long)]
    tasks: PathBuf,
    /// Output task file with verified workflows attached
    #[arg(long)]
    out: PathBuf,
    /// Candidate workflows sampled per task
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    /// Model used for generation and verification
    #[arg(long, default_value = "default")]
    model_id: String,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Task file (JSONL); every task must include a workflow
    #[arg(long)]
    tasks: PathBuf,
    /// Output directory for all artifacts
    #[arg(long)]
    out: PathBuf,
    /// Price table JSON; adds cost accounting to the training report
    #[arg(long)]
    price_table: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Directory holding training artifacts
    #[arg(long)]
    artifacts: PathBuf,
    /// Task file (JSONL) to route and score
    #[arg(long)]
    tasks: PathBuf,
    /// Where to write the evaluation JSON (default: <artifacts>/eval.json)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Task file (JSONL) with ground truths and metrics
    #[arg(long)]
    tasks: PathBuf,
    /// JSONL of {task_id, prediction} to score
    #[arg(long)]
    predictions: PathBuf,
    /// Optional output JSON path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCostsArgs {
    /// Usage ledger JSONL, as exported by train/infer
    #[arg(long)]
    ledger: PathBuf,
    /// Price table JSON: {"models": {"<id>": {"prompt_micro_per_mtok": ..,
    /// "completion_micro_per_mtok": ..}}}
    #[arg(long)]
    price_table: PathBuf,
    /// Optional output JSON path
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildNetwork(args) => run_build_network(args),
        Command::GenerateTraces(args) => run_generate_traces(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::ReportCosts(args) => run_report_costs(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(flow) = cause.downcast_ref::<FlowError>() {
            return flow_exit_code(flow);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn flow_exit_code(err: &FlowError) -> u8 {
    use FlowError::*;
    match err {
        // The model side failed or misbehaved.
        Auth(_)
        | RateLimited { .. }
        | Timeout { .. }
        | Http(_)
        | MalformedResponse(_)
        | ScriptExhausted { .. }
        | KeyMiss { .. }
        | EmptyOutput(_)
        | MalformedPlan(_)
        | MalformedOptimizerOutput(_) => 3,
        // Stored artifacts don't match what was requested or expected.
        ArtifactMismatch(_) | MalformedCheckpoint(_) | MalformedEmbedding(_) => 4,
        // Bad input: flags, config files, task files, price tables.
        InvalidConfig(_)
        | InvalidDelta(_)
        | GammaOutOfRange(_)
        | InvalidNoiseRate(_)
        | InvalidSentenceBudget(_)
        | TaskParse { .. }
        | DuplicateTaskId(_)
        | EmptyTaskList
        | UnknownMetric(_)
        | UnparsableNumber(_)
        | MissingWorkflow(_)
        | MissingGroundTruth
        | EmptyWorkflow(_)
        | NonConsecutiveSteps { .. }
        | EmptyOperationText { .. }
        | UnknownStep { .. }
        | EmptyText
        | UnpricedModel(_)
        | Io { .. }
        | Json(_) => 2,
        _ => 1,
    }
}

fn run_build_network(args: BuildNetworkArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let tasks = load_tasks(&args.tasks)?;
    let workflows = tasks
        .iter()
        .map(|t| {
            t.workflow
                .clone()
                .ok_or_else(|| FlowError::MissingWorkflow(t.task_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let backend = args.backend.build()?;
    let embedder = HashEmbedder::new(config.embed_dim, config.seed);
    let mut cache = EmbeddingCache::new();
    let noisy = inject_noise(&workflows, config.noise_rate, config.seed)?;
    let (mut network, _) = build_network(&noisy, config.delta, &embedder, &mut cache)?;
    network.profile_all(backend.as_ref(), &config.model_id)?;
    network.refresh_embeddings(&embedder, &mut cache)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    network.save(&args.out.join(harness::NETWORK_FILE))?;
    cache.save(&args.out.join(harness::CACHE_FILE))?;
    backend.ledger().export(&args.out.join(USAGE_FILE))?;
    println!(
        "built network from {} workflows: {} nodes, {} edges -> {}",
        noisy.len(),
        network.node_count(),
        network.edge_count(),
        args.out.display()
    );
    Ok(())
}

fn run_generate_traces(args: GenerateTracesArgs) -> Result<()> {
    let tasks = load_tasks(&args.tasks)?;
    let backend = args.backend.build()?;
    let (workflows, outcomes) =
        generate_traces(&tasks, backend.as_ref(), &args.model_id, args.max_attempts)?;
    let by_id: BTreeMap<&str, _> = workflows.iter().map(|w| (w.task_id.as_str(), w)).collect();
    let kept: Vec<TaskRecord> = tasks
        .iter()
        .filter_map(|t| {
            by_id.get(t.task_id.as_str()).map(|w| TaskRecord {
                workflow: Some((*w).clone()),
                ..t.clone()
            })
        })
        .collect();
    save_tasks(&args.out, &kept)?;
    for outcome in &outcomes {
        match outcome.kept_steps {
            Some(steps) => println!(
                "{}: verified, kept {steps} steps ({} of {} candidates parsed)",
                outcome.task_id, outcome.candidates_parsed, outcome.attempts
            ),
            None => println!(
                "{}: no verified candidate ({} of {} parsed), skipped",
                outcome.task_id, outcome.candidates_parsed, outcome.attempts
            ),
        }
    }
    println!(
        "kept {}/{} tasks -> {}",
        kept.len(),
        tasks.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let tasks = load_tasks(&args.tasks)?;
    let backend = args.backend.build()?;
    let prices = args
        .price_table
        .as_deref()
        .map(PriceTable::load)
        .transpose()?;
    let report = train(
        &config,
        &tasks,
        backend.as_ref(),
        prices.as_ref(),
        &args.out,
    );
    // Keep the ledger even when training fails part-way; partial artifacts
    // are already flushed by the trainer. Failures before the output
    // directory exists have nothing to flush.
    if args.out.is_dir() {
        backend.ledger().export(&args.out.join(USAGE_FILE))?;
    }
    let report = report?;
    println!(
        "trained {} epochs over {} tasks: {} nodes, {} corrupted workflows",
        report.epochs.len(),
        report.tasks,
        report.nodes,
        report.corrupted_workflows
    );
    for epoch in &report.epochs {
        println!(
            "epoch {}: {} episodes, mean reward {:.4}, mean final score {:.4}, {} prompt updates",
            epoch.epoch,
            epoch.episodes,
            epoch.mean_reward,
            epoch.mean_final_score,
            epoch.prompt_updates
        );
    }
    println!(
        "backend usage: {} calls, {} prompt + {} completion tokens",
        report.usage.calls, report.usage.prompt_tokens, report.usage.completion_tokens
    );
    if let Some(cost) = &report.cost {
        println!(
            "spend: {} micro-dollars (${:.6})",
            cost.total_cost().microdollars(),
            cost.total_cost().dollars()
        );
    }
    println!("artifacts -> {}", args.out.display());
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let requested = args.config.resolve()?;
    let tasks = load_tasks(&args.tasks)?;
    let backend = args.backend.build()?;
    let (result, _) = infer(&args.artifacts, &tasks, backend.as_ref(), &requested)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    let out = args.out.unwrap_or_else(|| args.artifacts.join("eval.json"));
    result.save(&out)?;
    backend.ledger().export(&args.artifacts.join(USAGE_FILE))?;
    for task in &result.per_task {
        println!("{}: {:.3}", task.task_id, task.score);
    }
    println!(
        "aggregate {:.4} over {} tasks -> {}",
        result.aggregate,
        result.per_task.len(),
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct PredictionLine {
    task_id: String,
    prediction: String,
}

fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening predictions {}", path.display()))?;
    let mut predictions = BTreeMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading predictions {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|e| FlowError::TaskParse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if predictions
            .insert(parsed.task_id.clone(), parsed.prediction)
            .is_some()
        {
            return Err(FlowError::DuplicateTaskId(parsed.task_id).into());
        }
    }
    Ok(predictions)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let tasks = load_tasks(&args.tasks)?;
    if tasks.is_empty() {
        return Err(FlowError::EmptyTaskList.into());
    }
    let predictions = load_predictions(&args.predictions)?;
    let mut warnings = Vec::new();
    for task_id in predictions.keys() {
        if !tasks.iter().any(|t| &t.task_id == task_id) {
            warnings.push(format!("prediction for unknown task {task_id} ignored"));
        }
    }
    let mut per_task = Vec::new();
    for task in &tasks {
        let prediction = predictions.get(&task.task_id).ok_or_else(|| {
            FlowError::InvalidConfig(format!("no prediction for task {}", task.task_id))
        })?;
        let score = evaluate(prediction, &task.ground_truth, task.metric)?;
        per_task.push(TaskResult {
            task_id: task.task_id.clone(),
            metric: task.metric,
            score,
            final_answer: prediction.clone(),
            path: Vec::new(),
        });
    }
    let aggregate = per_task.iter().map(|t| t.score).sum::<f64>() / per_task.len() as f64;
    let result = EvalResult {
        schema_version: REPORT_SCHEMA_VERSION,
        per_task,
        aggregate,
        usage: UsageTotals::default(),
        warnings,
    };
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    for task in &result.per_task {
        println!("{}: {:.3}", task.task_id, task.score);
    }
    println!(
        "aggregate {:.4} over {} tasks",
        result.aggregate,
        result.per_task.len()
    );
    if let Some(out) = &args.out {
        result.save(out)?;
        println!("written -> {}", out.display());
    }
    Ok(())
}

fn run_report_costs(args: ReportCostsArgs) -> Result<()> {
    let usages = UsageLedger::import(&args.ledger)?;
    let prices = PriceTable::load(&args.price_table)?;
    let report = cost_report(&usages, &prices)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    println!(
        "total: {} micro-dollars (${:.6}) over {} calls",
        report.total_cost().microdollars(),
        report.total_cost().dollars(),
        report.total_calls
    );
    Ok(())
}
