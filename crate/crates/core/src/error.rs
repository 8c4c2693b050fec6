//! Crate-wide error type.
//!
//! One flat enum keeps matching on failure modes cheap at the harness/CLI
//! layer, where errors map onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    // ---- workflow / task ingestion ----
    #[error("workflow for task `{0}` has no operations")]
    EmptyWorkflow(String),
    #[error("workflow for task `{task_id}` has non-consecutive step indices (expected {expected}, got {got})")]
    NonConsecutiveSteps {
        task_id: String,
        expected: u32,
        got: u32,
    },
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("operation text is empty (task `{task_id}`, step {step_index})")]
    EmptyOperationText { task_id: String, step_index: u32 },
    #[error("no recorded node for task `{task_id}` step {step_index}")]
    UnknownStep { task_id: String, step_index: u32 },

    // ---- embedding ----
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding backend returned a malformed vector: {0}")]
    MalformedEmbedding(String),

    // ---- network ----
    #[error("delta must lie in [0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("cannot build a network from an empty workflow set")]
    EmptyNetwork,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` has no members to profile")]
    EmptyNode(String),
    #[error("noise rate must lie in [0, 1], got {0}")]
    InvalidNoiseRate(f64),

    // ---- policy ----
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("non-finite score encountered: {0}")]
    NonFiniteScore(String),
    #[error("non-finite gradient encountered: {0}")]
    NonFiniteGradient(String),
    #[error("discount factor must lie in [0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("action index {index} out of range for {candidates} candidates")]
    ActionOutOfRange { index: usize, candidates: usize },
    #[error("policy checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),

    // ---- executor ----
    #[error("malformed plan: {0}")]
    MalformedPlan(String),
    #[error("no path from `{0}` to the sink")]
    NoPathToSink(String),
    #[error("backend returned an empty output for node `{0}`")]
    EmptyOutput(String),
    #[error("already at the sink; no further actions")]
    SinkReached,
    #[error("operation requires training mode: {0}")]
    NotTrainingMode(&'static str),

    // ---- textual optimizer ----
    #[error("optimizer output is malformed: {0}")]
    MalformedOptimizerOutput(String),
    #[error("ground truth is required for global feedback")]
    MissingGroundTruth,
    #[error("sentence budget must be at least 1, got {0}")]
    InvalidSentenceBudget(u32),

    // ---- backend ----
    #[error("authentication rejected by backend (status {0})")]
    Auth(u16),
    #[error("rate limited by backend after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("backend request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("backend request failed: {0}")]
    Http(String),
    #[error("backend response is malformed: {0}")]
    MalformedResponse(String),
    #[error("scripted backend exhausted after {served} responses")]
    ScriptExhausted { served: usize },
    #[error("no scripted response matches the request (tag `{tag}`)")]
    KeyMiss { tag: String },
    #[error("no price listed for model `{0}`")]
    UnpricedModel(String),

    // ---- harness ----
    #[error("task file parse error at line {line}: {reason}")]
    TaskParse { line: usize, reason: String },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("no number found in `{0}`")]
    UnparsableNumber(String),
    #[error("empty task list")]
    EmptyTaskList,
    #[error("task `{0}` has no workflow; run trace generation first")]
    MissingWorkflow(String),
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // ---- plumbing ----
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl std::fmt::Display, source: std::io::Error) -> Self {
        FlowError::Io {
            path: path.to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
