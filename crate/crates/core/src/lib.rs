//! Core engine: builds an agent flow network from example workflows, learns a
//! routing policy over it with policy gradients, executes tasks by walking the
//! network through an LLM backend, and refines node prompts from textual
//! feedback.

pub mod backend;
pub mod embedding;
pub mod error;
pub mod executor;
pub mod harness;
pub mod network;
pub mod policy;
pub mod textgrad;
pub mod workflow;

pub use backend::{ChatBackend, ChatRequest, ChatResponse, PriceTable, Usage, UsageLedger};
pub use embedding::{Embedder, Embedding, EmbeddingCache, HashEmbedder};
pub use error::{FlowError, Result};
pub use executor::{run_episode, run_inference, InferenceResult, Plan, RunContext, RunSettings};
pub use harness::{
    evaluate, generate_traces, infer, load_tasks, save_tasks, train, EvalResult, TrainConfig,
    TrainReport,
};
pub use network::{build_network, inject_noise, AgentNode, FlowNetwork, NodeId, NodeRef};
pub use policy::{PolicyParams, StateFeatures, Trajectory};
pub use textgrad::{batch_round, FeedbackRecord, PromptStore, PromptUpdate, Theta};
pub use workflow::{GroundTruthAssignment, Metric, Operation, TaskRecord, Workflow};
