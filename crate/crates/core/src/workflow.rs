//! Task and workflow records: the raw material the network is built from.
//!
//! A workflow is an ordered list of operations (sub-task texts, each tagged
//! with the model that should execute it). Construction consumes workflows;
//! training replays them as ground truth for routing rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::network::NodeId;

/// One step of a workflow: the sub-task text plus the model expected to run it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    /// 1-based position within the workflow.
    pub step_index: u32,
    pub text: String,
    pub model_id: String,
}

/// An ordered operation list for a single task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workflow {
    pub task_id: String,
    pub operations: Vec<Operation>,
    /// False once the workflow has been deliberately corrupted (noise
    /// injection). Corrupted workflows still participate in construction.
    #[serde(default = "default_true")]
    pub correct: bool,
}

fn default_true() -> bool {
    true
}

impl Workflow {
    /// Build a workflow from raw `(text, model_id)` steps, assigning
    /// consecutive step indices starting at 1.
    pub fn from_steps(
        task_id: impl Into<String>,
        steps: Vec<(String, String)>,
    ) -> Result<Workflow> {
        let task_id = task_id.into();
        let operations = steps
            .into_iter()
            .enumerate()
            .map(|(i, (text, model_id))| Operation {
                step_index: i as u32 + 1,
                text,
                model_id,
            })
            .collect();
        let wf = Workflow {
            task_id,
            operations,
            correct: true,
        };
        wf.validate()?;
        Ok(wf)
    }

    /// Check the structural invariants: at least one operation, step indices
    /// consecutive from 1, no empty operation text.
    pub fn validate(&self) -> Result<()> {
        if self.operations.is_empty() {
            return Err(FlowError::EmptyWorkflow(self.task_id.clone()));
        }
        for (i, op) in self.operations.iter().enumerate() {
            let expected = i as u32 + 1;
            if op.step_index != expected {
                return Err(FlowError::NonConsecutiveSteps {
                    task_id: self.task_id.clone(),
                    expected,
                    got: op.step_index,
                });
            }
            if op.text.trim().is_empty() {
                return Err(FlowError::EmptyOperationText {
                    task_id: self.task_id.clone(),
                    step_index: op.step_index,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.operations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operations.is_empty()
    }

    /// Operation for a 1-based step index.
    pub fn operation(&self, step_index: u32) -> Option<&Operation> {
        self.operations.get(step_index.checked_sub(1)? as usize)
    }
}

/// A benchmark task: prompt, reference answer, scoring metric, and (once
/// generated or loaded) the workflow used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub prompt: String,
    pub ground_truth: String,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow: Option<Workflow>,
}

/// Scoring metric for a task's final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Normalized exact string match (1 or 0).
    Exact,
    /// Compare the last number in each string within relative tolerance.
    Numeric,
    /// Bag-of-token F1 overlap.
    TokenF1,
}

impl std::str::FromStr for Metric {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Metric> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Ok(Metric::Exact),
            "numeric" => Ok(Metric::Numeric),
            "token-f1" | "token_f1" | "tokenf1" => Ok(Metric::TokenF1),
            other => Err(FlowError::UnknownMetric(other.to_string())),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Exact => write!(f, "exact"),
            Metric::Numeric => write!(f, "numeric"),
            Metric::TokenF1 => write!(f, "token-f1"),
        }
    }
}

/// Which node absorbed each step of a workflow at insertion time. This is the
/// routing ground truth used for per-step rewards during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthAssignment {
    pub task_id: String,
    /// step_index -> node that absorbed the operation.
    pub steps: BTreeMap<u32, NodeId>,
}

/// Record an assignment from explicit `(step_index, node)` pairs.
pub fn record_assignment(
    task_id: impl Into<String>,
    pairs: impl IntoIterator<Item = (u32, NodeId)>,
) -> GroundTruthAssignment {
    GroundTruthAssignment {
        task_id: task_id.into(),
        steps: pairs.into_iter().collect(),
    }
}

/// Node recorded for a step of the assignment, if any.
pub fn lookup_node(assignment: &GroundTruthAssignment, step_index: u32) -> Option<NodeId> {
    assignment.steps.get(&step_index).copied()
}
