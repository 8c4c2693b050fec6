//! Task execution over the network: plan the task into steps, walk the graph
//! from source to sink under the routing policy (skipping up to K hops at a
//! time), execute landed-on nodes through the backend, and assemble rewards
//! for training.

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest};
use crate::embedding::{Embedder, EmbeddingCache};
use crate::error::{FlowError, Result};
use crate::network::{FlowNetwork, NodeId, NodeRef};
use crate::policy::{
    featurize, greedy_action, log_prob, sample_action, PolicyParams, Trajectory, TrajectoryStep,
};
use crate::workflow::{lookup_node, GroundTruthAssignment, TaskRecord, Workflow};

/// Knobs shared by inference and episodes.
#[derive(Debug, Clone)]
pub struct RunSettings {
    /// Maximum hop distance per action (K >= 1).
    pub skip_k: u32,
    /// Upper bound on planner steps.
    pub max_step: u32,
    /// Model used for planning calls (node executions use the node's model).
    pub model_id: String,
    /// Regenerate the plan when it runs out before the sink is reached.
    pub replan: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            skip_k: 1,
            max_step: 5,
            model_id: "default".into(),
            replan: false,
        }
    }
}

/// How many times a run may extend its plan when replanning is enabled.
const MAX_REPLANS: u32 = 3;

/// Mutable run dependencies, bundled to keep call sites readable.
pub struct RunContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a mut EmbeddingCache,
    pub settings: RunSettings,
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

/// An ordered list of plan step texts (1-based in all public indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<String>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: u32) -> Option<&str> {
        self.steps
            .get(index.checked_sub(1)? as usize)
            .map(|s| s.as_str())
    }
}

pub fn planner_prompt(given_task: &str, max_step: u32) -> String {
    format!(
        "GIVEN_TASK: {given_task}\n\n\
         For the GIVEN_TASK, generate a clear and concise workflow consisting of 1 to \
         {max_step} steps. Add an opening tag \"(<serial num>)\" and a closing tag \
         \"(/<serial num>)\" for each step like this:\n\n\
         (1) STEP_TEXT (/1)\n\n(2) STEP_TEXT (/2)\n\n...\n\n\
         Do not provide final answer."
    )
}

/// Parse "(1) text (/1)" tagged steps. Serials must be consecutive from 1,
/// opening and closing tags must match, steps must be non-empty.
pub fn parse_plan(text: &str, max_step: u32) -> Result<Plan> {
    let re = Regex::new(r"(?s)\((\d+)\)(.*?)\(/(\d+)\)").expect("static regex");
    let mut steps = Vec::new();
    for cap in re.captures_iter(text) {
        let open: u32 = cap[1]
            .parse()
            .map_err(|_| FlowError::MalformedPlan(format!("bad serial `{}`", &cap[1])))?;
        let close: u32 = cap[3]
            .parse()
            .map_err(|_| FlowError::MalformedPlan(format!("bad serial `{}`", &cap[3])))?;
        if open != close {
            return Err(FlowError::MalformedPlan(format!(
                "opening tag ({open}) does not match closing tag (/{close})"
            )));
        }
        let expected = steps.len() as u32 + 1;
        if open != expected {
            return Err(FlowError::MalformedPlan(format!(
                "expected serial {expected}, found {open}"
            )));
        }
        let body = cap[2].trim();
        if body.is_empty() {
            return Err(FlowError::MalformedPlan(format!("step {open} is empty")));
        }
        steps.push(body.to_string());
    }
    if steps.is_empty() {
        return Err(FlowError::MalformedPlan("no tagged steps found".into()));
    }
    if steps.len() as u32 > max_step {
        return Err(FlowError::MalformedPlan(format!(
            "{} steps exceed the maximum of {max_step}",
            steps.len()
        )));
    }
    Ok(Plan { steps })
}

/// Ask the backend to decompose the task, then parse the tagged steps.
pub fn plan(task: &TaskRecord, ctx: &mut RunContext<'_>) -> Result<Plan> {
    let req = ChatRequest {
        model: ctx.settings.model_id.clone(),
        system: "You are a helpful assistant.".into(),
        user: planner_prompt(&task.prompt, ctx.settings.max_step),
        temperature: 0.0,
        max_tokens: None,
        tag: "planner".into(),
    };
    let resp = ctx.backend.chat(&req)?;
    parse_plan(&resp.text, ctx.settings.max_step)
}

fn replan_extension(
    task: &TaskRecord,
    transcript: &[TranscriptEntry],
    ctx: &mut RunContext<'_>,
) -> Result<Plan> {
    let progress = transcript
        .iter()
        .map(|e| format!("[{}] {}", e.node, e.output))
        .collect::<Vec<_>>()
        .join("\n");
    let user = format!(
        "{}\n\nSteps completed so far produced:\n{progress}\n\nContinue the workflow from \
         here with the remaining steps only.",
        planner_prompt(&task.prompt, ctx.settings.max_step)
    );
    let req = ChatRequest {
        model: ctx.settings.model_id.clone(),
        system: "You are a helpful assistant.".into(),
        user,
        temperature: 0.0,
        max_tokens: None,
        tag: "planner".into(),
    };
    let resp = ctx.backend.chat(&req)?;
    parse_plan(&resp.text, ctx.settings.max_step)
}

// ---------------------------------------------------------------------------
// Action space
// ---------------------------------------------------------------------------

/// Candidates reachable from `current` in 1..=k hops: agent nodes and the
/// sink, never the source, in canonical (ascending id, sink last) order.
pub fn action_space(network: &FlowNetwork, current: NodeRef, k: u32) -> Result<Vec<NodeRef>> {
    if current == NodeRef::Sink {
        return Err(FlowError::SinkReached);
    }
    let distances = network.distances_from(current);
    Ok(distances
        .into_iter()
        .filter(|(node, d)| *d >= 1 && *d <= k && *node != NodeRef::Source)
        .map(|(node, _)| node)
        .collect())
}

// ---------------------------------------------------------------------------
// Node execution and transcripts
// ---------------------------------------------------------------------------

/// One transcript line: a node produced (or was filled with) output covering
/// the given plan steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub node: NodeRef,
    /// 1-based plan step indices this entry covers.
    pub steps: Vec<u32>,
    pub step_text: String,
    pub output: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when the output was injected from the training workflow rather
    /// than produced by a backend call.
    pub filled: bool,
}

fn render_user_message(
    task: &TaskRecord,
    transcript: &[TranscriptEntry],
    steps: &[&str],
) -> String {
    let mut msg = format!("TASK: {}\n", task.prompt);
    if !transcript.is_empty() {
        msg.push_str("\nCONTEXT:\n");
        for entry in transcript {
            msg.push_str(&format!("[{}] {}\n", entry.node, entry.output));
        }
    }
    msg.push('\n');
    for step in steps {
        msg.push_str(&format!("CURRENT_STEP: {step}\n"));
    }
    msg
}

/// Execute one node over the given plan steps (one backend call, however many
/// steps are covered) and append the result to the transcript.
pub fn execute_node(
    network: &FlowNetwork,
    node_id: NodeId,
    step_indices: &[u32],
    step_texts: &[&str],
    task: &TaskRecord,
    transcript: &mut Vec<TranscriptEntry>,
    backend: &dyn ChatBackend,
) -> Result<()> {
    let node = network.node(node_id)?;
    let req = ChatRequest {
        model: node.model_id.clone(),
        system: node.system_prompt.clone(),
        user: render_user_message(task, transcript, step_texts),
        temperature: 0.0,
        max_tokens: None,
        tag: "node-exec".into(),
    };
    let resp = backend.chat(&req)?;
    let output = resp.text.trim().to_string();
    if output.is_empty() {
        return Err(FlowError::EmptyOutput(node_id.to_string()));
    }
    transcript.push(TranscriptEntry {
        node: NodeRef::Agent(node_id),
        steps: step_indices.to_vec(),
        step_text: step_texts.join("\n"),
        output,
        prompt_tokens: resp.usage.prompt_tokens,
        completion_tokens: resp.usage.completion_tokens,
        filled: false,
    });
    Ok(())
}

/// Training-time stand-in for skipped steps: append each skipped step's
/// workflow operation text to the transcript, attributed to the node that
/// owns the step in the ground-truth assignment. No backend calls.
pub fn fill_skipped(
    transcript: &mut Vec<TranscriptEntry>,
    workflow: Option<&Workflow>,
    assignment: Option<&GroundTruthAssignment>,
    skipped_steps: &[u32],
) -> Result<()> {
    let (workflow, assignment) = match (workflow, assignment) {
        (Some(w), Some(a)) => (w, a),
        _ => return Err(FlowError::NotTrainingMode("fill_skipped")),
    };
    for &step in skipped_steps {
        let op = workflow
            .operation(step)
            .ok_or_else(|| FlowError::UnknownStep {
                task_id: workflow.task_id.clone(),
                step_index: step,
            })?;
        let node = lookup_node(assignment, step).ok_or_else(|| FlowError::UnknownStep {
            task_id: assignment.task_id.clone(),
            step_index: step,
        })?;
        transcript.push(TranscriptEntry {
            node: NodeRef::Agent(node),
            steps: vec![step],
            step_text: op.text.clone(),
            output: op.text.clone(),
            prompt_tokens: 0,
            completion_tokens: 0,
            filled: true,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// One routing decision's outcome, as needed for reward assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub chosen: NodeRef,
    /// Last plan step this hop consumed (1-based); absent when the hop
    /// consumed none (an adjacent hop to the sink).
    pub last_plan_step: Option<u32>,
}

/// Blend per-step routing rewards with the shared outcome reward:
/// `r_i = alpha * match_i + (1 - alpha) * final_score`, where `match_i` is 1
/// when the chosen node equals the assignment's node for the last consumed
/// plan step. Without an assignment the routing term is 0 for every step.
pub fn step_rewards(
    path: &[PathStep],
    assignment: Option<&GroundTruthAssignment>,
    final_score: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(FlowError::InvalidConfig(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if !final_score.is_finite() {
        return Err(FlowError::NonFiniteScore("final_score".into()));
    }
    Ok(path
        .iter()
        .map(|step| {
            let matched = match (assignment, step.last_plan_step, step.chosen) {
                (Some(a), Some(plan_step), NodeRef::Agent(id)) => {
                    lookup_node(a, plan_step) == Some(id)
                }
                _ => false,
            };
            alpha * if matched { 1.0 } else { 0.0 } + (1.0 - alpha) * final_score
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Walks
// ---------------------------------------------------------------------------

/// Result of an inference walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub task_id: String,
    pub plan: Plan,
    pub path: Vec<NodeRef>,
    pub transcript: Vec<TranscriptEntry>,
    pub final_answer: String,
}

enum Mode<'a> {
    /// Greedy actions, skipped steps executed by the landing node.
    Inference,
    /// Sampled actions, skipped steps filled from the workflow.
    Episode {
        rng: &'a mut dyn rand::RngCore,
        workflow: &'a Workflow,
        assignment: Option<&'a GroundTruthAssignment>,
    },
}

struct WalkOutcome {
    plan: Plan,
    path: Vec<NodeRef>,
    transcript: Vec<TranscriptEntry>,
    final_answer: String,
    decisions: Vec<Decision>,
}

struct Decision {
    state: crate::policy::StateFeatures,
    action: usize,
    log_prob: f64,
    path_step: PathStep,
}

fn walk(
    network: &FlowNetwork,
    params: &PolicyParams,
    task: &TaskRecord,
    ctx: &mut RunContext<'_>,
    mut mode: Mode<'_>,
) -> Result<WalkOutcome> {
    let mut plan = plan(task, ctx)?;
    let task_emb = ctx.cache.get_or_embed(ctx.embedder, &task.prompt)?;
    let mut current = NodeRef::Source;
    let mut path = vec![current];
    let mut transcript: Vec<TranscriptEntry> = Vec::new();
    let mut decisions: Vec<Decision> = Vec::new();
    let mut consumed: u32 = 0;
    let mut replans = 0;

    while current != NodeRef::Sink {
        if network.hop_distance(current, NodeRef::Sink).is_none() {
            return Err(FlowError::NoPathToSink(current.to_string()));
        }
        if consumed as usize >= plan.len() {
            if ctx.settings.replan && replans < MAX_REPLANS {
                let extension = replan_extension(task, &transcript, ctx)?;
                plan.steps.extend(extension.steps);
                replans += 1;
                continue;
            }
            // Forced routing: shortest path to the sink, executing the final
            // plan step's text at each remaining agent node. Not policy
            // actions, so nothing is recorded for training.
            let sp = network
                .shortest_path(current, NodeRef::Sink)
                .ok_or_else(|| FlowError::NoPathToSink(current.to_string()))?;
            let last_text = plan.steps.last().cloned().unwrap_or_default();
            for hop in &sp[1..] {
                if let NodeRef::Agent(id) = hop {
                    execute_node(
                        network,
                        *id,
                        &[plan.len() as u32],
                        &[&last_text],
                        task,
                        &mut transcript,
                        ctx.backend,
                    )?;
                }
                path.push(*hop);
            }
            break;
        }

        let candidates = action_space(network, current, ctx.settings.skip_k)?;
        if candidates.is_empty() {
            return Err(FlowError::NoCandidates);
        }
        let step_text = plan.steps[consumed as usize].clone();
        let step_emb = ctx.cache.get_or_embed(ctx.embedder, &step_text)?;
        let state = featurize(network, &step_emb, &task_emb, &candidates)?;
        let (action, lp) = match &mut mode {
            Mode::Inference => {
                let a = greedy_action(params, &state)?;
                (a, log_prob(params, &state, a)?)
            }
            Mode::Episode { rng, .. } => sample_action(params, &state, rng)?,
        };
        let chosen = candidates[action];
        let distance = network
            .hop_distance(current, chosen)
            .expect("candidate is reachable by construction");

        let last_plan_step = match chosen {
            NodeRef::Agent(id) => {
                let first = consumed + 1;
                let last = (consumed + distance).min(plan.len() as u32);
                let covered: Vec<u32> = (first..=last).collect();
                match &mut mode {
                    Mode::Inference => {
                        let texts: Vec<&str> = covered
                            .iter()
                            .map(|s| plan.step(*s).expect("in range"))
                            .collect();
                        execute_node(
                            network,
                            id,
                            &covered,
                            &texts,
                            task,
                            &mut transcript,
                            ctx.backend,
                        )?;
                    }
                    Mode::Episode {
                        workflow,
                        assignment,
                        ..
                    } => {
                        // Steps before the landing step are skipped: fill
                        // their outputs from the workflow where it has them.
                        let skipped: Vec<u32> = covered[..covered.len() - 1]
                            .iter()
                            .copied()
                            .filter(|s| workflow.operation(*s).is_some())
                            .collect();
                        if !skipped.is_empty() {
                            fill_skipped(&mut transcript, Some(workflow), *assignment, &skipped)?;
                        }
                        let landing_text = plan.step(last).expect("in range");
                        execute_node(
                            network,
                            id,
                            &[last],
                            &[landing_text],
                            task,
                            &mut transcript,
                            ctx.backend,
                        )?;
                    }
                }
                consumed = last;
                Some(last)
            }
            NodeRef::Sink => {
                // Hopping straight to the sink skips the intermediate nodes'
                // steps without landing anywhere to execute them.
                let skip_count = distance.saturating_sub(1);
                let last = (consumed + skip_count).min(plan.len() as u32);
                let covered: Vec<u32> = (consumed + 1..=last).collect();
                if let Mode::Episode {
                    workflow,
                    assignment,
                    ..
                } = &mut mode
                {
                    let fillable: Vec<u32> = covered
                        .iter()
                        .copied()
                        .filter(|s| workflow.operation(*s).is_some())
                        .collect();
                    if !fillable.is_empty() {
                        fill_skipped(&mut transcript, Some(workflow), *assignment, &fillable)?;
                    }
                }
                let consumed_any = last > consumed;
                consumed = last;
                consumed_any.then_some(last)
            }
            NodeRef::Source => unreachable!("action_space never yields the source"),
        };

        decisions.push(Decision {
            state,
            action,
            log_prob: lp,
            path_step: PathStep {
                chosen,
                last_plan_step,
            },
        });
        path.push(chosen);
        current = chosen;
    }

    let final_answer = transcript
        .iter()
        .rev()
        .find(|e| !e.filled)
        .map(|e| e.output.clone())
        .unwrap_or_default();
    Ok(WalkOutcome {
        plan,
        path,
        transcript,
        final_answer,
        decisions,
    })
}

/// Greedy source-to-sink walk: plan, route, execute, return the sink answer.
pub fn run_inference(
    network: &FlowNetwork,
    params: &PolicyParams,
    task: &TaskRecord,
    ctx: &mut RunContext<'_>,
) -> Result<InferenceResult> {
    let outcome = walk(network, params, task, ctx, Mode::Inference)?;
    Ok(InferenceResult {
        task_id: task.task_id.clone(),
        plan: outcome.plan,
        path: outcome.path,
        transcript: outcome.transcript,
        final_answer: outcome.final_answer,
    })
}

/// A sampled training episode: walk with sampled actions, score the final
/// answer, and assemble per-step rewards
/// (`alpha`-weighted routing match + shared outcome score).
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    network: &FlowNetwork,
    params: &PolicyParams,
    task: &TaskRecord,
    workflow: &Workflow,
    assignment: Option<&GroundTruthAssignment>,
    alpha: f64,
    score: impl Fn(&str) -> Result<f64>,
    rng: &mut impl Rng,
    ctx: &mut RunContext<'_>,
) -> Result<(Trajectory, Vec<TranscriptEntry>, Vec<NodeRef>)> {
    let outcome = walk(
        network,
        params,
        task,
        ctx,
        Mode::Episode {
            rng,
            workflow,
            assignment,
        },
    )?;
    let final_score = score(&outcome.final_answer)?;
    let path_steps: Vec<PathStep> = outcome.decisions.iter().map(|d| d.path_step).collect();
    let rewards = step_rewards(&path_steps, assignment, final_score, alpha)?;
    let steps = outcome
        .decisions
        .into_iter()
        .zip(rewards)
        .map(|(d, reward)| TrajectoryStep {
            state: d.state,
            action: d.action,
            log_prob: d.log_prob,
            reward,
        })
        .collect();
    Ok((
        Trajectory {
            task_id: task.task_id.clone(),
            steps,
            final_answer: outcome.final_answer,
            final_score,
        },
        outcome.transcript,
        outcome.path,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::embedding::HashEmbedder;
    use crate::network::build_network;
    use crate::workflow::Metric;

    fn chain_network(len: usize) -> (FlowNetwork, EmbeddingCache, HashEmbedder) {
        let steps: Vec<(String, String)> = (0..len)
            .map(|i| {
                (
                    format!("distinct step number {i} topic {}", i * 17 + 3),
                    "m1".into(),
                )
            })
            .collect();
        let wf = Workflow::from_steps("chain", steps).unwrap();
        let embedder = HashEmbedder::new(64, 0);
        let mut cache = EmbeddingCache::new();
        let (mut net, _) = build_network(&[wf], 1.0, &embedder, &mut cache).unwrap();
        let backend = ScriptedBackend::keyed([("-", "step worker")]);
        net.profile_all(&backend, "m1").unwrap();
        net.refresh_embeddings(&embedder, &mut cache).unwrap();
        (net, cache, embedder)
    }

    fn task(prompt: &str) -> TaskRecord {
        TaskRecord {
            task_id: "t-test".into(),
            prompt: prompt.into(),
            ground_truth: "42".into(),
            metric: Metric::Exact,
            workflow: None,
        }
    }

    #[test]
    fn plan_parses_tagged_steps() {
        let p = parse_plan("(1) parse input (/1)\n(2) solve (/2)\n(3) answer (/3)", 5).unwrap();
        assert_eq!(p.steps, vec!["parse input", "solve", "answer"]);
        assert_eq!(p.step(1), Some("parse input"));
        assert_eq!(p.step(0), None);
        assert_eq!(p.step(4), None);
    }

    #[test]
    fn plan_accepts_multiline_steps_and_surrounding_prose() {
        let text = "Here is the workflow:\n(1) first do this\nand also this (/1) then (2) finish up (/2) done";
        let p = parse_plan(text, 5).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.steps[0].contains("also this"));
    }

    #[test]
    fn malformed_plans_are_rejected() {
        for (text, why) in [
            ("no tags at all", "no steps"),
            ("(1) a (/1)\n(3) b (/3)", "gap"),
            ("(1) a (/2)", "tag mismatch"),
            ("(2) a (/2)", "must start at 1"),
            ("(1) (/1)", "empty step"),
            ("(1) a (/1)(1) b (/1)", "duplicate serial"),
        ] {
            assert!(
                matches!(parse_plan(text, 5), Err(FlowError::MalformedPlan(_))),
                "{why}: {text:?}"
            );
        }
        // Step-count cap comes from the caller.
        assert!(parse_plan("(1) a (/1)(2) b (/2)", 1).is_err());
    }

    #[test]
    fn action_space_respects_k_and_excludes_source() {
        let (net, ..) = chain_network(3); // s -> v1 -> v2 -> v3 -> t
        let v = |n| NodeRef::Agent(NodeId(n));
        assert_eq!(action_space(&net, NodeRef::Source, 1).unwrap(), vec![v(1)]);
        assert_eq!(action_space(&net, v(1), 2).unwrap(), vec![v(2), v(3)]);
        // K = 3 from v1 reaches the sink.
        assert_eq!(
            action_space(&net, v(1), 3).unwrap(),
            vec![v(2), v(3), NodeRef::Sink]
        );
        assert!(matches!(
            action_space(&net, NodeRef::Sink, 1),
            Err(FlowError::SinkReached)
        ));
    }

    #[test]
    fn execute_node_builds_context_and_rejects_empty_output() {
        let (net, ..) = chain_network(2);
        let backend = ScriptedBackend::fifo(["out one", "   "]);
        let t = task("compute something");
        let mut transcript = Vec::new();
        execute_node(
            &net,
            NodeId(1),
            &[1],
            &["first step"],
            &t,
            &mut transcript,
            &backend,
        )
        .unwrap();
        assert_eq!(transcript.len(), 1);
        assert_eq!(transcript[0].output, "out one");
        let err = execute_node(
            &net,
            NodeId(2),
            &[2],
            &["second step"],
            &t,
            &mut transcript,
            &backend,
        )
        .unwrap_err();
        assert!(matches!(err, FlowError::EmptyOutput(_)));
        // The second request carried the first output as context.
        let reqs = backend.requests();
        assert!(reqs[1].user.contains("CONTEXT:"));
        assert!(reqs[1].user.contains("[v1] out one"));
        assert!(reqs[1].user.contains("CURRENT_STEP: second step"));
        assert!(reqs[0].user.starts_with("TASK: compute something"));
        assert!(
            !reqs[0].user.contains("CONTEXT:"),
            "no context on first call"
        );
    }

    #[test]
    fn fill_skipped_attributes_workflow_text() {
        let wf = Workflow::from_steps(
            "t1",
            vec![
                ("alpha".into(), "m1".into()),
                ("beta".into(), "m1".into()),
                ("gamma".into(), "m1".into()),
            ],
        )
        .unwrap();
        let assignment = crate::workflow::record_assignment(
            "t1",
            vec![(1, NodeId(1)), (2, NodeId(2)), (3, NodeId(3))],
        );
        let mut transcript = Vec::new();
        fill_skipped(&mut transcript, Some(&wf), Some(&assignment), &[2]).unwrap();
        assert_eq!(transcript.len(), 1);
        assert_eq!(transcript[0].node, NodeRef::Agent(NodeId(2)));
        assert_eq!(transcript[0].output, "beta");
        assert!(transcript[0].filled);

        assert!(matches!(
            fill_skipped(&mut transcript, None, None, &[1]),
            Err(FlowError::NotTrainingMode(_))
        ));
        assert!(matches!(
            fill_skipped(&mut transcript, Some(&wf), Some(&assignment), &[9]),
            Err(FlowError::UnknownStep { step_index: 9, .. })
        ));
    }

    #[test]
    fn step_rewards_blend_match_and_outcome() {
        let assignment =
            crate::workflow::record_assignment("t", vec![(1, NodeId(1)), (2, NodeId(2))]);
        let path = vec![
            PathStep {
                chosen: NodeRef::Agent(NodeId(1)),
                last_plan_step: Some(1),
            },
            PathStep {
                chosen: NodeRef::Agent(NodeId(9)),
                last_plan_step: Some(2),
            },
            PathStep {
                chosen: NodeRef::Sink,
                last_plan_step: None,
            },
        ];
        let r = step_rewards(&path, Some(&assignment), 0.5, 0.5).unwrap();
        assert_eq!(r, vec![0.75, 0.25, 0.25]);
        // Routing-only and outcome-only extremes.
        assert_eq!(
            step_rewards(&path, Some(&assignment), 0.5, 1.0).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            step_rewards(&path, Some(&assignment), 0.5, 0.0).unwrap(),
            vec![0.5, 0.5, 0.5]
        );
        // No assignment: routing term vanishes.
        assert_eq!(
            step_rewards(&path, None, 1.0, 0.5).unwrap(),
            vec![0.5, 0.5, 0.5]
        );
        assert!(step_rewards(&path, None, 1.0, 1.5).is_err());
    }

    fn keyed_chain_script(len: usize) -> ScriptedBackend {
        let mut rules: Vec<(String, String)> = vec![(
            "GIVEN_TASK".into(),
            (1..=len)
                .map(|i| format!("({i}) do part {i} (/{i})"))
                .collect::<Vec<_>>()
                .join("\n"),
        )];
        for i in 1..=len {
            rules.push((format!("CURRENT_STEP: do part {i}"), format!("result {i}")));
        }
        rules.push(("-".into(), "worker".into()));
        ScriptedBackend::keyed(rules)
    }

    #[test]
    fn inference_on_chain_visits_every_node_with_k1() {
        let (net, mut cache, embedder) = chain_network(3);
        let backend = keyed_chain_script(3);
        let params = PolicyParams::init(0);
        let mut ctx = RunContext {
            backend: &backend,
            embedder: &embedder,
            cache: &mut cache,
            settings: RunSettings {
                skip_k: 1,
                max_step: 5,
                model_id: "m1".into(),
                replan: false,
            },
        };
        let result = run_inference(&net, &params, &task("walk the chain"), &mut ctx).unwrap();
        let v = |n| NodeRef::Agent(NodeId(n));
        assert_eq!(
            result.path,
            vec![NodeRef::Source, v(1), v(2), v(3), NodeRef::Sink]
        );
        assert_eq!(result.final_answer, "result 3");
        assert_eq!(result.transcript.len(), 3);
        // planner + 3 node executions
        assert_eq!(backend.ledger().calls(), 4);
        assert_eq!(backend.ledger().calls_tagged("planner"), 1);
    }

    #[test]
    fn episode_fills_skipped_steps_from_workflow() {
        let (net, mut cache, embedder) = chain_network(3);
        let backend = keyed_chain_script(3);
        let params = PolicyParams::init(0);
        let wf = Workflow::from_steps(
            "t-test",
            (1..=3)
                .map(|i| (format!("workflow op {i}"), "m1".to_string()))
                .collect(),
        )
        .unwrap();
        let assignment = crate::workflow::record_assignment(
            "t-test",
            vec![(1, NodeId(1)), (2, NodeId(2)), (3, NodeId(3))],
        );
        let mut ctx = RunContext {
            backend: &backend,
            embedder: &embedder,
            cache: &mut cache,
            settings: RunSettings {
                skip_k: 3,
                max_step: 5,
                model_id: "m1".into(),
                replan: false,
            },
        };
        // Force a deterministic "sample" by training nothing: with seed 0 the
        // sample may land anywhere, so run with an rng and just assert the
        // structural invariants instead of a specific path.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let (traj, transcript, path) = run_episode(
            &net,
            &params,
            &task("walk the chain"),
            &wf,
            Some(&assignment),
            0.5,
            |_answer| Ok(1.0),
            &mut rng,
            &mut ctx,
        )
        .unwrap();
        assert!(!traj.steps.is_empty());
        assert_eq!(path.first(), Some(&NodeRef::Source));
        assert_eq!(path.last(), Some(&NodeRef::Sink));
        // Every plan step is covered exactly once across the transcript
        // (filled or executed), in order.
        let covered: Vec<u32> = transcript.iter().flat_map(|e| e.steps.clone()).collect();
        let mut sorted = covered.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(covered, sorted, "steps covered once, in order: {covered:?}");
        for entry in &transcript {
            if entry.filled {
                assert!(entry.output.starts_with("workflow op"));
                assert_eq!(entry.prompt_tokens, 0);
            }
        }
        assert_eq!(traj.final_score, 1.0);
    }

    #[test]
    fn unreachable_sink_is_detected() {
        // Build a valid 1-node network, then break it by pointing the task at
        // a network whose only edges were removed via a fresh empty network.
        let embedder = HashEmbedder::new(64, 0);
        let net = FlowNetwork::new(0.7, embedder.id()).unwrap();
        let mut cache = EmbeddingCache::new();
        let backend = ScriptedBackend::keyed([("GIVEN_TASK", "(1) only step (/1)")]);
        let params = PolicyParams::init(0);
        let mut ctx = RunContext {
            backend: &backend,
            embedder: &embedder,
            cache: &mut cache,
            settings: RunSettings::default(),
        };
        let err = run_inference(&net, &params, &task("anything"), &mut ctx).unwrap_err();
        assert!(matches!(err, FlowError::NoPathToSink(_)));
    }
}
