//! Text-feedback optimization of node prompt parameters. A critique model
//! produces feedback on a walk's outcome (global, against the ground truth)
//! and on each executed node's output (local); an optimizer model rewrites the
//! node's system prompt and role description under that feedback; a sentence
//! budget caps how much of the rewrite is accepted per update.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest};
use crate::error::{FlowError, Result};
use crate::executor::{run_episode, RunContext, TranscriptEntry};
use crate::network::{FlowNetwork, NodeId, NodeRef};
use crate::policy::PolicyParams;
use crate::workflow::TaskRecord;

/// A node's textual parameters: the system prompt it executes with and the
/// role description used for routing similarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theta {
    pub system_prompt: String,
    pub role: String,
}

/// Feedback gathered for one node from one task's walk. At least one of the
/// two texts is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub node_id: NodeId,
    pub global_feedback: String,
    pub local_feedback: String,
    pub source_task_id: String,
}

/// One applied parameter update, after budget truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUpdate {
    pub node_id: NodeId,
    pub old: Theta,
    pub new: Theta,
    pub sentences_changed: usize,
    pub source_task_id: String,
}

const EVAL_SYSTEM: &str = "You are a smart language model that evaluates the response \
for the task. You do not solve task or propose new responses, only evaluate model \
response critically and give very concise feedback.";

const SIGNAL_SYSTEM: &str = "You are part of an optimization system that improves a \
given text (i.e. the variable). You are the gradient (feedback) engine.\n\n\
Your only responsibility is to give intelligent and creative feedback and constructive \
criticism to variables, given an objective specified in <OBJECTIVE_FUNCTION> \
</OBJECTIVE_FUNCTION> tags.\n\n\
The variables may be solutions to problems, prompts to language models, code, or any \
other text-based variable.\n\n\
Pay attention to the role description of the variable, and the context in which it is \
used. You should assume that the variable will be used in a similar context in the \
future.\n\n\
Only provide strategies, explanations, and methods to change in the variable. DO NOT \
propose a new version of the variable, that will be the job of the optimizer. Your \
only job is to send feedback and criticism (compute \"gradients\").\n\n\
For instance, feedback can be in the form of \"Since language models have the X \
failure mode...\", \"Adding X can fix this error because...\", \"Removing X can \
improve the objective function because...\", \"Changing X to Y would fix the mistake \
...\", that gets at the downstream objective.\n\n\
If a variable is already working well (e.g. the objective function is perfect, an \
evaluation shows the response is accurate), you should not give feedback.";

const GLOSSARY: &str = "### Glossary of tags that will be sent to you:\n\
# - <LM_SYSTEM_PROMPT>: The system prompt for the language model.\n\
# - <LM_INPUT>: The input to the language model.\n\
# - <LM_OUTPUT>: The output of the language model.\n\
# - <FEEDBACK>: The feedback to the variable.\n\
# - <CONVERSATION>: The conversation history.\n\
# - <FOCUS>: The focus of the optimization.\n\
# - <ROLE>: The role description of the variable.";

pub const IMPROVED_PROMPT_START: &str = "<IMPROVED_SYSTEM_PROMPT>";
pub const IMPROVED_PROMPT_END: &str = "</IMPROVED_SYSTEM_PROMPT>";
pub const IMPROVED_ROLE_START: &str = "<IMPROVED_ROLE_DESCRIPTION>";
pub const IMPROVED_ROLE_END: &str = "</IMPROVED_ROLE_DESCRIPTION>";

fn optimizer_system() -> String {
    format!(
        "You are part of an optimization system that improves text (i.e., variable). \
         You will be asked to creatively and critically improve prompts, solutions to \
         problems, code, or any other text-based variable. You will receive some \
         feedback, and use the feedback to improve the variable. The feedback may be \
         noisy, identify what is important and what is correct. Pay attention to the \
         role description of the variable, and the context in which it is used. This \
         is very important: You MUST give your response by sending the improved system \
         prompt between {IMPROVED_PROMPT_START} {{improved system prompt}} \
         {IMPROVED_PROMPT_END} tags and the improved role description between \
         {IMPROVED_ROLE_START} {{improved role description}} {IMPROVED_ROLE_END} tags. \
         The text you send between the tags will directly replace the variables.\n\
         {GLOSSARY}"
    )
}

// ---------------------------------------------------------------------------
// Sentence units
// ---------------------------------------------------------------------------

/// Split text into sentence units: a unit ends at a run of `.`/`!`/`?`
/// followed by whitespace or end of text; a trailing fragment with no
/// terminator is its own unit. Units are trimmed; empty units are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    let mut flush = |buf: &mut String| {
        let trimmed = buf.trim();
        if !trimmed.is_empty() {
            units.push(trimmed.to_string());
        }
        buf.clear();
    };
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            while let Some(&next) = chars.peek() {
                if matches!(next, '.' | '!' | '?') {
                    current.push(next);
                    chars.next();
                } else {
                    break;
                }
            }
            match chars.peek() {
                None => flush(&mut current),
                Some(next) if next.is_whitespace() => flush(&mut current),
                // Terminator inside a token ("3.14", "v1.2"): keep going.
                Some(_) => {}
            }
        }
    }
    flush(&mut current);
    units
}

/// Matched index pairs (old, new) of a longest common subsequence of
/// exact-equal sentence units, in ascending order.
fn lcs_pairs(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && dp[i][j] == dp[i + 1][j + 1] + 1 {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Count changed sentence units between two texts: replacements, insertions,
/// and deletions under a longest-common-subsequence alignment. Each unmatched
/// block between alignment anchors costs `max(old units, new units)` — the
/// pairable units count once as replacements, the rest as inserts/deletes.
pub fn sentence_diff(old: &str, new: &str) -> usize {
    let a = split_sentences(old);
    let b = split_sentences(new);
    let mut anchors = lcs_pairs(&a, &b);
    anchors.push((a.len(), b.len()));
    let (mut ai, mut bi, mut count) = (0usize, 0usize, 0usize);
    for (mi, mj) in anchors {
        count += (mi - ai).max(mj - bi);
        ai = mi + 1;
        bi = mj + 1;
    }
    count
}

/// Accept at most `budget` changed sentence units of the rewrite, walking the
/// alignment left to right (within an unmatched block: replacements first,
/// then the leftover inserts or deletes). Everything past the budget reverts
/// to the old text. Returns the merged text and the number of changes taken.
/// An effectively empty rewrite reverts entirely — parameters are never
/// emptied by an update.
pub fn truncate_rewrite(old: &str, new: &str, budget: usize) -> (String, usize) {
    if new.trim().is_empty() {
        return (old.to_string(), 0);
    }
    let a = split_sentences(old);
    let b = split_sentences(new);
    if budget == 0 || a == b {
        return (old.to_string(), 0);
    }
    let mut anchors = lcs_pairs(&a, &b);
    anchors.push((a.len(), b.len()));
    let mut out: Vec<&str> = Vec::new();
    let mut changed = 0usize;
    let (mut ai, mut bi) = (0usize, 0usize);
    for (mi, mj) in anchors {
        let olds = &a[ai..mi];
        let news = &b[bi..mj];
        let paired = olds.len().min(news.len());
        for p in 0..paired {
            if changed < budget {
                out.push(&news[p]);
                changed += 1;
            } else {
                out.push(&olds[p]);
            }
        }
        for old_unit in olds.iter().skip(paired) {
            if changed < budget {
                changed += 1; // deletion accepted: unit dropped
            } else {
                out.push(old_unit);
            }
        }
        for new_unit in news.iter().skip(paired) {
            if changed < budget {
                out.push(new_unit);
                changed += 1;
            }
            // else: insertion reverted, nothing to emit
        }
        if mi < a.len() {
            out.push(&a[mi]);
        }
        ai = mi + 1;
        bi = mj + 1;
    }
    if changed == 0 {
        return (old.to_string(), 0);
    }
    (out.join(" "), changed)
}

// ---------------------------------------------------------------------------
// Feedback generation
// ---------------------------------------------------------------------------

fn conversation_block(task_prompt: &str, entries: &[TranscriptEntry]) -> String {
    let mut block = format!("<CONVERSATION>\nTASK: {task_prompt}\n");
    for entry in entries {
        block.push_str(&format!("[{}] {}\n", entry.node, entry.output));
    }
    block.push_str("</CONVERSATION>");
    block
}

/// Critique the walk's final answer against the ground truth. Returns an
/// empty string with no backend call when the score is already perfect.
pub fn global_feedback(
    final_answer: &str,
    ground_truth: &str,
    score: f64,
    task_prompt: &str,
    transcript: &[TranscriptEntry],
    backend: &dyn ChatBackend,
) -> Result<String> {
    if score >= 1.0 {
        return Ok(String::new());
    }
    if ground_truth.trim().is_empty() {
        return Err(FlowError::MissingGroundTruth);
    }
    let user = format!(
        "{}\n\n<LM_OUTPUT> {final_answer} </LM_OUTPUT>\n\n\
         Ground truth: {ground_truth}\nEvaluator score: {score}\n\n\
         Evaluate the final response against the ground truth and give very concise \
         feedback on what went wrong along the way.",
        conversation_block(task_prompt, transcript)
    );
    let resp = backend.chat(&ChatRequest {
        model: OPTIMIZER_MODEL.into(),
        system: EVAL_SYSTEM.into(),
        user,
        temperature: 0.0,
        max_tokens: None,
        tag: "tg-global".into(),
    })?;
    Ok(resp.text.trim().to_string())
}

/// Critique one node's output given only what came before it. A node that
/// produced no output this walk gets no feedback and costs no backend call.
pub fn local_feedback(
    node_output: Option<&str>,
    preceding: &[TranscriptEntry],
    task_prompt: &str,
    theta: &Theta,
    backend: &dyn ChatBackend,
) -> Result<String> {
    let output = match node_output {
        Some(o) if !o.trim().is_empty() => o,
        _ => return Ok(String::new()),
    };
    let user = format!(
        "{}\n\n<ROLE> {} </ROLE>\n\n<LM_SYSTEM_PROMPT> {} </LM_SYSTEM_PROMPT>\n\n\
         <LM_OUTPUT> {output} </LM_OUTPUT>\n\n\
         <OBJECTIVE_FUNCTION> The variable is the system prompt (with its role \
         description) of the agent that produced <LM_OUTPUT>. The objective is for \
         the agent to execute its current step correctly so the downstream final \
         answer is correct. </OBJECTIVE_FUNCTION>",
        conversation_block(task_prompt, preceding),
        theta.role,
        theta.system_prompt,
    );
    let resp = backend.chat(&ChatRequest {
        model: OPTIMIZER_MODEL.into(),
        system: SIGNAL_SYSTEM.into(),
        user,
        temperature: 0.0,
        max_tokens: None,
        tag: "tg-local".into(),
    })?;
    Ok(resp.text.trim().to_string())
}

/// Model label for critique/optimizer calls; price tables and live backends
/// can map it to a concrete judge model, scripted backends ignore it.
pub const OPTIMIZER_MODEL: &str = "optimizer";

/// Rewrite a node's parameters under feedback, accepting at most `eta`
/// changed sentence units across the system prompt first, then the role.
pub fn apply_update(
    node_id: NodeId,
    theta: &Theta,
    feedback: &FeedbackRecord,
    eta: u32,
    backend: &dyn ChatBackend,
) -> Result<PromptUpdate> {
    if eta == 0 {
        return Err(FlowError::InvalidSentenceBudget(eta));
    }
    let unchanged = PromptUpdate {
        node_id,
        old: theta.clone(),
        new: theta.clone(),
        sentences_changed: 0,
        source_task_id: feedback.source_task_id.clone(),
    };
    if feedback.global_feedback.trim().is_empty() && feedback.local_feedback.trim().is_empty() {
        return Ok(unchanged);
    }
    let mut feedback_block = String::new();
    if !feedback.global_feedback.trim().is_empty() {
        feedback_block.push_str(&format!("GLOBAL FEEDBACK: {}\n", feedback.global_feedback));
    }
    if !feedback.local_feedback.trim().is_empty() {
        feedback_block.push_str(&format!("LOCAL FEEDBACK: {}\n", feedback.local_feedback));
    }
    let user = format!(
        "<ROLE> {} </ROLE>\n\n<LM_SYSTEM_PROMPT> {} </LM_SYSTEM_PROMPT>\n\n\
         <FEEDBACK>\n{feedback_block}</FEEDBACK>\n\n\
         <FOCUS> Improve the system prompt and the role description using the \
         feedback. Send back both, each between its designated tags. </FOCUS>",
        theta.role, theta.system_prompt,
    );
    let resp = backend.chat(&ChatRequest {
        model: OPTIMIZER_MODEL.into(),
        system: optimizer_system(),
        user,
        temperature: 0.0,
        max_tokens: None,
        tag: "tg-optimizer".into(),
    })?;
    let new_prompt = extract_tagged(&resp.text, IMPROVED_PROMPT_START, IMPROVED_PROMPT_END)
        .ok_or_else(|| {
            FlowError::MalformedOptimizerOutput(format!(
                "missing {IMPROVED_PROMPT_START} tags for {node_id}"
            ))
        })?;
    let new_role =
        extract_tagged(&resp.text, IMPROVED_ROLE_START, IMPROVED_ROLE_END).ok_or_else(|| {
            FlowError::MalformedOptimizerOutput(format!(
                "missing {IMPROVED_ROLE_START} tags for {node_id}"
            ))
        })?;
    let (accepted_prompt, changed_prompt) =
        truncate_rewrite(&theta.system_prompt, &new_prompt, eta as usize);
    let remaining = eta as usize - changed_prompt;
    let (accepted_role, changed_role) = truncate_rewrite(&theta.role, &new_role, remaining);
    Ok(PromptUpdate {
        node_id,
        old: theta.clone(),
        new: Theta {
            system_prompt: accepted_prompt,
            role: accepted_role,
        },
        sentences_changed: changed_prompt + changed_role,
        source_task_id: feedback.source_task_id.clone(),
    })
}

fn extract_tagged(text: &str, start: &str, end: &str) -> Option<String> {
    let from = text.find(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(text[from..from + len].trim().to_string())
}

// ---------------------------------------------------------------------------
// Batch rounds
// ---------------------------------------------------------------------------

/// Run one batch of tasks through the network (sampled walks with the frozen
/// policy and pre-batch parameters), gather global+local feedback per
/// executed node, then apply updates node by node in ascending task order —
/// later tasks rewrite on top of earlier results, each truncated to `eta`
/// changed sentences. Finishes by re-embedding every touched role so the next
/// routing decision sees fresh similarities.
#[allow(clippy::too_many_arguments)]
pub fn batch_round(
    network: &mut FlowNetwork,
    params: &PolicyParams,
    tasks: &[TaskRecord],
    eta: u32,
    alpha: f64,
    store: &mut PromptStore,
    score: impl Fn(&TaskRecord, &str) -> Result<f64>,
    rng: &mut impl Rng,
    ctx: &mut RunContext<'_>,
) -> Result<Vec<PromptUpdate>> {
    if eta == 0 {
        return Err(FlowError::InvalidSentenceBudget(eta));
    }
    // Feedback phase: every task reads the same pre-batch parameters. Walks
    // run one after another but touch disjoint state, matching the batch
    // semantics of independent workers.
    let mut records: Vec<FeedbackRecord> = Vec::new();
    for task in tasks {
        let workflow = task
            .workflow
            .as_ref()
            .ok_or_else(|| FlowError::MissingWorkflow(task.task_id.clone()))?;
        let assignment = network.assignment_for(&task.task_id);
        let (traj, transcript, path) = run_episode(
            network,
            params,
            task,
            workflow,
            assignment.as_ref(),
            alpha,
            |answer| score(task, answer),
            rng,
            ctx,
        )?;
        let global = global_feedback(
            &traj.final_answer,
            &task.ground_truth,
            traj.final_score,
            &task.prompt,
            &transcript,
            ctx.backend,
        )?;
        // Executed nodes only: a node the walk hopped over produced nothing,
        // so it gets neither local nor global feedback this round.
        let mut seen = std::collections::BTreeSet::new();
        for node_ref in &path {
            let id = match node_ref {
                NodeRef::Agent(id) => *id,
                _ => continue,
            };
            if !seen.insert(id) {
                continue;
            }
            let executed_at = transcript
                .iter()
                .rposition(|e| !e.filled && e.node == NodeRef::Agent(id));
            let Some(pos) = executed_at else { continue };
            let node = network.node(id)?;
            let theta = Theta {
                system_prompt: node.system_prompt.clone(),
                role: node.role.clone(),
            };
            let local = local_feedback(
                Some(&transcript[pos].output),
                &transcript[..pos],
                &task.prompt,
                &theta,
                ctx.backend,
            )?;
            if global.is_empty() && local.is_empty() {
                continue;
            }
            records.push(FeedbackRecord {
                node_id: id,
                global_feedback: global.clone(),
                local_feedback: local,
                source_task_id: task.task_id.clone(),
            });
        }
    }

    // Update phase: per node, ascending source task id, last writer on top.
    let mut by_node: BTreeMap<NodeId, Vec<FeedbackRecord>> = BTreeMap::new();
    for record in records {
        by_node.entry(record.node_id).or_default().push(record);
    }
    let mut updates = Vec::new();
    for (node_id, mut node_records) in by_node {
        node_records.sort_by(|x, y| x.source_task_id.cmp(&y.source_task_id));
        for record in node_records {
            let node = network.node(node_id)?;
            let theta = Theta {
                system_prompt: node.system_prompt.clone(),
                role: node.role.clone(),
            };
            let update = apply_update(node_id, &theta, &record, eta, ctx.backend)?;
            if update.new != update.old {
                network
                    .node_mut(node_id)?
                    .set_prompt_params(update.new.system_prompt.clone(), update.new.role.clone());
                store.record(
                    node_id,
                    &update.new,
                    &update.source_task_id,
                    update.sentences_changed,
                );
            }
            updates.push(update);
        }
    }
    network.refresh_embeddings(ctx.embedder, ctx.cache)?;
    Ok(updates)
}

// ---------------------------------------------------------------------------
// Prompt store
// ---------------------------------------------------------------------------

/// One versioned snapshot of a node's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub node_id: NodeId,
    /// Per-node version counter starting at 1.
    pub version: u64,
    pub system_prompt: String,
    pub role: String,
    pub source_task_id: String,
    pub sentences_changed: usize,
    /// Logical write counter, monotone across the whole store.
    pub timestamp: u64,
}

/// Append-only per-node parameter history with rollback, persisted as JSONL.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptStore {
    records: Vec<PromptVersion>,
    clock: u64,
}

impl PromptStore {
    pub fn new() -> PromptStore {
        PromptStore::default()
    }

    /// Capture the current parameters of every profiled node as version 1,
    /// so rollback to the pre-optimization state is always possible.
    pub fn seed(&mut self, network: &FlowNetwork) {
        for node in network.nodes() {
            if node.role.is_empty() && node.system_prompt.is_empty() {
                continue;
            }
            let theta = Theta {
                system_prompt: node.system_prompt.clone(),
                role: node.role.clone(),
            };
            self.record(node.id, &theta, "init", 0);
        }
    }

    pub fn record(
        &mut self,
        node_id: NodeId,
        theta: &Theta,
        source_task_id: &str,
        sentences_changed: usize,
    ) -> &PromptVersion {
        let version = self.history(node_id).last().map(|r| r.version).unwrap_or(0) + 1;
        self.clock += 1;
        self.records.push(PromptVersion {
            node_id,
            version,
            system_prompt: theta.system_prompt.clone(),
            role: theta.role.clone(),
            source_task_id: source_task_id.to_string(),
            sentences_changed,
            timestamp: self.clock,
        });
        self.records.last().expect("just pushed")
    }

    pub fn history(&self, node_id: NodeId) -> Vec<&PromptVersion> {
        self.records
            .iter()
            .filter(|r| r.node_id == node_id)
            .collect()
    }

    pub fn latest(&self, node_id: NodeId) -> Option<&PromptVersion> {
        self.history(node_id).into_iter().last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PromptVersion] {
        &self.records
    }

    /// Restore a stored version onto the network node, recorded as a fresh
    /// version (history stays append-only). The caller must refresh
    /// embeddings before routing again.
    pub fn rollback(
        &mut self,
        network: &mut FlowNetwork,
        node_id: NodeId,
        version: u64,
    ) -> Result<()> {
        let target = self
            .history(node_id)
            .into_iter()
            .find(|r| r.version == version)
            .cloned()
            .ok_or_else(|| {
                FlowError::ArtifactMismatch(format!(
                    "no stored version {version} for node {node_id}"
                ))
            })?;
        let theta = Theta {
            system_prompt: target.system_prompt,
            role: target.role,
        };
        network
            .node_mut(node_id)?
            .set_prompt_params(theta.system_prompt.clone(), theta.role.clone());
        self.record(node_id, &theta, &format!("rollback:v{version}"), 0);
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| FlowError::io(path.display(), e))?;
        for record in &self.records {
            let line = serde_json::to_string(record)?;
            writeln!(file, "{line}").map_err(|e| FlowError::io(path.display(), e))?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PromptStore> {
        let file = std::fs::File::open(path).map_err(|e| FlowError::io(path.display(), e))?;
        let mut records: Vec<PromptVersion> = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| FlowError::io(path.display(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let clock = records.iter().map(|r| r.timestamp).max().unwrap_or(0);
        Ok(PromptStore { records, clock })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::embedding::{EmbeddingCache, HashEmbedder};
    use crate::executor::RunSettings;
    use crate::network::build_network;
    use crate::workflow::{Metric, Workflow};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sentences_split_on_terminator_runs() {
        assert_eq!(
            split_sentences("One. Two!! Three?  Trailing fragment"),
            vec!["One.", "Two!!", "Three?", "Trailing fragment"]
        );
        assert_eq!(
            split_sentences("pi is 3.14 and more."),
            vec!["pi is 3.14 and more."]
        );
        assert_eq!(split_sentences("   "), Vec::<String>::new());
        assert_eq!(split_sentences("Ends here."), vec!["Ends here."]);
    }

    #[test]
    fn diff_counts_replacements_insertions_deletions() {
        assert_eq!(sentence_diff("A. B. C.", "A. B. C."), 0);
        assert_eq!(sentence_diff("A. B. C.", "A. X. C."), 1);
        assert_eq!(sentence_diff("A. B.", "A."), 1);
        assert_eq!(sentence_diff("A.", "A. B."), 1);
        // Replacement plus insertion in one block: max(1, 2) = 2.
        assert_eq!(sentence_diff("A. B. C.", "A. X. Y. C."), 2);
        // Disjoint blocks sum: X->_ costs 1, Y->P,Q costs 2.
        assert_eq!(sentence_diff("X. A. Y.", "A. P. Q."), 3);
        assert_eq!(sentence_diff("", "A. B."), 2);
    }

    #[test]
    fn truncation_keeps_first_budgeted_changes() {
        let old = "A. B. C. D. E.";
        let new = "A2. B2. C2. D2. E2.";
        let (kept, changed) = truncate_rewrite(old, new, 3);
        assert_eq!(changed, 3);
        assert_eq!(kept, "A2. B2. C2. D. E.");
        // Budget covers everything -> full rewrite.
        let (all, n) = truncate_rewrite(old, new, 10);
        assert_eq!(n, 5);
        assert_eq!(all, "A2. B2. C2. D2. E2.");
        // Identical or empty rewrites change nothing and keep formatting.
        assert_eq!(truncate_rewrite(old, old, 3), (old.to_string(), 0));
        assert_eq!(truncate_rewrite(old, "   ", 3), (old.to_string(), 0));
        // Insertion beyond budget is simply not inserted.
        let (kept, changed) = truncate_rewrite("A. B.", "A. X. B. Y.", 1);
        assert_eq!(changed, 1);
        assert_eq!(kept, "A. X. B.");
        // Deletion within budget drops the unit.
        let (kept, changed) = truncate_rewrite("A. B. C.", "A. C.", 3);
        assert_eq!((kept.as_str(), changed), ("A. C.", 1));
    }

    #[test]
    fn perfect_score_produces_no_global_feedback_or_call() {
        let backend = ScriptedBackend::fifo(Vec::<String>::new());
        let out = global_feedback("42", "42", 1.0, "task", &[], &backend).unwrap();
        assert_eq!(out, "");
        assert_eq!(backend.ledger().calls(), 0);

        let backend = ScriptedBackend::fifo(["answer lacks units"]);
        let out = global_feedback("42", "42 km", 0.0, "task", &[], &backend).unwrap();
        assert_eq!(out, "answer lacks units");
        assert!(matches!(
            global_feedback("42", "   ", 0.0, "task", &[], &backend),
            Err(FlowError::MissingGroundTruth)
        ));
    }

    #[test]
    fn skipped_node_gets_no_local_feedback() {
        let backend = ScriptedBackend::fifo(Vec::<String>::new());
        let theta = Theta {
            system_prompt: "p".into(),
            role: "r".into(),
        };
        assert_eq!(
            local_feedback(None, &[], "task", &theta, &backend).unwrap(),
            ""
        );
        assert_eq!(
            local_feedback(Some("  "), &[], "task", &theta, &backend).unwrap(),
            ""
        );
        assert_eq!(backend.ledger().calls(), 0);

        let backend = ScriptedBackend::fifo(["tighten the arithmetic"]);
        let out = local_feedback(Some("7"), &[], "solve 3+4", &theta, &backend).unwrap();
        assert_eq!(out, "tighten the arithmetic");
        let req = &backend.requests()[0];
        assert!(req.user.contains("TASK: solve 3+4"));
        assert!(req.user.contains("<LM_OUTPUT> 7 </LM_OUTPUT>"));
        assert!(req.system.contains("gradient (feedback) engine"));
    }

    fn feedback(node: u32, global: &str, local: &str, task: &str) -> FeedbackRecord {
        FeedbackRecord {
            node_id: NodeId(node),
            global_feedback: global.into(),
            local_feedback: local.into(),
            source_task_id: task.into(),
        }
    }

    fn optimizer_reply(prompt: &str, role: &str) -> String {
        format!(
            "{IMPROVED_PROMPT_START}\n{prompt}\n{IMPROVED_PROMPT_END}\n\
             {IMPROVED_ROLE_START}\n{role}\n{IMPROVED_ROLE_END}"
        )
    }

    #[test]
    fn update_truncates_to_budget_prompt_first() {
        let theta = Theta {
            system_prompt: "A. B. C. D. E.".into(),
            role: "R1. R2.".into(),
        };
        let backend = ScriptedBackend::fifo([optimizer_reply("A2. B2. C2. D2. E2.", "R1x. R2x.")]);
        let update = apply_update(
            NodeId(1),
            &theta,
            &feedback(1, "be precise", "", "t1"),
            3,
            &backend,
        )
        .unwrap();
        // All three accepted changes land in the system prompt; the role's
        // rewrite arrives with no budget left and reverts whole.
        assert_eq!(update.sentences_changed, 3);
        assert_eq!(update.new.system_prompt, "A2. B2. C2. D. E.");
        assert_eq!(update.new.role, "R1. R2.");
        assert!(!update.new.system_prompt.is_empty() && !update.new.role.is_empty());
    }

    #[test]
    fn update_accepts_small_rewrites_and_flags_missing_tags() {
        let theta = Theta {
            system_prompt: "A. B. C.".into(),
            role: "solver".into(),
        };
        let backend = ScriptedBackend::fifo([optimizer_reply("A. B2. C.", "solver")]);
        let update =
            apply_update(NodeId(1), &theta, &feedback(1, "g", "l", "t"), 3, &backend).unwrap();
        assert_eq!(update.sentences_changed, 1);
        assert_eq!(update.new.system_prompt, "A. B2. C.");

        let backend = ScriptedBackend::fifo(["no tags here at all"]);
        assert!(matches!(
            apply_update(NodeId(1), &theta, &feedback(1, "g", "", "t"), 3, &backend),
            Err(FlowError::MalformedOptimizerOutput(_))
        ));

        // Empty feedback: no call, no change.
        let backend = ScriptedBackend::fifo(Vec::<String>::new());
        let update =
            apply_update(NodeId(1), &theta, &feedback(1, " ", "", "t"), 3, &backend).unwrap();
        assert_eq!(update.sentences_changed, 0);
        assert_eq!(update.new, theta);
        assert_eq!(backend.ledger().calls(), 0);
        assert!(matches!(
            apply_update(NodeId(1), &theta, &feedback(1, "g", "", "t"), 0, &backend),
            Err(FlowError::InvalidSentenceBudget(0))
        ));
    }

    #[test]
    fn store_versions_rollback_and_roundtrip() {
        let mut store = PromptStore::new();
        let t1 = Theta {
            system_prompt: "P1.".into(),
            role: "r1".into(),
        };
        let t2 = Theta {
            system_prompt: "P2.".into(),
            role: "r2".into(),
        };
        store.record(NodeId(1), &t1, "init", 0);
        store.record(NodeId(1), &t2, "task-a", 2);
        store.record(NodeId(2), &t1, "init", 0);
        assert_eq!(store.latest(NodeId(1)).unwrap().version, 2);
        assert_eq!(store.latest(NodeId(2)).unwrap().version, 1);
        assert_eq!(store.history(NodeId(1)).len(), 2);
        let stamps: Vec<u64> = store.records().iter().map(|r| r.timestamp).collect();
        assert_eq!(stamps, vec![1, 2, 3]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        store.save(&path).unwrap();
        let loaded = PromptStore::load(&path).unwrap();
        assert_eq!(loaded, store);
    }

    /// End-to-end round over a two-node chain with keyed scripts: the wrong
    /// answer draws feedback, the optimizer rewrites both nodes, versions
    /// land in the store, and role embeddings come back fresh.
    #[test]
    fn batch_round_applies_budgeted_updates_and_refreshes_embeddings() {
        let wf = Workflow::from_steps(
            "t1",
            vec![
                ("compute the partial sums".into(), "m1".into()),
                ("present the final total".into(), "m1".into()),
            ],
        )
        .unwrap();
        let embedder = HashEmbedder::new(64, 0);
        let mut cache = EmbeddingCache::new();
        let (mut net, _) =
            build_network(std::slice::from_ref(&wf), 1.0, &embedder, &mut cache).unwrap();
        let profile_backend = ScriptedBackend::keyed([("-", "step worker")]);
        net.profile_all(&profile_backend, "m1").unwrap();
        net.refresh_embeddings(&embedder, &mut cache).unwrap();
        let old_prompt = net.node(NodeId(1)).unwrap().system_prompt.clone();

        // Rewrite one sentence of the prompt and the whole (one-unit) role:
        // two changed units, inside the budget of three.
        let new_prompt = old_prompt.replace(
            "Double-check your calculations or reasoning.",
            "Verify twice.",
        );
        assert_ne!(new_prompt, old_prompt);
        // Most specific keys first: later calls quote node system prompts,
        // which themselves contain CURRENT_STEP.
        let rewritten = optimizer_reply(&new_prompt, "careful step worker");
        let backend = ScriptedBackend::keyed([
            (
                "Evaluate the final response",
                "the total was never verified",
            ),
            (
                "OBJECTIVE_FUNCTION",
                "require the agent to double-check sums",
            ),
            ("FOCUS", &rewritten),
            (
                "GIVEN_TASK",
                "(1) compute the partial sums (/1)\n(2) present the final total (/2)",
            ),
            ("CURRENT_STEP", "some wrong answer"),
        ]);
        let task = TaskRecord {
            task_id: "t1".into(),
            prompt: "sum the ledger".into(),
            ground_truth: "100".into(),
            metric: Metric::Exact,
            workflow: Some(wf),
        };
        let params = PolicyParams::init(0);
        let mut store = PromptStore::new();
        store.seed(&net);
        let seeded = store.len();
        assert_eq!(seeded, net.node_count());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
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
        let updates = batch_round(
            &mut net,
            &params,
            std::slice::from_ref(&task),
            3,
            0.5,
            &mut store,
            |_, answer| Ok(if answer == "100" { 1.0 } else { 0.0 }),
            &mut rng,
            &mut ctx,
        )
        .unwrap();
        assert!(!updates.is_empty());
        for u in &updates {
            assert!(u.sentences_changed <= 3, "budget respected: {u:?}");
            assert!(!u.new.system_prompt.is_empty() && !u.new.role.is_empty());
        }
        assert_eq!(updates[0].sentences_changed, 2);
        // Updated nodes took the rewrite and re-embedded their roles.
        let n1 = net.node(NodeId(1)).unwrap();
        assert_eq!(n1.role, "careful step worker");
        assert!(n1.system_prompt.ends_with("Verify twice."));
        assert!(n1.system_prompt.contains("Target: You are a step worker."));
        assert!(n1.role_embedding_is_fresh());
        assert!(store.len() > seeded);
        assert_eq!(store.latest(NodeId(1)).unwrap().version, 2);

        // Determinism: identical inputs, identical final parameters.
        let embedder2 = HashEmbedder::new(64, 0);
        let mut cache2 = EmbeddingCache::new();
        let wf2 = task.workflow.clone().unwrap();
        let (mut net2, _) = build_network(&[wf2], 1.0, &embedder2, &mut cache2).unwrap();
        net2.profile_all(&profile_backend, "m1").unwrap();
        net2.refresh_embeddings(&embedder2, &mut cache2).unwrap();
        let mut store2 = PromptStore::new();
        store2.seed(&net2);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let mut ctx2 = RunContext {
            backend: &backend,
            embedder: &embedder2,
            cache: &mut cache2,
            settings: RunSettings {
                skip_k: 1,
                max_step: 5,
                model_id: "m1".into(),
                replan: false,
            },
        };
        let updates2 = batch_round(
            &mut net2,
            &params,
            std::slice::from_ref(&task),
            3,
            0.5,
            &mut store2,
            |_, answer| Ok(if answer == "100" { 1.0 } else { 0.0 }),
            &mut rng2,
            &mut ctx2,
        )
        .unwrap();
        assert_eq!(updates, updates2);
        for id in net.node_ids() {
            assert_eq!(
                net.node(id).unwrap().system_prompt,
                net2.node(id).unwrap().system_prompt
            );
            assert_eq!(net.node(id).unwrap().role, net2.node(id).unwrap().role);
        }
    }

    #[test]
    fn rollback_restores_an_earlier_version() {
        let wf = Workflow::from_steps("t1", vec![("only step".into(), "m1".into())]).unwrap();
        let embedder = HashEmbedder::new(32, 0);
        let mut cache = EmbeddingCache::new();
        let (mut net, _) = build_network(&[wf], 0.7, &embedder, &mut cache).unwrap();
        let backend = ScriptedBackend::keyed([("-", "worker")]);
        net.profile_all(&backend, "m1").unwrap();
        let mut store = PromptStore::new();
        store.seed(&net);
        let original = net.node(NodeId(1)).unwrap().system_prompt.clone();

        net.node_mut(NodeId(1))
            .unwrap()
            .set_prompt_params("Changed.".into(), "changed role".into());
        store.record(
            NodeId(1),
            &Theta {
                system_prompt: "Changed.".into(),
                role: "changed role".into(),
            },
            "task-x",
            1,
        );
        store.rollback(&mut net, NodeId(1), 1).unwrap();
        assert_eq!(net.node(NodeId(1)).unwrap().system_prompt, original);
        let latest = store.latest(NodeId(1)).unwrap();
        assert_eq!(latest.version, 3);
        assert_eq!(latest.source_task_id, "rollback:v1");
        assert!(store.rollback(&mut net, NodeId(1), 99).is_err());
        // Stale after rollback until refreshed.
        assert!(!net.node(NodeId(1)).unwrap().role_embedding_is_fresh());
        net.refresh_embeddings(&embedder, &mut cache).unwrap();
        assert!(net.node(NodeId(1)).unwrap().role_embedding_is_fresh());
    }
}
