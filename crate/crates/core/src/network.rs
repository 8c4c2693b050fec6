//! The agent flow network: a directed graph of agent nodes between a virtual
//! source and sink, grown incrementally by absorbing workflow operations.
//!
//! Construction is similarity-driven: each operation either joins the most
//! similar existing node (same model, above the merge threshold, never the
//! node that absorbed the previous step) or founds a new node. Edges record
//! observed step adjacency, so every inserted workflow contributes one
//! source-to-sink path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatRequest};
use crate::embedding::{cosine_sim, max_similarity, Embedder, Embedding, EmbeddingCache};
use crate::error::{FlowError, Result};
use crate::workflow::{record_assignment, GroundTruthAssignment, Workflow};

/// Identifier of an agent node. Displayed as `v<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// A graph endpoint: the virtual source, an agent node, or the virtual sink.
/// The ordering (source < agents by id < sink) is the canonical candidate
/// ordering used everywhere determinism matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    Source,
    Agent(NodeId),
    Sink,
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeRef::Source => write!(f, "s"),
            NodeRef::Agent(id) => write!(f, "{id}"),
            NodeRef::Sink => write!(f, "t"),
        }
    }
}

impl std::str::FromStr for NodeRef {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<NodeRef> {
        match s {
            "s" => Ok(NodeRef::Source),
            "t" => Ok(NodeRef::Sink),
            other => other
                .strip_prefix('v')
                .and_then(|n| n.parse::<u32>().ok())
                .map(|n| NodeRef::Agent(NodeId(n)))
                .ok_or_else(|| FlowError::UnknownNode(other.to_string())),
        }
    }
}

impl Serialize for NodeRef {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodeRef {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One absorbed workflow operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub task_id: String,
    pub step_index: u32,
    pub text: String,
}

/// An agent node: the operations it absorbed plus its derived profile
/// (exemplar member e*, role description r*, executable system prompt P).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: NodeId,
    pub model_id: String,
    pub members: Vec<Member>,
    /// Index into `members` of the exemplar (medoid) operation.
    pub exemplar_index: usize,
    /// Natural-language role description; empty until profiled.
    pub role: String,
    /// System prompt the node executes with; empty until profiled.
    pub system_prompt: String,
    /// Bumped whenever role/system_prompt change (profiling, prompt updates).
    pub profile_version: u64,
    #[serde(skip)]
    member_embeddings: Vec<Embedding>,
    #[serde(skip)]
    role_embedding: Option<Embedding>,
    /// Which profile_version `role_embedding` was computed for.
    #[serde(skip)]
    embedded_version: Option<u64>,
}

impl AgentNode {
    fn new(id: NodeId, model_id: String) -> AgentNode {
        AgentNode {
            id,
            model_id,
            members: Vec::new(),
            exemplar_index: 0,
            role: String::new(),
            system_prompt: String::new(),
            profile_version: 0,
            member_embeddings: Vec::new(),
            role_embedding: None,
            embedded_version: None,
        }
    }

    pub fn member_embeddings(&self) -> &[Embedding] {
        &self.member_embeddings
    }

    /// Embedding of the exemplar member e*.
    pub fn exemplar_embedding(&self) -> Result<&Embedding> {
        self.member_embeddings
            .get(self.exemplar_index)
            .ok_or_else(|| FlowError::EmptyNode(self.id.to_string()))
    }

    pub fn exemplar_text(&self) -> Result<&str> {
        self.members
            .get(self.exemplar_index)
            .map(|m| m.text.as_str())
            .ok_or_else(|| FlowError::EmptyNode(self.id.to_string()))
    }

    /// Embedding of the current role description. Errors if the node has not
    /// been profiled or the cached embedding is stale relative to the current
    /// profile — callers must refresh embeddings after profile changes.
    pub fn role_embedding(&self) -> Result<&Embedding> {
        if self.embedded_version != Some(self.profile_version) {
            return Err(FlowError::EmptyNode(format!(
                "{}: role embedding is stale (profile v{}, embedded {:?})",
                self.id, self.profile_version, self.embedded_version
            )));
        }
        self.role_embedding
            .as_ref()
            .ok_or_else(|| FlowError::EmptyNode(self.id.to_string()))
    }

    /// True when the cached role embedding matches the current profile.
    pub fn role_embedding_is_fresh(&self) -> bool {
        self.embedded_version == Some(self.profile_version) && self.role_embedding.is_some()
    }

    /// Replace the node's prompt parameters (system prompt and role),
    /// invalidating the cached role embedding.
    pub fn set_prompt_params(&mut self, system_prompt: String, role: String) {
        self.system_prompt = system_prompt;
        self.role = role;
        self.profile_version += 1;
    }

    /// Medoid member: the one with maximum mean cosine similarity to the
    /// others; singletons are their own exemplar. Ties break to the
    /// earliest-inserted member.
    fn medoid_index(&self) -> Result<usize> {
        let n = self.member_embeddings.len();
        if n == 0 {
            return Err(FlowError::EmptyNode(self.id.to_string()));
        }
        if n == 1 {
            return Ok(0);
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..n {
                if i != j {
                    total += cosine_sim(&self.member_embeddings[i], &self.member_embeddings[j])?;
                }
            }
            let mean = total / (n - 1) as f64;
            if mean > best.1 {
                best = (i, mean);
            }
        }
        Ok(best.0)
    }
}

/// System prompt template instantiated with a node's role description.
pub fn system_prompt_for_role(role: &str) -> String {
    format!(
        "Target: You are a {role}. Execute the CURRENT_STEP without extra text, \
         explanation, comment.\nOperating Principles: Focus only on the CURRENT_STEP; \
         do not expand scope, jump ahead or solve the total task by yourself. \
         Double-check your calculations or reasoning."
    )
}

const ROLE_SUMMARY_SYSTEM: &str = "You derive a concise role description for a worker \
agent. Given the task steps the agent is responsible for, reply with a short role \
phrase such as \"math solver\" or \"report formatter\". Reply with the role phrase only.";

/// One line of the insertion log: where a workflow operation landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub task_id: String,
    pub step_index: u32,
    pub node: NodeId,
    /// True when the operation founded the node rather than joining it.
    pub created: bool,
    /// Best eligible similarity observed during recall (absent for founding
    /// insertions with no eligible candidates).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

/// The flow network plus its construction provenance.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    pub delta: f64,
    pub embedder_id: String,
    next_id: u32,
    nodes: BTreeMap<NodeId, AgentNode>,
    edges: BTreeSet<(NodeRef, NodeRef)>,
    successors: BTreeMap<NodeRef, BTreeSet<NodeRef>>,
    pub insertion_log: Vec<InsertionRecord>,
}

impl FlowNetwork {
    /// Empty network with a merge threshold. `delta` must lie in [0, 1].
    pub fn new(delta: f64, embedder_id: impl Into<String>) -> Result<FlowNetwork> {
        if !(0.0..=1.0).contains(&delta) || !delta.is_finite() {
            return Err(FlowError::InvalidDelta(delta));
        }
        Ok(FlowNetwork {
            delta,
            embedder_id: embedder_id.into(),
            next_id: 1,
            nodes: BTreeMap::new(),
            edges: BTreeSet::new(),
            successors: BTreeMap::new(),
            insertion_log: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&AgentNode> {
        self.nodes
            .get(&id)
            .ok_or_else(|| FlowError::UnknownNode(id.to_string()))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut AgentNode> {
        self.nodes
            .get_mut(&id)
            .ok_or_else(|| FlowError::UnknownNode(id.to_string()))
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &AgentNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    /// Edges in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = &(NodeRef, NodeRef)> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: NodeRef, to: NodeRef) -> bool {
        self.edges.contains(&(from, to))
    }

    fn add_edge(&mut self, from: NodeRef, to: NodeRef) {
        if from == to {
            return; // construction never proposes self-loops; belt and braces
        }
        if self.edges.insert((from, to)) {
            self.successors.entry(from).or_default().insert(to);
        }
    }

    /// Absorb one workflow. Returns which node took each step.
    ///
    /// The first two operations ever inserted found nodes unconditionally;
    /// afterwards each operation joins the most similar node among those with
    /// a matching model, excluding the node that absorbed the previous step,
    /// provided the similarity clears `delta`; otherwise it founds a new node.
    /// Ties in similarity break toward the lowest node id.
    pub fn insert_workflow(
        &mut self,
        workflow: &Workflow,
        embedder: &dyn Embedder,
        cache: &mut EmbeddingCache,
    ) -> Result<GroundTruthAssignment> {
        workflow.validate()?;
        let founding_workflow = self.nodes.is_empty();
        let mut prev: Option<NodeId> = None;
        let mut pairs = Vec::with_capacity(workflow.len());
        let last_step = workflow.len() as u32;

        for op in &workflow.operations {
            let emb = cache.get_or_embed(embedder, &op.text)?;
            let founding = founding_workflow && op.step_index <= 2;
            let (target, created, similarity) = if founding {
                (None, true, None)
            } else {
                let mut best: Option<(NodeId, f64)> = None;
                for node in self.nodes.values() {
                    if node.model_id != op.model_id || Some(node.id) == prev {
                        continue;
                    }
                    let sim = max_similarity(&emb, node)?;
                    if best.is_none_or(|(_, s)| sim > s) {
                        best = Some((node.id, sim));
                    }
                }
                match best {
                    Some((id, sim)) if sim >= self.delta => (Some(id), false, Some(sim)),
                    Some((_, sim)) => (None, true, Some(sim)),
                    None => (None, true, None),
                }
            };

            let node_id = match target {
                Some(id) => id,
                None => {
                    let id = NodeId(self.next_id);
                    self.next_id += 1;
                    self.nodes
                        .insert(id, AgentNode::new(id, op.model_id.clone()));
                    id
                }
            };
            {
                let node = self.nodes.get_mut(&node_id).expect("node just resolved");
                node.members.push(Member {
                    task_id: workflow.task_id.clone(),
                    step_index: op.step_index,
                    text: op.text.clone(),
                });
                node.member_embeddings.push(emb);
            }

            if op.step_index == 1 {
                self.add_edge(NodeRef::Source, NodeRef::Agent(node_id));
            }
            if let Some(p) = prev {
                self.add_edge(NodeRef::Agent(p), NodeRef::Agent(node_id));
            }
            if op.step_index == last_step {
                self.add_edge(NodeRef::Agent(node_id), NodeRef::Sink);
            }

            self.insertion_log.push(InsertionRecord {
                task_id: workflow.task_id.clone(),
                step_index: op.step_index,
                node: node_id,
                created,
                similarity,
            });
            pairs.push((op.step_index, node_id));
            prev = Some(node_id);
        }
        Ok(record_assignment(workflow.task_id.clone(), pairs))
    }

    /// Ground-truth assignment for one inserted task, reconstructed from the
    /// insertion log.
    pub fn assignment_for(&self, task_id: &str) -> Option<GroundTruthAssignment> {
        let pairs: Vec<(u32, NodeId)> = self
            .insertion_log
            .iter()
            .filter(|r| r.task_id == task_id)
            .map(|r| (r.step_index, r.node))
            .collect();
        if pairs.is_empty() {
            None
        } else {
            Some(record_assignment(task_id.to_string(), pairs))
        }
    }

    /// Assignments for every inserted task.
    pub fn assignments(&self) -> BTreeMap<String, GroundTruthAssignment> {
        let mut out: BTreeMap<String, Vec<(u32, NodeId)>> = BTreeMap::new();
        for rec in &self.insertion_log {
            out.entry(rec.task_id.clone())
                .or_default()
                .push((rec.step_index, rec.node));
        }
        out.into_iter()
            .map(|(task_id, pairs)| (task_id.clone(), record_assignment(task_id, pairs)))
            .collect()
    }

    /// BFS hop distances from `from` to every reachable endpoint.
    pub fn distances_from(&self, from: NodeRef) -> BTreeMap<NodeRef, u32> {
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist.insert(from, 0);
        queue.push_back(from);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if let Some(nexts) = self.successors.get(&cur) {
                for &n in nexts {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(n) {
                        e.insert(d + 1);
                        queue.push_back(n);
                    }
                }
            }
        }
        dist
    }

    /// Directed hop distance, if any path exists.
    pub fn hop_distance(&self, from: NodeRef, to: NodeRef) -> Option<u32> {
        if from == to {
            return Some(0);
        }
        self.distances_from(from).get(&to).copied()
    }

    /// One shortest path from `from` to `to` (inclusive). Among equal-length
    /// paths the lexicographically smallest successor is taken at each hop.
    pub fn shortest_path(&self, from: NodeRef, to: NodeRef) -> Option<Vec<NodeRef>> {
        if from == to {
            return Some(vec![from]);
        }
        // Distances to `to` computed on the reverse graph, then walk forward
        // greedily decreasing the distance.
        let mut rev: BTreeMap<NodeRef, BTreeSet<NodeRef>> = BTreeMap::new();
        for (a, b) in &self.edges {
            rev.entry(*b).or_default().insert(*a);
        }
        let mut dist_to: BTreeMap<NodeRef, u32> = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist_to.insert(to, 0);
        queue.push_back(to);
        while let Some(cur) = queue.pop_front() {
            let d = dist_to[&cur];
            if let Some(preds) = rev.get(&cur) {
                for &p in preds {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist_to.entry(p) {
                        e.insert(d + 1);
                        queue.push_back(p);
                    }
                }
            }
        }
        dist_to.get(&from)?;
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = dist_to[&cur];
            let next = self
                .successors
                .get(&cur)?
                .iter()
                .copied()
                .find(|n| dist_to.get(n).is_some_and(|nd| *nd + 1 == d))?;
            path.push(next);
            cur = next;
        }
        Some(path)
    }

    /// Derive one node's profile: exemplar = medoid member, role = backend
    /// summary of the member texts, system prompt = role template.
    pub fn derive_node_profile(
        &mut self,
        id: NodeId,
        backend: &dyn ChatBackend,
        model_for_profiling: &str,
    ) -> Result<()> {
        let node = self.node_mut(id)?;
        node.exemplar_index = node.medoid_index()?;
        let member_list = node
            .members
            .iter()
            .map(|m| format!("- {}", m.text))
            .collect::<Vec<_>>()
            .join("\n");
        let req = ChatRequest {
            model: model_for_profiling.to_string(),
            system: ROLE_SUMMARY_SYSTEM.to_string(),
            user: member_list,
            temperature: 0.0,
            max_tokens: None,
            tag: "profile-role".into(),
        };
        let role = backend.chat(&req)?.text.trim().to_string();
        if role.is_empty() {
            return Err(FlowError::EmptyOutput(id.to_string()));
        }
        let prompt = system_prompt_for_role(&role);
        let node = self.node_mut(id)?;
        node.set_prompt_params(prompt, role);
        Ok(())
    }

    /// Profile every node in ascending id order.
    pub fn profile_all(
        &mut self,
        backend: &dyn ChatBackend,
        model_for_profiling: &str,
    ) -> Result<()> {
        for id in self.node_ids() {
            self.derive_node_profile(id, backend, model_for_profiling)?;
        }
        Ok(())
    }

    /// Recompute every exemplar (medoid) without touching roles. Used after
    /// prompt-update rounds, where membership is unchanged but the invariant
    /// is re-asserted.
    pub fn refresh_exemplars(&mut self) -> Result<()> {
        let ids = self.node_ids();
        for id in ids {
            let node = self.nodes.get_mut(&id).expect("listed id");
            node.exemplar_index = node.medoid_index()?;
        }
        Ok(())
    }

    /// Bring every stale cached role embedding up to date with the current
    /// profile. Must run after profiling or prompt updates, before routing.
    pub fn refresh_embeddings(
        &mut self,
        embedder: &dyn Embedder,
        cache: &mut EmbeddingCache,
    ) -> Result<()> {
        for node in self.nodes.values_mut() {
            if node.role.is_empty() {
                continue;
            }
            if node.embedded_version != Some(node.profile_version) {
                node.role_embedding = Some(cache.get_or_embed(embedder, &node.role)?);
                node.embedded_version = Some(node.profile_version);
            }
        }
        Ok(())
    }

    /// Structural invariants: no self-loops, edges touch known nodes, every
    /// agent node lies on some source-to-sink path, every member is logged.
    pub fn validate(&self) -> Result<()> {
        for (from, to) in &self.edges {
            if from == to {
                return Err(FlowError::UnknownNode(format!("self-loop at {from}")));
            }
            for end in [from, to] {
                if let NodeRef::Agent(id) = end {
                    self.node(*id)?;
                }
            }
        }
        let forward = self.distances_from(NodeRef::Source);
        let mut rev = FlowNetwork::new(self.delta, self.embedder_id.clone())?;
        for (a, b) in &self.edges {
            rev.add_edge(*b, *a);
        }
        let backward = rev.distances_from(NodeRef::Sink);
        for node in self.nodes.values() {
            let r = NodeRef::Agent(node.id);
            if !forward.contains_key(&r) || !backward.contains_key(&r) {
                return Err(FlowError::NoPathToSink(node.id.to_string()));
            }
            if node.members.is_empty() {
                return Err(FlowError::EmptyNode(node.id.to_string()));
            }
        }
        let logged: usize = self.insertion_log.len();
        let members: usize = self.nodes.values().map(|n| n.members.len()).sum();
        if logged != members {
            return Err(FlowError::ArtifactMismatch(format!(
                "insertion log has {logged} records but nodes hold {members} members"
            )));
        }
        Ok(())
    }

    // -- persistence ---------------------------------------------------------

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = NetworkFile {
            schema_version: SCHEMA_VERSION,
            delta: self.delta,
            embedder_id: self.embedder_id.clone(),
            next_id: self.next_id,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.iter().cloned().collect(),
            insertion_log: self.insertion_log.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| FlowError::io(path.display(), e))
    }

    /// Load and re-embed. The embedder must match the one the artifact was
    /// built with; member and role embeddings are reconstructed through the
    /// cache so the freshness invariant holds immediately after load.
    pub fn load(
        path: &std::path::Path,
        embedder: &dyn Embedder,
        cache: &mut EmbeddingCache,
    ) -> Result<FlowNetwork> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path.display(), e))?;
        let file: NetworkFile = serde_json::from_str(&text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(FlowError::ArtifactMismatch(format!(
                "network schema {} (expected {})",
                file.schema_version, SCHEMA_VERSION
            )));
        }
        if file.embedder_id != embedder.id() {
            return Err(FlowError::ArtifactMismatch(format!(
                "network was built with embedder `{}`, current is `{}`",
                file.embedder_id,
                embedder.id()
            )));
        }
        let mut net = FlowNetwork::new(file.delta, file.embedder_id)?;
        net.next_id = file.next_id;
        for mut node in file.nodes {
            node.member_embeddings = node
                .members
                .iter()
                .map(|m| cache.get_or_embed(embedder, &m.text))
                .collect::<Result<_>>()?;
            node.role_embedding = None;
            node.embedded_version = None;
            net.nodes.insert(node.id, node);
        }
        for (a, b) in file.edges {
            net.add_edge(a, b);
        }
        net.insertion_log = file.insertion_log;
        net.refresh_embeddings(embedder, cache)?;
        net.validate()?;
        Ok(net)
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    schema_version: u32,
    delta: f64,
    embedder_id: String,
    next_id: u32,
    nodes: Vec<AgentNode>,
    edges: Vec<(NodeRef, NodeRef)>,
    insertion_log: Vec<InsertionRecord>,
}

/// Build a network by inserting workflows in order. Returns the network plus
/// the per-task ground-truth assignments.
pub fn build_network(
    workflows: &[Workflow],
    delta: f64,
    embedder: &dyn Embedder,
    cache: &mut EmbeddingCache,
) -> Result<(FlowNetwork, Vec<GroundTruthAssignment>)> {
    if workflows.is_empty() {
        return Err(FlowError::EmptyNetwork);
    }
    let mut net = FlowNetwork::new(delta, embedder.id())?;
    let mut assignments = Vec::with_capacity(workflows.len());
    for wf in workflows {
        assignments.push(net.insert_workflow(wf, embedder, cache)?);
    }
    Ok((net, assignments))
}

/// Corrupt a seeded fraction of workflows: their operations are shuffled
/// (then renumbered to stay structurally valid) and `correct` drops to false.
/// Exactly `floor(rate * n)` workflows are corrupted.
pub fn inject_noise(workflows: &[Workflow], rate: f64, seed: u64) -> Result<Vec<Workflow>> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(FlowError::InvalidNoiseRate(rate));
    }
    let mut out = workflows.to_vec();
    let count = (rate * out.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..out.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(count);
    indices.sort_unstable();
    for idx in indices {
        let wf = &mut out[idx];
        wf.operations.shuffle(&mut rng);
        for (i, op) in wf.operations.iter_mut().enumerate() {
            op.step_index = i as u32 + 1;
        }
        wf.correct = false;
    }
    Ok(out)
}
