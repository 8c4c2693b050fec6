//! Routing policy: a small shared MLP scores each candidate node from a
//! 4-feature state tuple; a softmax over the per-candidate scores yields the
//! action distribution. Trained with REINFORCE (discounted returns, EMA
//! baseline, Adam ascent). Everything is f64 and fully deterministic under a
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, Embedding};
use crate::error::{FlowError, Result};
use crate::network::{FlowNetwork, NodeRef};

pub const INPUT_DIM: usize = 4;
pub const HIDDEN_DIM: usize = 128;

/// Policy state for one decision: the candidate set (canonical order) and one
/// feature tuple per candidate:
/// `[sim(step, role), sim(step, exemplar), sim(task, role), sim(task, exemplar)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub candidate_ids: Vec<NodeRef>,
    pub features: Vec<[f64; INPUT_DIM]>,
}

impl StateFeatures {
    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.candidate_ids.is_empty() {
            return Err(FlowError::NoCandidates);
        }
        if self.candidate_ids.len() != self.features.len() {
            return Err(FlowError::DimensionMismatch {
                left: self.candidate_ids.len(),
                right: self.features.len(),
            });
        }
        Ok(())
    }
}

/// Build the state for a routing decision. The sink is a legal candidate but
/// has no profile; it contributes the neutral all-zero tuple. Agent
/// candidates must have fresh profiles (role embedding current).
pub fn featurize(
    network: &FlowNetwork,
    plan_step: &Embedding,
    task: &Embedding,
    candidates: &[NodeRef],
) -> Result<StateFeatures> {
    if candidates.is_empty() {
        return Err(FlowError::NoCandidates);
    }
    let mut features = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let tuple = match cand {
            NodeRef::Sink => [0.0; INPUT_DIM],
            NodeRef::Source => {
                return Err(FlowError::UnknownNode(
                    "source is never a routing candidate".into(),
                ))
            }
            NodeRef::Agent(id) => {
                let node = network.node(*id)?;
                let role = node.role_embedding()?;
                let exemplar = node.exemplar_embedding()?;
                [
                    cosine_sim(plan_step, role)?,
                    cosine_sim(plan_step, exemplar)?,
                    cosine_sim(task, role)?,
                    cosine_sim(task, exemplar)?,
                ]
            }
        };
        features.push(tuple);
    }
    Ok(StateFeatures {
        candidate_ids: candidates.to_vec(),
        features,
    })
}

/// MLP parameters: 4 -> 128 (tanh) -> 1, shared across candidates.
/// Flattened order everywhere: `w1` row-major, `b1`, `w2`, `b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub seed: u64,
}

/// Total number of scalar parameters.
pub const N_PARAMS: usize = HIDDEN_DIM * INPUT_DIM + HIDDEN_DIM + HIDDEN_DIM + 1;

impl PolicyParams {
    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer,
    /// drawn in flattened order.
    pub fn init(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / (INPUT_DIM as f64).sqrt();
        let bound2 = 1.0 / (HIDDEN_DIM as f64).sqrt();
        let draw = |n: usize, bound: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
        };
        let w1 = draw(HIDDEN_DIM * INPUT_DIM, bound1, &mut rng);
        let b1 = draw(HIDDEN_DIM, bound1, &mut rng);
        let w2 = draw(HIDDEN_DIM, bound2, &mut rng);
        let b2 = rng.gen_range(-bound2..=bound2);
        PolicyParams {
            w1,
            b1,
            w2,
            b2,
            seed,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(N_PARAMS);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn from_flat(flat: &[f64], seed: u64) -> Result<PolicyParams> {
        if flat.len() != N_PARAMS {
            return Err(FlowError::MalformedCheckpoint(format!(
                "expected {N_PARAMS} weights, got {}",
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(HIDDEN_DIM * INPUT_DIM);
        let (b1, rest) = rest.split_at(HIDDEN_DIM);
        let (w2, rest) = rest.split_at(HIDDEN_DIM);
        Ok(PolicyParams {
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: rest[0],
            seed,
        })
    }

    /// Hidden activations and scalar score for one feature tuple.
    fn forward(&self, x: &[f64; INPUT_DIM]) -> (Vec<f64>, f64) {
        let mut hidden = Vec::with_capacity(HIDDEN_DIM);
        let mut score = self.b2;
        for k in 0..HIDDEN_DIM {
            let mut pre = self.b1[k];
            for (i, xi) in x.iter().enumerate() {
                pre += self.w1[k * INPUT_DIM + i] * xi;
            }
            let h = pre.tanh();
            score += self.w2[k] * h;
            hidden.push(h);
        }
        (hidden, score)
    }
}

/// Raw (pre-softmax) score per candidate.
pub fn score_candidates(params: &PolicyParams, state: &StateFeatures) -> Result<Vec<f64>> {
    state.check()?;
    let scores: Vec<f64> = state.features.iter().map(|x| params.forward(x).1).collect();
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(FlowError::NonFiniteScore(bad.to_string()));
    }
    Ok(scores)
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(scores: &[f64], index: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores[index] - log_sum
}

/// Action probabilities for a state.
pub fn action_distribution(params: &PolicyParams, state: &StateFeatures) -> Result<Vec<f64>> {
    Ok(softmax(&score_candidates(params, state)?))
}

/// Log-probability of one action.
pub fn log_prob(params: &PolicyParams, state: &StateFeatures, action: usize) -> Result<f64> {
    let scores = score_candidates(params, state)?;
    if action >= scores.len() {
        return Err(FlowError::ActionOutOfRange {
            index: action,
            candidates: scores.len(),
        });
    }
    Ok(log_softmax_at(&scores, action))
}

/// Sample an action; returns `(index, log_prob)`.
pub fn sample_action(
    params: &PolicyParams,
    state: &StateFeatures,
    rng: &mut impl Rng,
) -> Result<(usize, f64)> {
    let scores = score_candidates(params, state)?;
    let probs = softmax(&scores);
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut chosen = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            chosen = i;
            break;
        }
    }
    Ok((chosen, log_softmax_at(&scores, chosen)))
}

/// Highest-probability action; ties break to the lowest index.
pub fn greedy_action(params: &PolicyParams, state: &StateFeatures) -> Result<usize> {
    let scores = score_candidates(params, state)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Gradient of `log pi(action | state)` with respect to the flattened
/// parameters. For candidate scores f_j and probabilities p_j, the chain is
/// `d log pi / d f_j = [j == action] - p_j`, back-propagated through each
/// candidate's forward pass of the shared MLP.
pub fn log_prob_grad(
    params: &PolicyParams,
    state: &StateFeatures,
    action: usize,
) -> Result<Vec<f64>> {
    state.check()?;
    if action >= state.len() {
        return Err(FlowError::ActionOutOfRange {
            index: action,
            candidates: state.len(),
        });
    }
    let mut forwards = Vec::with_capacity(state.len());
    let mut scores = Vec::with_capacity(state.len());
    for x in &state.features {
        let (hidden, score) = params.forward(x);
        forwards.push(hidden);
        scores.push(score);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FlowError::NonFiniteScore("in gradient".into()));
    }
    let probs = softmax(&scores);

    let w1_len = HIDDEN_DIM * INPUT_DIM;
    let mut grad = vec![0.0f64; N_PARAMS];
    for (j, hidden) in forwards.iter().enumerate() {
        let coef = if j == action {
            1.0 - probs[j]
        } else {
            -probs[j]
        };
        if coef == 0.0 {
            continue;
        }
        let x = &state.features[j];
        for k in 0..HIDDEN_DIM {
            let h = hidden[k];
            // d score / d w2[k] = h; d score / d b2 = 1.
            grad[w1_len + HIDDEN_DIM + k] += coef * h;
            let dpre = coef * params.w2[k] * (1.0 - h * h);
            grad[w1_len + k] += dpre; // b1[k]
            for (i, xi) in x.iter().enumerate() {
                grad[k * INPUT_DIM + i] += dpre * xi;
            }
        }
        grad[N_PARAMS - 1] += coef; // b2
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FlowError::NonFiniteGradient("log_prob_grad".into()));
    }
    Ok(grad)
}

/// Discounted suffix returns: `R_i = sum_{t >= i} gamma^(t-i) r_t`.
pub fn returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(FlowError::GammaOutOfRange(gamma));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// One decision made by the policy during an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: StateFeatures,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
}

/// One sampled episode: the policy decisions plus the outcome at the sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<TrajectoryStep>,
    pub final_answer: String,
    pub final_score: f64,
}

/// Adam state for ascent on the REINFORCE objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; N_PARAMS],
            v: vec![0.0; N_PARAMS],
        }
    }

    /// Ascend along `grad`.
    fn apply(&mut self, params: &mut PolicyParams, grad: &[f64]) -> Result<()> {
        self.step += 1;
        let mut flat = params.to_flat();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..N_PARAMS {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            flat[i] += self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(FlowError::NonFiniteGradient("adam step".into()));
        }
        *params = PolicyParams::from_flat(&flat, params.seed)?;
        Ok(())
    }
}

/// Exponential-moving-average baseline over episode returns. With
/// `decay == 1.0` the baseline stays frozen at its initial value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Baseline {
        Baseline { value: 0.0, decay }
    }

    pub fn update(&mut self, episode_return: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * episode_return;
    }
}

/// Summary of one policy update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub grad_norm: f64,
    pub baseline: f64,
}

/// One REINFORCE step over a batch of trajectories: ascends
/// `sum_i grad log pi(a_i|s_i) * (R_i - b)` via Adam, then feeds each
/// episode's return into the EMA baseline (in batch order).
pub fn reinforce_update(
    params: &mut PolicyParams,
    opt: &mut AdamState,
    baseline: &mut Baseline,
    trajectories: &[Trajectory],
    gamma: f64,
) -> Result<UpdateStats> {
    let mut grad = vec![0.0f64; N_PARAMS];
    let mut episode_returns = Vec::new();
    let b = baseline.value;
    for traj in trajectories {
        if traj.steps.is_empty() {
            continue;
        }
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        let rets = returns(&rewards, gamma)?;
        episode_returns.push(rets[0]);
        for (step, ret) in traj.steps.iter().zip(&rets) {
            let advantage = ret - b;
            if advantage == 0.0 {
                continue;
            }
            let g = log_prob_grad(params, &step.state, step.action)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi * advantage;
            }
        }
    }
    if episode_returns.is_empty() {
        return Ok(UpdateStats {
            episodes: 0,
            mean_return: 0.0,
            grad_norm: 0.0,
            baseline: baseline.value,
        });
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    opt.apply(params, &grad)?;
    for ret in &episode_returns {
        baseline.update(*ret);
    }
    Ok(UpdateStats {
        episodes: episode_returns.len(),
        mean_return: episode_returns.iter().sum::<f64>() / episode_returns.len() as f64,
        grad_norm,
        baseline: baseline.value,
    })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Everything needed to resume or reproduce training, flat and plain-text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub gamma: f64,
    pub lr: f64,
    pub step: u64,
    pub weights: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub baseline_value: f64,
    pub baseline_decay: f64,
}

impl Checkpoint {
    pub fn capture(
        params: &PolicyParams,
        opt: &AdamState,
        baseline: &Baseline,
        gamma: f64,
    ) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            input_dim: INPUT_DIM,
            hidden_dim: HIDDEN_DIM,
            seed: params.seed,
            gamma,
            lr: opt.lr,
            step: opt.step,
            weights: params.to_flat(),
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
            baseline_value: baseline.value,
            baseline_decay: baseline.decay,
        }
    }

    pub fn restore(&self) -> Result<(PolicyParams, AdamState, Baseline, f64)> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(FlowError::MalformedCheckpoint(format!(
                "schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.input_dim != INPUT_DIM || self.hidden_dim != HIDDEN_DIM {
            return Err(FlowError::MalformedCheckpoint(format!(
                "shape {}x{} (expected {INPUT_DIM}x{HIDDEN_DIM})",
                self.input_dim, self.hidden_dim
            )));
        }
        let params = PolicyParams::from_flat(&self.weights, self.seed)?;
        if self.adam_m.len() != N_PARAMS || self.adam_v.len() != N_PARAMS {
            return Err(FlowError::MalformedCheckpoint(
                "optimizer state length mismatch".into(),
            ));
        }
        let opt = AdamState {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: self.step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        };
        let baseline = Baseline {
            value: self.baseline_value,
            decay: self.baseline_decay,
        };
        Ok((params, opt, baseline, self.gamma))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| FlowError::io(path.display(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path.display(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NodeId;

    fn state(features: Vec<[f64; 4]>) -> StateFeatures {
        StateFeatures {
            candidate_ids: (0..features.len())
                .map(|i| NodeRef::Agent(NodeId(i as u32 + 1)))
                .collect(),
            features,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = PolicyParams::init(7);
        let b = PolicyParams::init(7);
        assert_eq!(a, b);
        let c = PolicyParams::init(8);
        assert_ne!(a, c);
        assert!(a.w1.iter().all(|w| w.abs() <= 0.5 + 1e-12));
        assert!(a
            .w2
            .iter()
            .all(|w| w.abs() <= 1.0 / (HIDDEN_DIM as f64).sqrt() + 1e-12));
        assert_eq!(a.to_flat().len(), N_PARAMS);
    }

    #[test]
    fn flat_roundtrip() {
        let p = PolicyParams::init(3);
        let q = PolicyParams::from_flat(&p.to_flat(), 3).unwrap();
        assert_eq!(p, q);
        assert!(PolicyParams::from_flat(&[0.0; 5], 0).is_err());
    }

    #[test]
    fn softmax_is_a_distribution() {
        let probs = softmax(&[1.0, 2.0, 3.0]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.windows(2).all(|w| w[0] < w[1]));
        // Equal scores -> exactly uniform.
        let uniform = softmax(&[4.2, 4.2, 4.2, 4.2]);
        for p in uniform {
            assert!((p - 0.25).abs() < 1e-12);
        }
        // Shift invariance.
        let shifted = softmax(&[1001.0, 1002.0, 1003.0]);
        for (a, b) in probs.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_score_identically() {
        let params = PolicyParams::init(1);
        let s = state(vec![
            [0.1, 0.2, 0.3, 0.4],
            [0.1, 0.2, 0.3, 0.4],
            [0.9, 0.1, 0.0, 0.2],
        ]);
        let scores = score_candidates(&params, &s).unwrap();
        assert_eq!(
            scores[0], scores[1],
            "shared MLP must be permutation consistent"
        );
        let probs = action_distribution(&params, &s).unwrap();
        assert!((probs[0] - probs[1]).abs() < 1e-15);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_index() {
        let params = PolicyParams::init(1);
        let s = state(vec![[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]]);
        assert_eq!(greedy_action(&params, &s).unwrap(), 0);
    }

    #[test]
    fn sampling_tracks_the_distribution() {
        let params = PolicyParams::init(11);
        let s = state(vec![[0.9, 0.8, 0.7, 0.6], [-0.9, -0.8, -0.7, -0.6]]);
        let probs = action_distribution(&params, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            let (a, lp) = sample_action(&params, &s, &mut rng).unwrap();
            counts[a] += 1;
            assert!((lp - probs[a].ln()).abs() < 1e-12);
        }
        let freq0 = counts[0] as f64 / n as f64;
        assert!(
            (freq0 - probs[0]).abs() < 0.03,
            "freq {freq0} vs p {}",
            probs[0]
        );
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let mut params = PolicyParams::init(0);
        params.b2 = f64::NAN;
        let s = state(vec![[0.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(
            score_candidates(&params, &s),
            Err(FlowError::NonFiniteScore(_))
        ));
    }

    #[test]
    fn returns_match_hand_computation() {
        let r = returns(&[1.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!(r, vec![1.25, 0.5, 1.0]);
        // gamma = 1 recovers plain suffix sums.
        let undiscounted = returns(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(undiscounted, vec![6.0, 5.0, 3.0]);
        assert!(matches!(
            returns(&[1.0], 1.5),
            Err(FlowError::GammaOutOfRange(_))
        ));
        assert!(matches!(
            returns(&[1.0], -0.1),
            Err(FlowError::GammaOutOfRange(_))
        ));
    }

    /// Central-difference check of the analytic gradient on a few random
    /// states. The exhaustive version lives in the acceptance suite.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..5 {
            let params = PolicyParams::init(case);
            let n_cands = 2 + (case as usize % 4);
            let features: Vec<[f64; 4]> = (0..n_cands)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let s = state(features);
            let action = case as usize % n_cands;
            let analytic = log_prob_grad(&params, &s, action).unwrap();
            let eps = 1e-5;
            let flat = params.to_flat();
            for &idx in &[0usize, 137, 512, 600, N_PARAMS - 1] {
                let mut plus = flat.clone();
                plus[idx] += eps;
                let mut minus = flat.clone();
                minus[idx] -= eps;
                let lp_plus =
                    log_prob(&PolicyParams::from_flat(&plus, 0).unwrap(), &s, action).unwrap();
                let lp_minus =
                    log_prob(&PolicyParams::from_flat(&minus, 0).unwrap(), &s, action).unwrap();
                let numeric = (lp_plus - lp_minus) / (2.0 * eps);
                let denom = analytic[idx].abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic[idx] - numeric).abs() / denom < 1e-6,
                    "case {case} param {idx}: analytic {} vs numeric {numeric}",
                    analytic[idx]
                );
            }
        }
    }

    fn bandit_trajectory(state: &StateFeatures, action: usize, reward: f64, lp: f64) -> Trajectory {
        Trajectory {
            task_id: "bandit".into(),
            steps: vec![TrajectoryStep {
                state: state.clone(),
                action,
                log_prob: lp,
                reward,
            }],
            final_answer: String::new(),
            final_score: reward,
        }
    }

    /// Single-state two-armed bandit, reward 1 for arm 0 only, frozen
    /// baseline b = 0: greedy must select arm 0 after 200 updates, and the
    /// probability of arm 0 must trend upward.
    #[test]
    fn bandit_converges_with_frozen_baseline() {
        let s = state(vec![[0.8, 0.6, 0.4, 0.2], [-0.3, 0.5, -0.2, 0.1]]);
        let mut params = PolicyParams::init(42);
        let mut opt = AdamState::new(0.01);
        let mut baseline = Baseline::new(1.0); // frozen at 0
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut probs_history = Vec::new();
        for _ in 0..200 {
            let (action, lp) = sample_action(&params, &s, &mut rng).unwrap();
            let reward = if action == 0 { 1.0 } else { 0.0 };
            let traj = bandit_trajectory(&s, action, reward, lp);
            reinforce_update(&mut params, &mut opt, &mut baseline, &[traj], 0.95).unwrap();
            assert_eq!(baseline.value, 0.0, "decay 1.0 freezes the baseline");
            probs_history.push(action_distribution(&params, &s).unwrap()[0]);
        }
        assert_eq!(greedy_action(&params, &s).unwrap(), 0);
        let last = *probs_history.last().unwrap();
        assert!(last > 0.9, "p(arm 0) after training: {last}");
        // Monotone trend with slack: over any 50-update window the
        // probability of the rewarded arm does not decrease by more than 0.02.
        for (i, w) in probs_history.windows(50).enumerate() {
            assert!(w[49] >= w[0] - 0.02, "window at {i}: {} -> {}", w[0], w[49]);
        }
    }

    #[test]
    fn ema_baseline_updates_after_the_gradient_step() {
        let s = state(vec![[0.1, 0.1, 0.1, 0.1], [0.2, 0.2, 0.2, 0.2]]);
        let mut params = PolicyParams::init(0);
        let mut opt = AdamState::new(0.001);
        let mut baseline = Baseline::new(0.9);
        let lp = log_prob(&params, &s, 0).unwrap();
        let traj = bandit_trajectory(&s, 0, 1.0, lp);
        reinforce_update(
            &mut params,
            &mut opt,
            &mut baseline,
            std::slice::from_ref(&traj),
            0.95,
        )
        .unwrap();
        assert!((baseline.value - 0.1).abs() < 1e-12, "0.9*0 + 0.1*1");
        reinforce_update(&mut params, &mut opt, &mut baseline, &[traj], 0.95).unwrap();
        assert!((baseline.value - (0.9 * 0.1 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn update_is_deterministic() {
        let s = state(vec![[0.3, -0.2, 0.5, 0.0], [0.1, 0.9, -0.4, 0.2]]);
        let run = || {
            let mut params = PolicyParams::init(5);
            let mut opt = AdamState::new(0.001);
            let mut baseline = Baseline::new(0.9);
            for i in 0..10 {
                let action = i % 2;
                let lp = log_prob(&params, &s, action).unwrap();
                let traj = bandit_trajectory(&s, action, (i % 3) as f64, lp);
                reinforce_update(&mut params, &mut opt, &mut baseline, &[traj], 0.95).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let params = PolicyParams::init(7);
        let mut opt = AdamState::new(0.001);
        let mut baseline = Baseline::new(0.9);
        let s = state(vec![[0.3, 0.1, -0.5, 0.7], [0.2, -0.2, 0.4, 0.0]]);
        let mut p = params.clone();
        let lp = log_prob(&p, &s, 1).unwrap();
        let traj = bandit_trajectory(&s, 1, 0.5, lp);
        reinforce_update(&mut p, &mut opt, &mut baseline, &[traj], 0.95).unwrap();
        let ckpt = Checkpoint::capture(&p, &opt, &baseline, 0.95);
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.json");
        let path_b = dir.path().join("b.json");
        ckpt.save(&path_a).unwrap();
        let loaded = Checkpoint::load(&path_a).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap(),
            "checkpoint serialization must be byte-stable"
        );
        let (rp, ro, rb, g) = loaded.restore().unwrap();
        assert_eq!(rp, p);
        assert_eq!(ro.m, opt.m);
        assert_eq!(rb.value, baseline.value);
        assert_eq!(g, 0.95);
    }
}
