//! Synthetic corpus and feature builders shared by the benchmarks.

use flownet_core::policy::{self, StateFeatures, Trajectory, TrajectoryStep};
use flownet_core::{NodeId, NodeRef, PolicyParams, Workflow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distinct operation phrasings; repeats of one phrase cluster together
/// while different phrases stay apart under the hash embedder.
const STEP_VOCAB: &[&str] = &[
    "parse the input statement into symbols",
    "normalize units across all measurements",
    "compute the arithmetic subtotal exactly",
    "verify the boundary conditions hold",
    "draft a concise explanation paragraph",
    "translate the summary into formal notation",
    "rank candidate hypotheses by evidence",
    "extract named entities from the passage",
    "simplify the resulting expression fully",
    "estimate the error margin numerically",
    "assemble the final report layout",
    "cross-check citations against sources",
];

/// Workflows over a bounded step vocabulary so similarity clustering has
/// genuine merge opportunities without collapsing to a single node.
pub fn synthetic_workflows(
    count: usize,
    steps_per: usize,
    vocab: usize,
    seed: u64,
) -> Vec<Workflow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let steps = (0..steps_per)
                .map(|_| {
                    let topic = rng.gen_range(0..vocab);
                    let phrase = STEP_VOCAB[topic % STEP_VOCAB.len()];
                    let text = if topic < STEP_VOCAB.len() {
                        phrase.to_string()
                    } else {
                        format!("{phrase} pass {}", topic / STEP_VOCAB.len())
                    };
                    (text, "default".to_string())
                })
                .collect();
            Workflow::from_steps(format!("task-{i}"), steps).expect("valid synthetic workflow")
        })
        .collect()
}

/// A random decision state with `candidates` agent candidates.
pub fn random_features(candidates: usize, rng: &mut impl Rng) -> StateFeatures {
    StateFeatures {
        candidate_ids: (0..candidates)
            .map(|i| NodeRef::Agent(NodeId(i as u32)))
            .collect(),
        features: (0..candidates)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect(),
    }
}

/// A batch of plausible trajectories (sampled actions, real log-probs,
/// random rewards) for exercising the policy update.
pub fn synthetic_trajectories(
    params: &PolicyParams,
    episodes: usize,
    steps_per: usize,
    candidates: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|i| {
            let steps = (0..steps_per)
                .map(|_| {
                    let state = random_features(candidates, &mut rng);
                    let (action, log_prob) =
                        policy::sample_action(params, &state, &mut rng).expect("valid state");
                    TrajectoryStep {
                        state,
                        action,
                        log_prob,
                        reward: rng.gen_range(0.0..1.0),
                    }
                })
                .collect();
            Trajectory {
                task_id: format!("bench-{i}"),
                steps,
                final_answer: String::new(),
                final_score: rng.gen_range(0.0..1.0),
            }
        })
        .collect()
}
