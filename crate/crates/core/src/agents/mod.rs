//! Exercise-selection policies and episode drivers.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed;
use crate::sim::{step_reward, EpisodeTrace, SimError, SimState, Simulator};

pub mod ppo;

pub use ppo::{
    clipped_surrogate, policy_feature_len, policy_features, softmax_probs, softmax_select, train_agent, AgentConfig,
    Environment, PolicyParams, SimEnvironment, SoftmaxPolicy, TrainingRun,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no candidate exercises")]
    NoCandidates,
    #[error("non-finite policy parameters at iteration {0}")]
    DivergenceDetected(usize),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("policy snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Chooses the next exercise among the remaining candidates.
pub trait Policy: Sync {
    fn name(&self) -> &str;

    fn select(
        &self,
        sim: &Simulator,
        state: &SimState,
        candidates: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<String, AgentError>;
}

/// First exercise of the historical order still available; once the order
/// is exhausted, the lowest-id candidate.
pub fn replay_policy(candidates: &[String], historical_order: &[String]) -> Result<String, AgentError> {
    if candidates.is_empty() {
        return Err(AgentError::NoCandidates);
    }
    let chosen = historical_order
        .iter()
        .find(|e| candidates.contains(e))
        .or_else(|| candidates.iter().min())
        .expect("non-empty");
    Ok(chosen.clone())
}

/// Candidate maximizing the one-step reward `step_reward(ŝ, E[p_dropout])`;
/// ties go to the lowest id.
pub fn greedy_policy(sim: &Simulator, state: &SimState, candidates: &[String]) -> Result<String, AgentError> {
    greedy_by(candidates, |c| {
        let (s, p) = sim.expected_outcome(state, c)?;
        Ok(step_reward(s, p, sim.reward_config()))
    })
}

/// Argmax of `value` over candidates in ascending id order, first maximum wins.
pub fn greedy_by<F>(candidates: &[String], mut value: F) -> Result<String, AgentError>
where
    F: FnMut(&str) -> Result<f64, AgentError>,
{
    let mut sorted: Vec<&String> = candidates.iter().collect();
    sorted.sort();
    let mut best: Option<(&String, f64)> = None;
    for c in sorted {
        let v = value(c)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c.clone()).ok_or(AgentError::NoCandidates)
}

/// Replays each user's recorded exercise order.
pub struct ReplayPolicy {
    orders: BTreeMap<String, Vec<String>>,
}

impl ReplayPolicy {
    pub fn new(orders: BTreeMap<String, Vec<String>>) -> Self {
        ReplayPolicy { orders }
    }
}

impl Policy for ReplayPolicy {
    fn name(&self) -> &str {
        "replay"
    }

    fn select(&self, _: &Simulator, state: &SimState, candidates: &[String], _: &mut ChaCha8Rng) -> Result<String, AgentError> {
        let order = self.orders.get(&state.user_id).map(Vec::as_slice).unwrap_or(&[]);
        replay_policy(candidates, order)
    }
}

pub struct GreedyPolicy;

impl Policy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn select(&self, sim: &Simulator, state: &SimState, candidates: &[String], _: &mut ChaCha8Rng) -> Result<String, AgentError> {
        greedy_policy(sim, state, candidates)
    }
}

/// Run one episode to completion. Environment randomness comes from `seed`
/// and policy randomness from a separate substream of it, so two policies
/// run with the same seed see the same user and the same outcome stream
/// for as long as their choices agree.
pub fn run_episode(
    sim: &Simulator,
    policy: &dyn Policy,
    episode: usize,
    user_id: &str,
    workbook_id: &str,
    seed: u64,
) -> Result<EpisodeTrace, AgentError> {
    let mut state = sim.reset(user_id, workbook_id, seed)?;
    let mut policy_rng = seed::indexed_rng(seed, 1);
    let mut steps = Vec::new();
    while !state.done {
        let candidates = state.candidates();
        let choice = policy.select(sim, &state, &candidates, &mut policy_rng)?;
        debug_assert!(candidates.contains(&choice));
        steps.push(sim.step(&mut state, &choice)?);
    }
    Ok(EpisodeTrace {
        episode,
        user_id: user_id.to_string(),
        steps,
        cumulative_reward: state.cumulative_reward,
    })
}
