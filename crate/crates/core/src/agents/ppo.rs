//! Clipped-surrogate policy gradient with a linear softmax policy.
//!
//! The policy scores each candidate with `θ · φ(state, candidate) / T` and
//! samples from the softmax over candidates. Each iteration collects a
//! batch of episodes, computes discounted reward-to-go minus the batch mean
//! (normalized to unit variance) as the advantage, and takes
//! `update_epochs` gradient-ascent steps on the mean clipped surrogate
//!
//! ```text
//! L(θ) = mean_t min(r_t A_t, clip(r_t, 1 - ε, 1 + ε) A_t),
//! r_t = π_θ(a_t | s_t) / π_old(a_t | s_t)
//! ```

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AgentError, Policy};
use crate::seed;
use crate::sim::{SimState, Simulator};

pub const POLICY_SNAPSHOT_VERSION: &str = "tutorsim-policy/1";

/// Weights of the linear policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicySnapshot {
    version: String,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(len: usize) -> Self {
        PolicyParams { theta: vec![0.0; len] }
    }

    fn logit(&self, phi: &[f64], temperature: f64) -> f64 {
        self.theta.iter().zip(phi).map(|(t, f)| t * f).sum::<f64>() / temperature
    }

    pub fn to_json(&self) -> Result<String, AgentError> {
        Ok(serde_json::to_string_pretty(&PolicySnapshot {
            version: POLICY_SNAPSHOT_VERSION.to_string(),
            theta: self.theta.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, AgentError> {
        let snap: PolicySnapshot = serde_json::from_str(s)?;
        if snap.version != POLICY_SNAPSHOT_VERSION {
            return Err(AgentError::Snapshot(format!("unsupported version {:?}", snap.version)));
        }
        if snap.theta.iter().any(|v| !v.is_finite()) {
            return Err(AgentError::Snapshot("non-finite weight".into()));
        }
        Ok(PolicyParams { theta: snap.theta })
    }
}

/// Length of [`policy_features`] for latent dimension `l`.
pub fn policy_feature_len(latent: usize) -> usize {
    4 * latent + 3
}

/// `[u ⊙ e | e | m · e | progress · e | ŝ | (ŝ - s_target)² | E[p_dropout]]`
/// for user embedding `u`, candidate embedding `e`, mean windowed score `m`,
/// `progress = step_count / workbook_size`, and the environment's success
/// and expected dropout predictions for the candidate.
///
/// Every block varies with the candidate, since anything constant across
/// candidates cancels in the softmax.
pub fn policy_features(sim: &Simulator, state: &SimState, candidate: &str) -> Result<Vec<f64>, AgentError> {
    let cand = sim
        .model()
        .exercise_vector(candidate)
        .map_err(crate::sim::SimError::from)?;
    let (score, p_dropout) = sim.expected_outcome(state, candidate)?;
    let m = state.mean_window_score();
    let progress = state.step_count as f64 / state.workbook_size as f64;
    let mut phi = Vec::with_capacity(policy_feature_len(cand.len()));
    phi.extend(state.user_embedding.iter().zip(cand).map(|(u, e)| u * e));
    phi.extend_from_slice(cand);
    phi.extend(cand.iter().map(|e| m * e));
    phi.extend(cand.iter().map(|e| progress * e));
    phi.push(score);
    phi.push((score - sim.reward_config().s_target).powi(2));
    phi.push(p_dropout);
    Ok(phi)
}

/// Softmax over candidate logits, computed with max-subtraction.
pub fn softmax_probs(params: &PolicyParams, features: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = features.iter().map(|f| params.logit(f, temperature)).collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(params: &PolicyParams, features: &[Vec<f64>], temperature: f64, action: usize) -> f64 {
    let logits: Vec<f64> = features.iter().map(|f| params.logit(f, temperature)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[action] - lse
}

/// Sample a candidate index; returns it with its log-probability.
pub fn softmax_select(
    params: &PolicyParams,
    features: &[Vec<f64>],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64), AgentError> {
    if features.is_empty() {
        return Err(AgentError::NoCandidates);
    }
    let probs = softmax_probs(params, features, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut choice = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            choice = i;
            break;
        }
    }
    Ok((choice, log_softmax_at(params, features, temperature, choice)))
}

/// `min(ratio · A, clip(ratio, 1 - ε, 1 + ε) · A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub iterations: usize,
    pub episodes_per_batch: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    pub gamma: f64,
    /// Gradient-ascent steps on the surrogate per collected batch.
    pub update_epochs: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            iterations: 300,
            episodes_per_batch: 32,
            epsilon: 0.2,
            learning_rate: 0.05,
            temperature: 1.0,
            gamma: 0.99,
            update_epochs: 4,
            seed: 0,
        }
    }
}

impl AgentConfig {
    fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if self.episodes_per_batch == 0 {
            return bad("episodes_per_batch must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        Ok(())
    }
}

/// An episodic environment over named discrete actions.
pub trait Environment: Sync {
    type State: Send;

    fn feature_len(&self) -> usize;

    /// Start an episode; all episode randomness derives from `seed`.
    fn reset(&self, seed: u64) -> Result<Self::State, AgentError>;

    fn candidates(&self, state: &Self::State) -> Vec<String>;

    fn features(&self, state: &Self::State, candidate: &str) -> Result<Vec<f64>, AgentError>;

    /// Apply an action; returns `(reward, done)`.
    fn step(&self, state: &mut Self::State, candidate: &str) -> Result<(f64, bool), AgentError>;
}

/// The simulator as a training environment: each episode draws one
/// (user, workbook) start uniformly from `starts`.
pub struct SimEnvironment<'a> {
    sim: &'a Simulator,
    starts: Vec<(String, String)>,
}

impl<'a> SimEnvironment<'a> {
    pub fn new(sim: &'a Simulator, starts: Vec<(String, String)>) -> Result<Self, AgentError> {
        if starts.is_empty() {
            return Err(AgentError::InvalidConfig("no episode starts".into()));
        }
        Ok(SimEnvironment { sim, starts })
    }

    pub fn start_for(&self, seed: u64) -> &(String, String) {
        let mut rng = seed::indexed_rng(seed, 2);
        &self.starts[rng.random_range(0..self.starts.len())]
    }
}

impl Environment for SimEnvironment<'_> {
    type State = SimState;

    fn feature_len(&self) -> usize {
        policy_feature_len(self.sim.model().latent_dim())
    }

    fn reset(&self, seed: u64) -> Result<SimState, AgentError> {
        let (u, wb) = self.start_for(seed);
        Ok(self.sim.reset(u, wb, seed)?)
    }

    fn candidates(&self, state: &SimState) -> Vec<String> {
        state.candidates()
    }

    fn features(&self, state: &SimState, candidate: &str) -> Result<Vec<f64>, AgentError> {
        policy_features(self.sim, state, candidate)
    }

    fn step(&self, state: &mut SimState, candidate: &str) -> Result<(f64, bool), AgentError> {
        let out = self.sim.step(state, candidate)?;
        Ok((out.reward, state.done))
    }
}

/// One decision: the features of every candidate, the chosen index, its
/// log-probability under the collecting policy, and the reward received.
#[derive(Clone, Debug)]
pub struct Transition {
    pub features: Vec<Vec<f64>>,
    pub action: usize,
    pub old_log_prob: f64,
    pub reward: f64,
}

/// A transition with its advantage, ready for the surrogate.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

fn episode_seed(config: &AgentConfig, iteration: usize, episode: usize) -> u64 {
    seed::mix(seed::mix(config.seed, iteration as u64), episode as u64)
}

fn collect_episode<E: Environment>(
    env: &E,
    params: &PolicyParams,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Transition>, AgentError> {
    let mut state = env.reset(seed)?;
    let mut rng = seed::indexed_rng(seed, 1);
    let mut out = Vec::new();
    loop {
        let candidates = env.candidates(&state);
        let features = candidates
            .iter()
            .map(|c| env.features(&state, c))
            .collect::<Result<Vec<_>, _>>()?;
        let (action, old_log_prob) = softmax_select(params, &features, temperature, &mut rng)?;
        let (reward, done) = env.step(&mut state, &candidates[action])?;
        out.push(Transition {
            features,
            action,
            old_log_prob,
            reward,
        });
        if done {
            return Ok(out);
        }
    }
}

/// Collect `episodes_per_batch` episodes in parallel; results are in
/// episode-index order regardless of scheduling.
pub fn collect_batch<E: Environment>(
    env: &E,
    params: &PolicyParams,
    config: &AgentConfig,
    iteration: usize,
) -> Result<Vec<Vec<Transition>>, AgentError> {
    (0..config.episodes_per_batch)
        .into_par_iter()
        .map(|ep| collect_episode(env, params, config.temperature, episode_seed(config, iteration, ep)))
        .collect()
}

/// Discounted reward-to-go minus the batch mean, scaled to unit variance.
pub fn advantages(episodes: &[Vec<Transition>], gamma: f64) -> Vec<Sample> {
    let mut samples = Vec::new();
    let mut returns = Vec::new();
    for ep in episodes {
        let mut g = 0.0;
        let mut rtg = vec![0.0; ep.len()];
        for (i, t) in ep.iter().enumerate().rev() {
            g = t.reward + gamma * g;
            rtg[i] = g;
        }
        for (t, g) in ep.iter().zip(rtg) {
            returns.push(g);
            samples.push(Sample {
                features: t.features.clone(),
                action: t.action,
                old_log_prob: t.old_log_prob,
                advantage: 0.0,
            });
        }
    }
    if returns.is_empty() {
        return samples;
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    for (s, g) in samples.iter_mut().zip(returns) {
        s.advantage = if std > 1e-12 { (g - mean) / std } else { 0.0 };
    }
    samples
}

/// Mean clipped surrogate over a batch.
pub fn surrogate_objective(params: &PolicyParams, samples: &[Sample], epsilon: f64, temperature: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let ratio = (log_softmax_at(params, &s.features, temperature, s.action) - s.old_log_prob).exp();
            clipped_surrogate(ratio, s.advantage, epsilon)
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Analytic gradient of [`surrogate_objective`]. A sample contributes
/// `A · r · ∇ log π(a)` while the unclipped term is the minimum, and
/// nothing once clipping is active.
pub fn surrogate_gradient(params: &PolicyParams, samples: &[Sample], epsilon: f64, temperature: f64) -> Vec<f64> {
    let dim = params.theta.len();
    let mut grad = vec![0.0; dim];
    for s in samples {
        let probs = softmax_probs(params, &s.features, temperature);
        let ratio = (probs[s.action].ln() - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        if unclipped > ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * s.advantage {
            continue;
        }
        let scale = s.advantage * ratio / temperature;
        for k in 0..dim {
            let expected: f64 = probs.iter().zip(&s.features).map(|(p, f)| p * f[k]).sum();
            grad[k] += scale * (s.features[s.action][k] - expected);
        }
    }
    let n = samples.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub params: PolicyParams,
    pub curve: Vec<CurvePoint>,
}

impl TrainingRun {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iteration,mean_return,std_return\n");
        for p in &self.curve {
            writeln!(s, "{},{},{}", p.iteration, p.mean_return, p.std_return).unwrap();
        }
        s
    }
}

pub fn train_agent<E: Environment>(
    env: &E,
    params: PolicyParams,
    config: &AgentConfig,
) -> Result<TrainingRun, AgentError> {
    config.validate()?;
    if params.theta.len() != env.feature_len() {
        return Err(AgentError::InvalidConfig(format!(
            "policy has {} weights, environment features have length {}",
            params.theta.len(),
            env.feature_len()
        )));
    }
    let mut params = params;
    let mut curve = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let episodes = collect_batch(env, &params, config, iteration)?;
        let returns: Vec<f64> = episodes
            .iter()
            .map(|ep| ep.iter().map(|t| t.reward).sum())
            .collect();
        let n = returns.len() as f64;
        let mean_return = returns.iter().sum::<f64>() / n;
        let std_return = (returns.iter().map(|r| (r - mean_return).powi(2)).sum::<f64>() / n).sqrt();
        curve.push(CurvePoint {
            iteration,
            mean_return,
            std_return,
        });

        let samples = advantages(&episodes, config.gamma);
        for _ in 0..config.update_epochs {
            let grad = surrogate_gradient(&params, &samples, config.epsilon, config.temperature);
            for (t, g) in params.theta.iter_mut().zip(&grad) {
                *t += config.learning_rate * g;
            }
        }
        if params.theta.iter().any(|t| !t.is_finite()) {
            return Err(AgentError::DivergenceDetected(iteration));
        }
    }
    Ok(TrainingRun { params, curve })
}

/// The trained softmax policy, either sampling or taking the argmax.
pub struct SoftmaxPolicy {
    pub params: PolicyParams,
    pub temperature: f64,
    pub sample: bool,
}

impl Policy for SoftmaxPolicy {
    fn name(&self) -> &str {
        "agent"
    }

    fn select(
        &self,
        sim: &Simulator,
        state: &SimState,
        candidates: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<String, AgentError> {
        let features = candidates
            .iter()
            .map(|c| policy_features(sim, state, c))
            .collect::<Result<Vec<_>, _>>()?;
        let idx = if self.sample {
            softmax_select(&self.params, &features, self.temperature, rng)?.0
        } else {
            let probs = softmax_probs(&self.params, &features, self.temperature);
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            if features.is_empty() {
                return Err(AgentError::NoCandidates);
            }
            best
        };
        Ok(candidates[idx].clone())
    }
}
