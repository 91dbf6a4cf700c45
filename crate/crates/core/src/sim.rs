//! The student-interaction environment.
//!
//! Given the next exercise for a simulated student, the environment predicts
//! the success probability ŝ from the windowed success features, samples a
//! binary outcome, predicts the dropout probability from the dropout
//! features (with the sampled outcome as `s_t`), samples the dropout
//! decision, and pays
//!
//! ```text
//! r = -(ŝ - s_target)² + α (1 - p_dropout)
//! ```
//!
//! (or `+(ŝ - s_target)²` in literal mode). The factor model and both
//! predictors are frozen while episodes run.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor::{FactorError, FactorModel};
use crate::predict::features::{assemble_success, FeatureLayout};
use crate::predict::forest::{Forest, ForestError};
use crate::seed;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown or empty workbook {0}")]
    UnknownWorkbook(String),
    #[error("episode is done")]
    EpisodeDone,
    #[error("exercise {0} is not available in this episode")]
    ExerciseNotAvailable(String),
    #[error("predictor expects {expected} features, environment produces {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Anything that maps a feature vector to a real output.
pub trait Predictor: Send + Sync {
    fn predict(&self, features: &[f64]) -> Result<f64, ForestError>;

    /// Expected input length, if fixed.
    fn input_len(&self) -> Option<usize> {
        None
    }
}

impl Predictor for Forest {
    fn predict(&self, features: &[f64]) -> Result<f64, ForestError> {
        Forest::predict(self, features)
    }

    fn input_len(&self) -> Option<usize> {
        Some(self.n_features)
    }
}

impl<F> Predictor for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, features: &[f64]) -> Result<f64, ForestError> {
        Ok(self(features))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// Penalize distance from the target score.
    #[default]
    Corrected,
    /// Reward distance from the target score.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub s_target: f64,
    pub alpha: f64,
    pub sign_mode: SignMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            s_target: 0.7,
            alpha: 1.0,
            sign_mode: SignMode::Corrected,
        }
    }
}

/// Per-step reward; an episode's return is the sum over its steps.
pub fn step_reward(score: f64, p_dropout: f64, config: &RewardConfig) -> f64 {
    let dev = (score - config.s_target).powi(2);
    let retention = config.alpha * (1.0 - p_dropout);
    match config.sign_mode {
        SignMode::Corrected => -dev + retention,
        SignMode::Inverted => dev + retention,
    }
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub user_id: String,
    pub user_embedding: Vec<f64>,
    pub workbook_id: String,
    pub workbook_size: usize,
    /// Last `window` (exercise id, score) pairs, oldest first.
    pub history: VecDeque<(String, f64)>,
    pub remaining: BTreeSet<String>,
    pub step_count: usize,
    pub done: bool,
    pub cumulative_reward: f64,
    rng: ChaCha8Rng,
}

impl SimState {
    /// Candidate exercises in ascending id order.
    pub fn candidates(&self) -> Vec<String> {
        self.remaining.iter().cloned().collect()
    }

    /// Mean of the windowed scores, or 0.5 for an empty window.
    pub fn mean_window_score(&self) -> f64 {
        if self.history.is_empty() {
            0.5
        } else {
            self.history.iter().map(|(_, s)| s).sum::<f64>() / self.history.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub exercise_id: String,
    /// Predicted success probability ŝ, clamped to [0, 1].
    pub score: f64,
    pub sampled_correct: bool,
    pub p_dropout: f64,
    pub dropped_out: bool,
    pub reward: f64,
}

pub struct Simulator {
    model: FactorModel,
    success: Box<dyn Predictor>,
    dropout: Box<dyn Predictor>,
    workbooks: BTreeMap<String, Vec<String>>,
    layout: FeatureLayout,
    reward: RewardConfig,
    pad: Vec<f64>,
    primed: Option<BTreeMap<String, Vec<(String, f64)>>>,
}

impl Simulator {
    pub fn new(
        model: FactorModel,
        success: Box<dyn Predictor>,
        dropout: Box<dyn Predictor>,
        workbooks: BTreeMap<String, Vec<String>>,
        window: usize,
        reward: RewardConfig,
    ) -> Result<Self, SimError> {
        let layout = FeatureLayout::new(model.latent_dim(), window);
        for (p, produced) in [(&success, layout.success_len()), (&dropout, layout.dropout_len())] {
            if let Some(accepted) = p.input_len() {
                if accepted != produced {
                    return Err(SimError::LayoutMismatch { expected: accepted, found: produced });
                }
            }
        }
        for ex in workbooks.values().flatten() {
            model.exercise_vector(ex)?;
        }
        let pad = model
            .mean_exercise_vector()
            .ok_or_else(|| FactorError::UnknownExercise("<none>".into()))?;
        Ok(Simulator {
            model,
            success,
            dropout,
            workbooks,
            layout,
            reward,
            pad,
            primed: None,
        })
    }

    /// Start episodes from the tail of each user's recorded history rather
    /// than an empty window.
    pub fn with_primed_history(mut self, histories: BTreeMap<String, Vec<(String, f64)>>) -> Self {
        self.primed = Some(histories);
        self
    }

    pub fn model(&self) -> &FactorModel {
        &self.model
    }

    pub fn workbooks(&self) -> &BTreeMap<String, Vec<String>> {
        &self.workbooks
    }

    pub fn window(&self) -> usize {
        self.layout.window
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn reset(&self, user_id: &str, workbook_id: &str, seed: u64) -> Result<SimState, SimError> {
        let user_embedding = self
            .model
            .user_vector(user_id)
            .map_err(|_| SimError::UnknownUser(user_id.to_string()))?
            .to_vec();
        let exercises = self
            .workbooks
            .get(workbook_id)
            .filter(|w| !w.is_empty())
            .ok_or_else(|| SimError::UnknownWorkbook(workbook_id.to_string()))?;
        let mut history = VecDeque::new();
        if let Some(tail) = self.primed.as_ref().and_then(|p| p.get(user_id)) {
            let start = tail.len().saturating_sub(self.layout.window);
            history.extend(tail[start..].iter().cloned());
        }
        Ok(SimState {
            user_id: user_id.to_string(),
            user_embedding,
            workbook_id: workbook_id.to_string(),
            workbook_size: exercises.len(),
            history,
            remaining: exercises.iter().cloned().collect(),
            step_count: 0,
            done: false,
            cumulative_reward: 0.0,
            rng: seed::rng(seed),
        })
    }

    fn success_features(&self, state: &SimState, exercise_id: &str) -> Result<Vec<f64>, SimError> {
        let hist = state
            .history
            .iter()
            .map(|(e, s)| Ok((self.model.exercise_vector(e)?, *s)))
            .collect::<Result<Vec<_>, FactorError>>()?;
        let cand = self.model.exercise_vector(exercise_id)?;
        Ok(assemble_success(&state.user_embedding, &hist, cand, &self.pad, self.layout.window))
    }

    fn dropout_prob(&self, mut features: Vec<f64>, s_t: f64) -> Result<f64, SimError> {
        features.push(s_t);
        Ok(self.dropout.predict(&features)?.clamp(0.0, 1.0))
    }

    /// Success probability for `exercise_id` in the current state.
    pub fn success_prob(&self, state: &SimState, exercise_id: &str) -> Result<f64, SimError> {
        let f = self.success_features(state, exercise_id)?;
        Ok(self.success.predict(&f)?.clamp(0.0, 1.0))
    }

    /// `(ŝ, E[p_dropout])` for a candidate without advancing the state; the
    /// dropout probability is averaged over the two possible outcomes.
    pub fn expected_outcome(&self, state: &SimState, exercise_id: &str) -> Result<(f64, f64), SimError> {
        let f = self.success_features(state, exercise_id)?;
        let s = self.success.predict(&f)?.clamp(0.0, 1.0);
        let p1 = self.dropout_prob(f.clone(), 1.0)?;
        let p0 = self.dropout_prob(f, 0.0)?;
        Ok((s, s * p1 + (1.0 - s) * p0))
    }

    pub fn step(&self, state: &mut SimState, exercise_id: &str) -> Result<StepOutcome, SimError> {
        if state.done {
            return Err(SimError::EpisodeDone);
        }
        if !state.remaining.contains(exercise_id) {
            return Err(SimError::ExerciseNotAvailable(exercise_id.to_string()));
        }
        let features = self.success_features(state, exercise_id)?;
        let score = self.success.predict(&features)?.clamp(0.0, 1.0);
        let sampled_correct = state.rng.random_bool(score);
        let s_t = if sampled_correct { 1.0 } else { 0.0 };
        let p_dropout = self.dropout_prob(features, s_t)?;
        let dropped_out = state.rng.random_bool(p_dropout);
        let reward = step_reward(score, p_dropout, &self.reward);

        state.history.push_back((exercise_id.to_string(), s_t));
        while state.history.len() > self.layout.window {
            state.history.pop_front();
        }
        state.remaining.remove(exercise_id);
        state.step_count += 1;
        state.cumulative_reward += reward;
        state.done = dropped_out || state.remaining.is_empty();

        Ok(StepOutcome {
            exercise_id: exercise_id.to_string(),
            score,
            sampled_correct,
            p_dropout,
            dropped_out,
            reward,
        })
    }
}

/// One simulated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub user_id: String,
    pub steps: Vec<StepOutcome>,
    pub cumulative_reward: f64,
}

pub const TRACE_HEADER: &str =
    "episode,step,user_id,exercise_id,score_prob,sampled_correct,p_dropout,dropped_out,reward,cumulative_reward";

/// Write traces as CSV rows under [`TRACE_HEADER`].
pub fn traces_to_csv(traces: &[EpisodeTrace]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for t in traces {
        let mut cum = 0.0;
        for (i, s) in t.steps.iter().enumerate() {
            cum += s.reward;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                t.episode,
                i,
                t.user_id,
                s.exercise_id,
                s.score,
                u8::from(s.sampled_correct),
                s.p_dropout,
                u8::from(s.dropped_out),
                s.reward,
                cum
            )
            .unwrap();
        }
    }
    out
}
