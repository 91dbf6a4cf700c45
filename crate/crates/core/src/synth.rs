//! Synthetic student populations with known ground truth.
//!
//! Responses follow a one-parameter logistic model,
//! `P(correct) = 1 / (1 + exp(-(ability - difficulty)))`, and the chance of
//! quitting after each submission grows with runs of failures (frustration)
//! and runs of very easy successes (boredom).

use std::collections::BTreeMap;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{derive_dropout_labels, EventLog, InteractionEvent};
use crate::seed;

/// Timestamp of the first synthetic event.
pub const BASE_TIMESTAMP_MS: i64 = 1_700_000_000_000;
/// Spacing between consecutive submissions of one user.
pub const STEP_SPACING_MS: i64 = 60_000;
/// Offset between the start times of consecutive users.
pub const USER_OFFSET_MS: i64 = 1_000;
/// A success counts as "easy" above this ground-truth probability.
pub const EASY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ground-truth probability of a correct submission.
pub fn prob_correct(ability: f64, difficulty: f64) -> f64 {
    logistic(ability - difficulty)
}

/// Coefficients of the dropout hazard `logistic(b0 + b1*failures + b2*easy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutCoeffs {
    pub intercept: f64,
    pub frustration: f64,
    pub boredom: f64,
}

impl Default for DropoutCoeffs {
    fn default() -> Self {
        DropoutCoeffs {
            intercept: -4.0,
            frustration: 1.0,
            boredom: 0.6,
        }
    }
}

/// Probability of quitting right after the current submission.
pub fn prob_dropout(consec_failures: u32, consec_easy_successes: u32, coeffs: &DropoutCoeffs) -> f64 {
    let mut z = coeffs.intercept;
    // skip zero terms so that an infinite intercept stays well defined
    if consec_failures > 0 {
        z += coeffs.frustration * f64::from(consec_failures);
    }
    if consec_easy_successes > 0 {
        z += coeffs.boredom * f64::from(consec_easy_successes);
    }
    logistic(z)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Each user sees the workbook in an independently shuffled order.
    #[default]
    Random,
    /// Every user sees the workbook in ascending exercise-id order.
    HistoricalFixed,
}

/// A generated population together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub abilities: BTreeMap<String, f64>,
    pub difficulties: BTreeMap<String, f64>,
    pub workbooks: BTreeMap<String, Vec<String>>,
    pub dropout_coeffs: DropoutCoeffs,
    pub seed: u64,
}

fn id(prefix: &str, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(4);
    format!("{}{:0width$}", prefix, i, width = width)
}

/// Draw a world: standard-normal abilities and difficulties, exercises
/// dealt round-robin into workbooks.
pub fn gen_world(
    n_users: usize,
    n_exercises: usize,
    n_workbooks: usize,
    seed: u64,
) -> Result<SyntheticWorld, SynthError> {
    if n_users == 0 || n_exercises == 0 || n_workbooks == 0 {
        return Err(SynthError::InvalidCounts("all counts must be positive".into()));
    }
    if n_workbooks > n_exercises {
        return Err(SynthError::InvalidCounts(format!(
            "{} workbooks for {} exercises",
            n_workbooks, n_exercises
        )));
    }
    let mut rng = seed::indexed_rng(seed, 0);
    let abilities = (0..n_users)
        .map(|i| (id("u", i, n_users), rng.sample(StandardNormal)))
        .collect();
    let mut rng = seed::indexed_rng(seed, 1);
    let difficulties = (0..n_exercises)
        .map(|j| (id("e", j, n_exercises), rng.sample(StandardNormal)))
        .collect();
    let mut workbooks: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for j in 0..n_exercises {
        workbooks
            .entry(id("wb", j % n_workbooks, n_workbooks))
            .or_default()
            .push(id("e", j, n_exercises));
    }
    Ok(SyntheticWorld {
        abilities,
        difficulties,
        workbooks,
        dropout_coeffs: DropoutCoeffs::default(),
        seed,
    })
}

impl SyntheticWorld {
    pub fn with_dropout_coeffs(mut self, coeffs: DropoutCoeffs) -> Self {
        self.dropout_coeffs = coeffs;
        self
    }

    pub fn workbook_sizes(&self) -> BTreeMap<String, usize> {
        self.workbooks.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    /// Ground-truth success probability for a known pair.
    pub fn true_prob_correct(&self, user_id: &str, exercise_id: &str) -> Option<f64> {
        Some(prob_correct(
            *self.abilities.get(user_id)?,
            *self.difficulties.get(exercise_id)?,
        ))
    }

    /// Workbook a user is enrolled in, drawn from the user's own substream.
    pub fn enrolled_workbook(&self, user_id: &str) -> &str {
        let mut rng = seed::keyed_rng(self.seed, user_id);
        self.pick_workbook(&mut rng)
    }

    fn pick_workbook<R: Rng>(&self, rng: &mut R) -> &str {
        let k = rng.random_range(0..self.workbooks.len());
        self.workbooks.keys().nth(k).expect("index in range")
    }

    fn trajectory(
        &self,
        user_idx: usize,
        user_id: &str,
        ability: f64,
        policy: OrderPolicy,
        max_events: usize,
    ) -> Vec<InteractionEvent> {
        let mut rng = seed::keyed_rng(self.seed, user_id);
        let wb = self.pick_workbook(&mut rng).to_string();
        let mut order = self.workbooks[&wb].clone();
        if policy == OrderPolicy::Random {
            order.shuffle(&mut rng);
        }
        let start = BASE_TIMESTAMP_MS + user_idx as i64 * USER_OFFSET_MS;
        let mut events = Vec::new();
        let (mut failures, mut easy) = (0u32, 0u32);
        for (step, ex) in order.iter().take(max_events).enumerate() {
            let p = prob_correct(ability, self.difficulties[ex]);
            let correct = rng.random_bool(p);
            if correct {
                failures = 0;
                easy = if p > EASY_THRESHOLD { easy + 1 } else { 0 };
            } else {
                failures += 1;
                easy = 0;
            }
            events.push(InteractionEvent::new(
                user_id,
                ex,
                &wb,
                start + step as i64 * STEP_SPACING_MS,
                correct,
            ));
            if rng.random_bool(prob_dropout(failures, easy, &self.dropout_coeffs)) {
                break;
            }
        }
        events
    }
}

/// Simulate every user's trajectory through their workbook.
///
/// A trajectory ends when the sampled dropout fires, when the workbook is
/// exhausted, or after `max_events_per_user` submissions. Labels are then
/// assigned with the standard rule of [`derive_dropout_labels`], so the
/// output is indistinguishable from an ingested log.
pub fn gen_log(world: &SyntheticWorld, policy: OrderPolicy, max_events_per_user: usize) -> EventLog {
    let users: Vec<(&String, &f64)> = world.abilities.iter().collect();
    let per_user: Vec<Vec<InteractionEvent>> = users
        .par_iter()
        .enumerate()
        .map(|(i, (u, a))| world.trajectory(i, u, **a, policy, max_events_per_user))
        .collect();
    let events = per_user.into_iter().flatten().collect();
    let log = EventLog::from_events(events).expect("generated ids are consistent");
    derive_dropout_labels(log, Duration::ZERO, &world.workbook_sizes())
}
