//! Dynamic matrix factorization.
//!
//! Scores are modelled as `s_ue ≈ U_u · E_e` where `U` holds one latent row
//! per user and `E` one latent column per exercise. The objective is
//!
//! ```text
//! Σ_observed (s - ŝ)² + λ1 ‖U‖²_F + λ2 ‖E‖²_F
//! ```
//!
//! minimized by plain gradient descent. The matrices grow while the stream
//! is consumed: an unseen user gets a row equal to the mean existing user,
//! an unseen exercise a column equal to the mean existing exercise, and each
//! observation triggers a few gradient steps on that single interaction.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{chronological_stream, EventLog, InteractionEvent};
use crate::seed;

pub const SNAPSHOT_VERSION: &str = "tutorsim-factor-model/1";

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown exercise {0}")]
    UnknownExercise(String),
    #[error("user {0} already exists")]
    DuplicateUser(String),
    #[error("exercise {0} already exists")]
    DuplicateExercise(String),
    #[error("non-finite factors after update on ({user}, {exercise}); lower the learning rate")]
    DivergenceDetected { user: String, exercise: String },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("snapshot version {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub latent_factors: usize,
    /// Regularization weight on user factors (λ1).
    pub lambda_user: f64,
    /// Regularization weight on exercise factors (λ2).
    pub lambda_exercise: f64,
    pub learning_rate: f64,
    pub steps_per_interaction: usize,
    /// Standard deviation of the very first row/column, when there is no
    /// existing average to copy.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            latent_factors: 16,
            lambda_user: 0.01,
            lambda_exercise: 0.01,
            learning_rate: 0.01,
            steps_per_interaction: 5,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), FactorError> {
        let bad = |m: &str| Err(FactorError::InvalidHyperparams(m.to_string()));
        if self.latent_factors == 0 {
            return bad("latent_factors must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda_user >= 0.0 && self.lambda_exercise >= 0.0) {
            return bad("regularization weights must be non-negative");
        }
        if self.steps_per_interaction == 0 {
            return bad("steps_per_interaction must be >= 1");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be non-negative");
        }
        Ok(())
    }
}

/// Dense id ↔ index map in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
struct IdMap {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdMap {
    fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    fn push(&mut self, id: &str) -> usize {
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.lookup.insert(id.to_string(), idx);
        idx
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// User and exercise latent factors plus their id maps.
///
/// `U` is stored row-major (`n × l`). `E` is stored with each exercise
/// column contiguous, i.e. as `Eᵀ` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    hyper: Hyperparams,
    users: IdMap,
    exercises: IdMap,
    user_factors: Vec<f64>,
    exercise_factors: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

fn mean_rows(data: &[f64], dim: usize) -> Vec<f64> {
    let rows = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    mean
}

/// Gradient of the full objective, laid out like the model's storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub users: Vec<f64>,
    pub exercises: Vec<f64>,
}

impl FactorModel {
    pub fn new(hyper: Hyperparams) -> Result<Self, FactorError> {
        hyper.validate()?;
        Ok(FactorModel {
            hyper,
            users: IdMap::default(),
            exercises: IdMap::default(),
            user_factors: Vec::new(),
            exercise_factors: Vec::new(),
        })
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn latent_dim(&self) -> usize {
        self.hyper.latent_factors
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercises.len()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.users.ids
    }

    pub fn exercise_ids(&self) -> &[String] {
        &self.exercises.ids
    }

    pub fn has_user(&self, user_id: &str) -> bool {
        self.users.get(user_id).is_some()
    }

    pub fn has_exercise(&self, exercise_id: &str) -> bool {
        self.exercises.get(exercise_id).is_some()
    }

    fn user_idx(&self, user_id: &str) -> Result<usize, FactorError> {
        self.users
            .get(user_id)
            .ok_or_else(|| FactorError::UnknownUser(user_id.to_string()))
    }

    fn exercise_idx(&self, exercise_id: &str) -> Result<usize, FactorError> {
        self.exercises
            .get(exercise_id)
            .ok_or_else(|| FactorError::UnknownExercise(exercise_id.to_string()))
    }

    fn user_row(&self, idx: usize) -> &[f64] {
        let l = self.latent_dim();
        &self.user_factors[idx * l..(idx + 1) * l]
    }

    fn exercise_col(&self, idx: usize) -> &[f64] {
        let l = self.latent_dim();
        &self.exercise_factors[idx * l..(idx + 1) * l]
    }

    pub fn user_vector(&self, user_id: &str) -> Result<&[f64], FactorError> {
        Ok(self.user_row(self.user_idx(user_id)?))
    }

    pub fn exercise_vector(&self, exercise_id: &str) -> Result<&[f64], FactorError> {
        Ok(self.exercise_col(self.exercise_idx(exercise_id)?))
    }

    /// Overwrite a user's latent row.
    pub fn set_user_vector(&mut self, user_id: &str, values: &[f64]) -> Result<(), FactorError> {
        let idx = self.user_idx(user_id)?;
        self.check_vector(values)?;
        let l = self.latent_dim();
        self.user_factors[idx * l..(idx + 1) * l].copy_from_slice(values);
        Ok(())
    }

    /// Overwrite an exercise's latent column.
    pub fn set_exercise_vector(&mut self, exercise_id: &str, values: &[f64]) -> Result<(), FactorError> {
        let idx = self.exercise_idx(exercise_id)?;
        self.check_vector(values)?;
        let l = self.latent_dim();
        self.exercise_factors[idx * l..(idx + 1) * l].copy_from_slice(values);
        Ok(())
    }

    fn check_vector(&self, values: &[f64]) -> Result<(), FactorError> {
        if values.len() != self.latent_dim() || values.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::MalformedSnapshot(format!(
                "expected {} finite values",
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// Column-wise mean of `U`; `None` when there are no users.
    pub fn mean_user_vector(&self) -> Option<Vec<f64>> {
        (self.n_users() > 0).then(|| mean_rows(&self.user_factors, self.latent_dim()))
    }

    /// Mean exercise column of `E`; `None` when there are no exercises.
    pub fn mean_exercise_vector(&self) -> Option<Vec<f64>> {
        (self.n_exercises() > 0).then(|| mean_rows(&self.exercise_factors, self.latent_dim()))
    }

    /// Raw dot-product prediction, not clamped.
    pub fn predict_score(&self, user_id: &str, exercise_id: &str) -> Result<f64, FactorError> {
        let u = self.user_idx(user_id)?;
        let e = self.exercise_idx(exercise_id)?;
        Ok(dot(self.user_row(u), self.exercise_col(e)))
    }

    /// Prediction that substitutes the mean user/exercise for unknown ids,
    /// the cold-start estimate before any interaction is seen.
    pub fn predict_or_mean(&self, user_id: &str, exercise_id: &str) -> Option<f64> {
        let u = match self.users.get(user_id) {
            Some(i) => self.user_row(i).to_vec(),
            None => self.mean_user_vector()?,
        };
        let e = match self.exercises.get(exercise_id) {
            Some(i) => self.exercise_col(i).to_vec(),
            None => self.mean_exercise_vector()?,
        };
        Some(dot(&u, &e))
    }

    fn init_vector(&self, key: &str, existing: Option<Vec<f64>>) -> Vec<f64> {
        existing.unwrap_or_else(|| {
            let mut rng = seed::keyed_rng(self.hyper.seed, key);
            if self.hyper.init_scale == 0.0 {
                return vec![0.0; self.latent_dim()];
            }
            let normal = Normal::new(0.0, self.hyper.init_scale).expect("validated scale");
            (0..self.latent_dim()).map(|_| rng.sample(normal)).collect()
        })
    }

    /// Append a row for a new user, initialized to the average user.
    pub fn add_user(&mut self, user_id: &str) -> Result<(), FactorError> {
        if self.has_user(user_id) {
            return Err(FactorError::DuplicateUser(user_id.to_string()));
        }
        let row = self.init_vector(&format!("user:{}", user_id), self.mean_user_vector());
        self.users.push(user_id);
        self.user_factors.extend_from_slice(&row);
        Ok(())
    }

    /// Append a column for a new exercise, initialized to the average exercise.
    pub fn add_exercise(&mut self, exercise_id: &str) -> Result<(), FactorError> {
        if self.has_exercise(exercise_id) {
            return Err(FactorError::DuplicateExercise(exercise_id.to_string()));
        }
        let col = self.init_vector(&format!("exercise:{}", exercise_id), self.mean_exercise_vector());
        self.exercises.push(exercise_id);
        self.exercise_factors.extend_from_slice(&col);
        Ok(())
    }

    /// Objective value over a set of observations (squared Frobenius norms).
    pub fn loss<'a, I>(&self, observed: I) -> Result<f64, FactorError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, f64)>,
    {
        let mut residual = 0.0;
        for (u, e, s) in observed {
            let r = s - self.predict_score(u, e)?;
            residual += r * r;
        }
        Ok(residual
            + self.hyper.lambda_user * sq_norm(&self.user_factors)
            + self.hyper.lambda_exercise * sq_norm(&self.exercise_factors))
    }

    /// Analytic gradient of [`FactorModel::loss`] with respect to every factor.
    pub fn loss_gradient<'a, I>(&self, observed: I) -> Result<Gradient, FactorError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, f64)>,
    {
        let l = self.latent_dim();
        let mut g = Gradient {
            users: self.user_factors.iter().map(|v| 2.0 * self.hyper.lambda_user * v).collect(),
            exercises: self
                .exercise_factors
                .iter()
                .map(|v| 2.0 * self.hyper.lambda_exercise * v)
                .collect(),
        };
        for (u, e, s) in observed {
            let (ui, ei) = (self.user_idx(u)?, self.exercise_idx(e)?);
            let r = s - dot(self.user_row(ui), self.exercise_col(ei));
            for f in 0..l {
                g.users[ui * l + f] -= 2.0 * r * self.exercise_factors[ei * l + f];
                g.exercises[ei * l + f] -= 2.0 * r * self.user_factors[ui * l + f];
            }
        }
        Ok(g)
    }

    /// Loss of one observation with regularization on the active row and
    /// column only: `(s - ŝ)² + λ1‖U_u‖² + λ2‖E_e‖²`.
    pub fn observation_loss(&self, user_id: &str, exercise_id: &str, score: f64) -> Result<f64, FactorError> {
        let u = self.user_vector(user_id)?;
        let e = self.exercise_vector(exercise_id)?;
        let r = score - dot(u, e);
        Ok(r * r + self.hyper.lambda_user * sq_norm(u) + self.hyper.lambda_exercise * sq_norm(e))
    }

    /// Gradients of [`FactorModel::observation_loss`] with respect to `U_u` and `E_e`.
    pub fn observation_gradient(
        &self,
        user_id: &str,
        exercise_id: &str,
        score: f64,
    ) -> Result<(Vec<f64>, Vec<f64>), FactorError> {
        let u = self.user_vector(user_id)?;
        let e = self.exercise_vector(exercise_id)?;
        let r = score - dot(u, e);
        let gu = u
            .iter()
            .zip(e)
            .map(|(uf, ef)| -2.0 * r * ef + 2.0 * self.hyper.lambda_user * uf)
            .collect();
        let ge = u
            .iter()
            .zip(e)
            .map(|(uf, ef)| -2.0 * r * uf + 2.0 * self.hyper.lambda_exercise * ef)
            .collect();
        Ok((gu, ge))
    }

    /// One simultaneous gradient step on a single observation. Only `U_u`
    /// and `E_e` change. On divergence the model is left untouched.
    pub fn grad_step(&mut self, user_id: &str, exercise_id: &str, score: f64) -> Result<(), FactorError> {
        let (ui, ei) = (self.user_idx(user_id)?, self.exercise_idx(exercise_id)?);
        let (gu, ge) = self.observation_gradient(user_id, exercise_id, score)?;
        let eta = self.hyper.learning_rate;
        let new_u: Vec<f64> = self.user_row(ui).iter().zip(&gu).map(|(v, g)| v - eta * g).collect();
        let new_e: Vec<f64> = self.exercise_col(ei).iter().zip(&ge).map(|(v, g)| v - eta * g).collect();
        if new_u.iter().chain(&new_e).any(|v| !v.is_finite()) {
            return Err(FactorError::DivergenceDetected {
                user: user_id.to_string(),
                exercise: exercise_id.to_string(),
            });
        }
        let l = self.latent_dim();
        self.user_factors[ui * l..(ui + 1) * l].copy_from_slice(&new_u);
        self.exercise_factors[ei * l..(ei + 1) * l].copy_from_slice(&new_e);
        Ok(())
    }

    fn ensure_ids(&mut self, user_id: &str, exercise_id: &str) {
        if !self.has_user(user_id) {
            self.add_user(user_id).expect("checked absent");
        }
        if !self.has_exercise(exercise_id) {
            self.add_exercise(exercise_id).expect("checked absent");
        }
    }

    /// Online update: grow the matrices for unseen ids, then run
    /// `steps_per_interaction` gradient steps on this interaction.
    pub fn observe_score(&mut self, user_id: &str, exercise_id: &str, score: f64) -> Result<(), FactorError> {
        self.ensure_ids(user_id, exercise_id);
        for _ in 0..self.hyper.steps_per_interaction {
            self.grad_step(user_id, exercise_id, score)?;
        }
        Ok(())
    }

    pub fn observe(&mut self, event: &InteractionEvent) -> Result<(), FactorError> {
        self.observe_score(&event.user_id, &event.exercise_id, event.score())
    }

    /// Stream a whole log through [`FactorModel::observe`] in chronological order.
    pub fn observe_log(&mut self, log: &EventLog) -> Result<(), FactorError> {
        chronological_stream(log).try_for_each(|e| self.observe(e))
    }

    /// `epochs` passes of single gradient steps over the log in
    /// chronological order. Unseen ids are added on first encounter.
    pub fn batch_fit(&mut self, log: &EventLog, epochs: usize) -> Result<(), FactorError> {
        let observed: Vec<(&str, &str, f64)> = chronological_stream(log)
            .map(|e| (e.user_id.as_str(), e.exercise_id.as_str(), e.score()))
            .collect();
        self.batch_fit_scores(&observed, epochs)
    }

    /// [`FactorModel::batch_fit`] over arbitrary real-valued observations,
    /// visited in the given order each epoch.
    pub fn batch_fit_scores(&mut self, observed: &[(&str, &str, f64)], epochs: usize) -> Result<(), FactorError> {
        for _ in 0..epochs {
            for &(u, e, s) in observed {
                self.ensure_ids(u, e);
                self.grad_step(u, e, s)?;
            }
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> FactorSnapshot {
        let l = self.latent_dim();
        let m = self.n_exercises();
        // E is l × m, written row-major
        let mut e_rows = Vec::with_capacity(l * m);
        for f in 0..l {
            for j in 0..m {
                e_rows.push(self.exercise_factors[j * l + f]);
            }
        }
        FactorSnapshot {
            version: SNAPSHOT_VERSION.to_string(),
            hyper: self.hyper.clone(),
            user_ids: self.users.ids.clone(),
            exercise_ids: self.exercises.ids.clone(),
            user_factors: self.user_factors.clone(),
            exercise_factors: e_rows,
        }
    }

    pub fn from_snapshot(snap: FactorSnapshot) -> Result<Self, FactorError> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(FactorError::VersionMismatch {
                found: snap.version,
                expected: SNAPSHOT_VERSION.to_string(),
            });
        }
        let mut model = FactorModel::new(snap.hyper)?;
        let l = model.latent_dim();
        let (n, m) = (snap.user_ids.len(), snap.exercise_ids.len());
        if snap.user_factors.len() != n * l || snap.exercise_factors.len() != m * l {
            return Err(FactorError::MalformedSnapshot("factor array sizes do not match ids".into()));
        }
        if snap.user_factors.iter().chain(&snap.exercise_factors).any(|v| !v.is_finite()) {
            return Err(FactorError::MalformedSnapshot("non-finite factor".into()));
        }
        for id in &snap.user_ids {
            if model.has_user(id) {
                return Err(FactorError::DuplicateUser(id.clone()));
            }
            model.users.push(id);
        }
        for id in &snap.exercise_ids {
            if model.has_exercise(id) {
                return Err(FactorError::DuplicateExercise(id.clone()));
            }
            model.exercises.push(id);
        }
        model.user_factors = snap.user_factors;
        model.exercise_factors = vec![0.0; m * l];
        for f in 0..l {
            for j in 0..m {
                model.exercise_factors[j * l + f] = snap.exercise_factors[f * m + j];
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String, FactorError> {
        Ok(serde_json::to_string_pretty(&self.to_snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self, FactorError> {
        Self::from_snapshot(serde_json::from_str(s)?)
    }
}

/// Serialized form of a [`FactorModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSnapshot {
    pub version: String,
    pub hyper: Hyperparams,
    pub user_ids: Vec<String>,
    pub exercise_ids: Vec<String>,
    /// `U`, `n × l`, row-major.
    pub user_factors: Vec<f64>,
    /// `E`, `l × m`, row-major.
    pub exercise_factors: Vec<f64>,
}
