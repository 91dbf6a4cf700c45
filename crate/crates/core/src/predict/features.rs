//! Windowed feature vectors.
//!
//! Success layout: `[u_t | e_{t-n}, s_{t-n} | … | e_{t-1}, s_{t-1} | e_t]`.
//! Dropout layout: the success layout followed by `s_t`.
//!
//! History pairs are oldest-first. A history shorter than the window is
//! left-padded with (mean exercise embedding, 0.5) pairs.

use crate::factor::{FactorError, FactorModel};

/// Score used for padded history slots.
pub const PAD_SCORE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub latent: usize,
    pub window: usize,
}

impl FeatureLayout {
    pub fn new(latent: usize, window: usize) -> Self {
        FeatureLayout { latent, window }
    }

    pub fn success_len(&self) -> usize {
        self.latent + self.window * (self.latent + 1) + self.latent
    }

    pub fn dropout_len(&self) -> usize {
        self.success_len() + 1
    }
}

/// Assemble a success feature vector from raw embeddings. `history` holds
/// every known (embedding, score) pair oldest-first; only the last
/// `window` are used.
pub fn assemble_success(
    user: &[f64],
    history: &[(&[f64], f64)],
    candidate: &[f64],
    pad: &[f64],
    window: usize,
) -> Vec<f64> {
    let l = user.len();
    let mut out = Vec::with_capacity(2 * l + window * (l + 1) + 1);
    out.extend_from_slice(user);
    let recent = &history[history.len().saturating_sub(window)..];
    for _ in recent.len()..window {
        out.extend_from_slice(pad);
        out.push(PAD_SCORE);
    }
    for (emb, s) in recent {
        out.extend_from_slice(emb);
        out.push(*s);
    }
    out.extend_from_slice(candidate);
    out
}

fn history_embeddings<'m, S: AsRef<str>>(
    model: &'m FactorModel,
    history: &[(S, f64)],
    window: usize,
) -> Result<Vec<(&'m [f64], f64)>, FactorError> {
    let recent = &history[history.len().saturating_sub(window)..];
    recent
        .iter()
        .map(|(e, s)| Ok((model.exercise_vector(e.as_ref())?, *s)))
        .collect()
}

/// Success-prediction features for `user_id` attempting `candidate` after
/// `history` (exercise id, score) pairs, oldest first.
pub fn build_success_features<S: AsRef<str>>(
    model: &FactorModel,
    user_id: &str,
    history: &[(S, f64)],
    candidate: &str,
    window: usize,
) -> Result<Vec<f64>, FactorError> {
    let user = model.user_vector(user_id)?;
    let cand = model.exercise_vector(candidate)?;
    let pad = model.mean_exercise_vector().expect("candidate exists");
    let hist = history_embeddings(model, history, window)?;
    Ok(assemble_success(user, &hist, cand, &pad, window))
}

/// Dropout-prediction features: the success features plus the score `s_t`
/// obtained on the candidate.
pub fn build_dropout_features<S: AsRef<str>>(
    model: &FactorModel,
    user_id: &str,
    history: &[(S, f64)],
    candidate: &str,
    window: usize,
    s_t: f64,
) -> Result<Vec<f64>, FactorError> {
    let mut v = build_success_features(model, user_id, history, candidate, window)?;
    v.push(s_t);
    Ok(v)
}
