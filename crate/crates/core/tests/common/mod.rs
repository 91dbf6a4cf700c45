#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use tutorsim::agents::{AgentError, Environment};
use tutorsim::factor::{FactorModel, Hyperparams};
use tutorsim::seed;
use tutorsim::sim::{RewardConfig, Simulator};

/// Mann-Whitney AUC by counting every (positive, negative) pair.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn direct_rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s / a.len() as f64).sqrt()
}

/// Two arms; `A` pays 1 and `B` pays 0, one step per episode.
pub struct Bandit;

impl Environment for Bandit {
    type State = ();

    fn feature_len(&self) -> usize {
        2
    }

    fn reset(&self, _: u64) -> Result<(), AgentError> {
        Ok(())
    }

    fn candidates(&self, _: &()) -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    fn features(&self, _: &(), c: &str) -> Result<Vec<f64>, AgentError> {
        Ok(if c == "A" { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
    }

    fn step(&self, _: &mut (), c: &str) -> Result<(f64, bool), AgentError> {
        Ok((if c == "A" { 1.0 } else { 0.0 }, true))
    }
}

/// Episodes of `len` steps over `k` candidates whose features are drawn
/// from the episode seed; the reward is a fixed linear function of the
/// chosen features plus noise.
pub struct RandomFeatures {
    pub dim: usize,
    pub k: usize,
    pub len: usize,
}

pub struct RfState {
    feats: Vec<Vec<Vec<f64>>>,
    t: usize,
    noise: rand_chacha::ChaCha8Rng,
}

impl Environment for RandomFeatures {
    type State = RfState;

    fn feature_len(&self) -> usize {
        self.dim
    }

    fn reset(&self, s: u64) -> Result<RfState, AgentError> {
        let mut rng = seed::rng(s);
        let feats = (0..self.len)
            .map(|_| {
                (0..self.k)
                    .map(|_| (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        Ok(RfState {
            feats,
            t: 0,
            noise: seed::indexed_rng(s, 9),
        })
    }

    fn candidates(&self, _: &RfState) -> Vec<String> {
        (0..self.k).map(|i| i.to_string()).collect()
    }

    fn features(&self, st: &RfState, c: &str) -> Result<Vec<f64>, AgentError> {
        Ok(st.feats[st.t][c.parse::<usize>().unwrap()].clone())
    }

    fn step(&self, st: &mut RfState, c: &str) -> Result<(f64, bool), AgentError> {
        let f = &st.feats[st.t][c.parse::<usize>().unwrap()];
        let r = f.iter().enumerate().map(|(i, v)| v * (i as f64 - 1.0)).sum::<f64>() + st.noise.random_range(-0.1..0.1);
        st.t += 1;
        Ok((r, st.t == self.len))
    }
}

/// One user `u` with embedding `[1, 0.5]` and exercises `e0..e{n-1}` with
/// embeddings `[0.1·j, 1]`, all in workbook `wb`.
pub fn toy_model(n_ex: usize) -> FactorModel {
    let mut m = FactorModel::new(Hyperparams {
        latent_factors: 2,
        ..Hyperparams::default()
    })
    .unwrap();
    m.add_user("u").unwrap();
    m.set_user_vector("u", &[1.0, 0.5]).unwrap();
    for j in 0..n_ex {
        let id = format!("e{}", j);
        m.add_exercise(&id).unwrap();
        m.set_exercise_vector(&id, &[j as f64 * 0.1, 1.0]).unwrap();
    }
    m
}

pub fn toy_workbook(n_ex: usize) -> BTreeMap<String, Vec<String>> {
    [("wb".to_string(), (0..n_ex).map(|j| format!("e{}", j)).collect())]
        .into_iter()
        .collect()
}

/// Simulator over [`toy_model`] with stub predictors given as functions of
/// the candidate's first embedding coordinate.
pub fn stub_sim<S, P>(n_ex: usize, window: usize, success: S, dropout: P, reward: RewardConfig) -> Simulator
where
    S: Fn(f64) -> f64 + Send + Sync + 'static,
    P: Fn(f64) -> f64 + Send + Sync + 'static,
{
    let l = 2;
    // success features end with the candidate; dropout features append s_t
    let s = move |f: &[f64]| success(f[f.len() - l]);
    let p = move |f: &[f64]| dropout(f[f.len() - 1 - l]);
    Simulator::new(toy_model(n_ex), Box::new(s), Box::new(p), toy_workbook(n_ex), window, reward).unwrap()
}

/// Random model with `n` users and `m` exercises of dimension `l` plus a
/// random subset of observed cells.
pub fn random_model(seed_: u64, n: usize, m: usize, l: usize) -> (FactorModel, Vec<(String, String, f64)>) {
    let mut rng = seed::rng(seed_);
    let mut model = FactorModel::new(Hyperparams {
        latent_factors: l,
        lambda_user: rng.random_range(0.0..0.5),
        lambda_exercise: rng.random_range(0.0..0.5),
        ..Hyperparams::default()
    })
    .unwrap();
    for i in 0..n {
        let id = format!("u{}", i);
        model.add_user(&id).unwrap();
        let v: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_user_vector(&id, &v).unwrap();
    }
    for j in 0..m {
        let id = format!("e{}", j);
        model.add_exercise(&id).unwrap();
        let v: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_exercise_vector(&id, &v).unwrap();
    }
    let mut obs = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if rng.random_bool(0.6) {
                obs.push((format!("u{}", i), format!("e{}", j), rng.random_range(0.0..1.0)));
            }
        }
    }
    (model, obs)
}

pub fn as_refs(obs: &[(String, String, f64)]) -> Vec<(&str, &str, f64)> {
    obs.iter().map(|(u, e, s)| (u.as_str(), e.as_str(), *s)).collect()
}

/// Maximum relative error between the analytic loss gradient and central
/// differences with step `h`, over every user and exercise coordinate.
pub fn mf_gradient_error(model: &FactorModel, obs: &[(String, String, f64)], h: f64) -> f64 {
    let refs = as_refs(obs);
    let g = model.loss_gradient(refs.iter().copied()).unwrap();
    let l = model.latent_dim();
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    };
    for (ui, u) in model.user_ids().iter().enumerate() {
        for f in 0..l {
            let base = model.user_vector(u).unwrap().to_vec();
            let mut m = model.clone();
            let mut v = base.clone();
            v[f] += h;
            m.set_user_vector(u, &v).unwrap();
            let plus = m.loss(refs.iter().copied()).unwrap();
            v[f] = base[f] - h;
            m.set_user_vector(u, &v).unwrap();
            let minus = m.loss(refs.iter().copied()).unwrap();
            check(g.users[ui * l + f], plus, minus);
        }
    }
    for (ei, e) in model.exercise_ids().iter().enumerate() {
        for f in 0..l {
            let base = model.exercise_vector(e).unwrap().to_vec();
            let mut m = model.clone();
            let mut v = base.clone();
            v[f] += h;
            m.set_exercise_vector(e, &v).unwrap();
            let plus = m.loss(refs.iter().copied()).unwrap();
            v[f] = base[f] - h;
            m.set_exercise_vector(e, &v).unwrap();
            let minus = m.loss(refs.iter().copied()).unwrap();
            check(g.exercises[ei * l + f], plus, minus);
        }
    }
    worst
}
