//! Windowed datasets, train/test splits and the model-comparison report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::features::{assemble_success, FeatureLayout};
use super::forest::{fit_forest, upsample_minority, Dataset, Forest, ForestConfig, ForestError, Task};
use super::metrics::{rmse, roc_auc, MetricError, RocCurve};
use crate::factor::{FactorError, FactorModel};
use crate::ingest::{EventLog, InteractionEvent};
use crate::seed;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dropout labels contain a single class; generate or ingest a log with at least one dropout and one completion")]
    SingleClass,
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Per-event train membership: each user's first `round(frac · k)` events
/// train, the rest test.
pub fn chronological_split(log: &EventLog, train_frac: f64) -> Vec<bool> {
    let mut is_train = vec![false; log.len()];
    for positions in log.user_index().values() {
        let n_train = (positions.len() as f64 * train_frac).round() as usize;
        for &p in &positions[..n_train.min(positions.len())] {
            is_train[p] = true;
        }
    }
    is_train
}

/// Per-event train membership with whole users held out: users are ranked
/// by a seeded hash and the first `round(test_frac · users)` are test users.
pub fn user_holdout_split(log: &EventLog, test_frac: f64, seed: u64) -> Vec<bool> {
    let mut users: Vec<(u64, &str)> = log
        .users()
        .map(|u| (seed::mix(seed, seed::hash_str(u)), u))
        .collect();
    users.sort();
    let n_test = (users.len() as f64 * test_frac).round() as usize;
    let test: BTreeSet<&str> = users[..n_test].iter().map(|(_, u)| *u).collect();
    log.events()
        .iter()
        .map(|e| !test.contains(e.user_id.as_str()))
        .collect()
}

/// Train and test datasets plus the (user, exercise) of each test row.
#[derive(Clone, Debug)]
pub struct WindowedData {
    pub train: Dataset,
    pub test: Dataset,
    pub test_keys: Vec<(String, String)>,
}

fn build_windowed<F>(
    log: &EventLog,
    model: &FactorModel,
    window: usize,
    is_train: &[bool],
    n_features: usize,
    mut example: F,
) -> Result<WindowedData, PredictError>
where
    F: FnMut(Vec<f64>, &InteractionEvent) -> (Vec<f64>, f64),
{
    let mut out = WindowedData {
        train: Dataset::new(n_features),
        test: Dataset::new(n_features),
        test_keys: Vec::new(),
    };
    let Some(pad) = model.mean_exercise_vector() else {
        return Err(PredictError::InsufficientData("factor model has no exercises".into()));
    };
    for (user, positions) in log.user_index() {
        let u = model.user_vector(user)?;
        let mut history: Vec<(&[f64], f64)> = Vec::with_capacity(positions.len());
        for &p in positions {
            let e = &log.events()[p];
            let emb = model.exercise_vector(&e.exercise_id)?;
            let base = assemble_success(u, &history, emb, &pad, window);
            let (features, target) = example(base, e);
            if is_train[p] {
                out.train.push(&features, target)?;
            } else {
                out.test.push(&features, target)?;
                out.test_keys.push((e.user_id.clone(), e.exercise_id.clone()));
            }
            history.push((emb, e.score()));
        }
    }
    Ok(out)
}

/// Success examples: features from the user's prior events, target = score.
pub fn build_success_data(
    log: &EventLog,
    model: &FactorModel,
    window: usize,
    is_train: &[bool],
) -> Result<WindowedData, PredictError> {
    let len = FeatureLayout::new(model.latent_dim(), window).success_len();
    build_windowed(log, model, window, is_train, len, |f, e| (f, e.score()))
}

/// Dropout examples: success features plus the observed score, target =
/// dropout label.
pub fn build_dropout_data(
    log: &EventLog,
    model: &FactorModel,
    window: usize,
    is_train: &[bool],
) -> Result<WindowedData, PredictError> {
    let len = FeatureLayout::new(model.latent_dim(), window).dropout_len();
    build_windowed(log, model, window, is_train, len, |mut f, e| {
        f.push(e.score());
        (f, if e.dropout { 1.0 } else { 0.0 })
    })
}

pub struct SuccessEvaluation {
    pub forest: Forest,
    pub window: usize,
    pub rmse: f64,
    pub baseline_rmse: f64,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub test_keys: Vec<(String, String)>,
}

/// Fit a regression forest on each user's first 80% of events and score it
/// on the remaining 20%, alongside the constant train-mean baseline.
pub fn fit_success_model(
    log: &EventLog,
    model: &FactorModel,
    window: usize,
    config: &ForestConfig,
) -> Result<SuccessEvaluation, PredictError> {
    if log.user_count() < 2 {
        return Err(PredictError::InsufficientData(format!(
            "need at least 2 users, found {}",
            log.user_count()
        )));
    }
    let data = build_success_data(log, model, window, &chronological_split(log, 0.8))?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(PredictError::InsufficientData("empty train or test split".into()));
    }
    let forest = fit_forest(&data.train, config, Task::Regression)?;
    let predictions = (0..data.test.len())
        .map(|i| forest.predict(data.test.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = data.test.targets().to_vec();
    let mean = data.train.targets().iter().sum::<f64>() / data.train.len() as f64;
    let baseline_rmse = rmse(&vec![mean; targets.len()], &targets)?;
    Ok(SuccessEvaluation {
        rmse: rmse(&predictions, &targets)?,
        forest,
        window,
        baseline_rmse,
        predictions,
        targets,
        test_keys: data.test_keys,
    })
}

pub struct DropoutEvaluation {
    pub forest: Forest,
    pub roc: RocCurve,
    pub train_positives: usize,
    pub train_size: usize,
}

/// Fit a classification forest on the minority-upsampled events of the
/// training users and compute the ROC curve on the held-out users.
///
/// Only a user's final event can carry a dropout label, so a per-user
/// chronological split would put every positive into the test fold; whole
/// users are held out instead.
pub fn fit_dropout_model(
    log: &EventLog,
    model: &FactorModel,
    window: usize,
    config: &ForestConfig,
    test_frac: f64,
    seed: u64,
) -> Result<DropoutEvaluation, PredictError> {
    if log.dropout_count() == 0 || log.dropout_count() == log.len() {
        return Err(PredictError::SingleClass);
    }
    let data = build_dropout_data(log, model, window, &user_holdout_split(log, test_frac, seed))?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(PredictError::InsufficientData("empty train or test split".into()));
    }
    let train_positives = data.train.targets().iter().filter(|&&t| t == 1.0).count();
    let balanced = upsample_minority(&data.train, seed).map_err(|e| match e {
        ForestError::SingleClass => PredictError::SingleClass,
        other => other.into(),
    })?;
    let forest = fit_forest(&balanced, config, Task::Classification)?;
    let scores = (0..data.test.len())
        .map(|i| forest.predict(data.test.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<bool> = data.test.targets().iter().map(|&t| t == 1.0).collect();
    let roc = roc_auc(&scores, &labels).map_err(|e| match e {
        MetricError::SingleClass => PredictError::SingleClass,
        other => other.into(),
    })?;
    Ok(DropoutEvaluation {
        forest,
        roc,
        train_positives,
        train_size: data.train.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub window: usize,
    pub metric: String,
    pub value: f64,
}

/// Rows of a `model,window,metric,value` report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, model: &str, window: usize, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            window,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, model: &str, window: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.window == window && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,window,metric,value\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.model, r.window, r.metric, r.value).unwrap();
        }
        s
    }
}

/// Held-out RMSE of a success forest per window size, next to the
/// constant-mean baseline.
pub fn evaluate_table1(
    log: &EventLog,
    model: &FactorModel,
    windows: &[usize],
    config: &ForestConfig,
) -> Result<Report, PredictError> {
    let mut report = Report::default();
    for &n in windows {
        let eval = fit_success_model(log, model, n, config)?;
        report.push("random_forest", n, "rmse", eval.rmse);
        report.push("global_mean", n, "rmse", eval.baseline_rmse);
    }
    Ok(report)
}
