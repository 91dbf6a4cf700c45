//! Experiment configuration and the pipeline commands behind the CLI.
//!
//! Every command reads its inputs from and writes its outputs to a single
//! output directory, writes each file atomically, and records a manifest
//! with the resolved configuration and SHA-256 digests of what it read and
//! wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    policy_feature_len, run_episode, train_agent, AgentConfig, AgentError, GreedyPolicy, Policy, PolicyParams, ReplayPolicy,
    SimEnvironment, SoftmaxPolicy,
};
use crate::factor::{FactorError, FactorModel, Hyperparams};
use crate::ingest::{derive_dropout_labels, parse_log, write_log, EventLog, IngestError, ParseMode};
use crate::predict::{
    evaluate_table1, fit_dropout_model, fit_success_model, rmse, Forest, ForestConfig, ForestError, PredictError,
    Report,
};
use crate::seed;
use crate::sim::{traces_to_csv, EpisodeTrace, RewardConfig, SignMode, SimError, Simulator};
use crate::synth::{gen_log, gen_world, DropoutCoeffs, OrderPolicy, SynthError};

pub const EVENTS_FILE: &str = "events.csv";
pub const WORLD_FILE: &str = "world.json";
pub const FACTOR_FILE: &str = "factor_model.json";
pub const SUCCESS_FOREST_FILE: &str = "success_forest.json";
pub const DROPOUT_FOREST_FILE: &str = "dropout_forest.json";
pub const PREDICTOR_REPORT_FILE: &str = "predictor_metrics.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE1_FILE: &str = "table1.csv";

/// Policies run by `compare`, in output column order.
pub const POLICIES: [&str; 3] = ["replay", "greedy", "agent"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("the event log has no dropout labels, so the dropout model has a single class; generate or supply a log in which some users drop out")]
    SingleClass,
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Predict(PredictError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<PredictError> for HarnessError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::SingleClass => HarnessError::SingleClass,
            PredictError::InsufficientData(m) => HarnessError::InsufficientData(m),
            other => HarnessError::Predict(other),
        }
    }
}

/// A flat experiment record; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Event log to read; `<out_dir>/events.csv` when unset.
    pub events_path: Option<PathBuf>,
    pub lenient: bool,

    pub n_users: usize,
    pub n_exercises: usize,
    pub n_workbooks: usize,
    pub max_events_per_user: usize,
    pub order_policy: OrderPolicy,
    pub dropout_intercept: f64,
    pub dropout_frustration: f64,
    pub dropout_boredom: f64,

    pub latent_factors: usize,
    pub lambda_user: f64,
    pub lambda_exercise: f64,
    pub mf_learning_rate: f64,
    pub steps_per_interaction: usize,
    pub init_scale: f64,
    pub mf_epochs: usize,

    pub window: usize,
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub dropout_test_frac: f64,
    pub eval_windows: Vec<usize>,

    pub s_target: f64,
    pub alpha: f64,
    pub sign_mode: SignMode,

    pub agent_iterations: usize,
    pub episodes_per_batch: usize,
    pub epsilon: f64,
    pub agent_learning_rate: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub update_epochs: usize,
    pub compare_episodes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let coeffs = DropoutCoeffs::default();
        let mf = Hyperparams::default();
        let agent = AgentConfig::default();
        let reward = RewardConfig::default();
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            events_path: None,
            lenient: false,
            n_users: 500,
            n_exercises: 200,
            n_workbooks: 10,
            max_events_per_user: 100,
            order_policy: OrderPolicy::Random,
            dropout_intercept: coeffs.intercept,
            dropout_frustration: coeffs.frustration,
            dropout_boredom: coeffs.boredom,
            latent_factors: mf.latent_factors,
            lambda_user: mf.lambda_user,
            lambda_exercise: mf.lambda_exercise,
            mf_learning_rate: mf.learning_rate,
            steps_per_interaction: mf.steps_per_interaction,
            init_scale: mf.init_scale,
            mf_epochs: 0,
            window: 10,
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            dropout_test_frac: 0.2,
            eval_windows: vec![1, 3, 5, 10],
            s_target: reward.s_target,
            alpha: reward.alpha,
            sign_mode: reward.sign_mode,
            agent_iterations: agent.iterations,
            episodes_per_batch: agent.episodes_per_batch,
            epsilon: agent.epsilon,
            agent_learning_rate: agent.learning_rate,
            temperature: agent.temperature,
            gamma: agent.gamma,
            update_epochs: agent.update_epochs,
            compare_episodes: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.window == 0 || self.eval_windows.contains(&0) {
            return Err(HarnessError::Config("window sizes must be >= 1".into()));
        }
        if !(self.dropout_test_frac > 0.0 && self.dropout_test_frac < 1.0) {
            return Err(HarnessError::Config("dropout_test_frac must lie in (0, 1)".into()));
        }
        if self.compare_episodes == 0 {
            return Err(HarnessError::Config("compare_episodes must be >= 1".into()));
        }
        self.hyperparams().validate()?;
        Ok(())
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        }
    }

    pub fn events_path(&self) -> PathBuf {
        self.events_path.clone().unwrap_or_else(|| self.out_dir.join(EVENTS_FILE))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn dropout_coeffs(&self) -> DropoutCoeffs {
        DropoutCoeffs {
            intercept: self.dropout_intercept,
            frustration: self.dropout_frustration,
            boredom: self.dropout_boredom,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            latent_factors: self.latent_factors,
            lambda_user: self.lambda_user,
            lambda_exercise: self.lambda_exercise,
            learning_rate: self.mf_learning_rate,
            steps_per_interaction: self.steps_per_interaction,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }

    pub fn forest_config(&self, stream: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            seed: seed::mix(self.seed, stream),
            ..ForestConfig::default()
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            s_target: self.s_target,
            alpha: self.alpha,
            sign_mode: self.sign_mode,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            iterations: self.agent_iterations,
            episodes_per_batch: self.episodes_per_batch,
            epsilon: self.epsilon,
            learning_rate: self.agent_learning_rate,
            temperature: self.temperature,
            gamma: self.gamma,
            update_epochs: self.update_epochs,
            seed: seed::mix(self.seed, 3),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `contents` to `path` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, HarnessError> {
    fs::read(path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Collects digests of files read and written by one command, and writes
/// outputs atomically.
struct Run<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, config: &'a ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
        Ok(Run {
            command,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>, HarnessError> {
        let bytes = read_file(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_string(&mut self, path: &Path) -> Result<String, HarnessError> {
        String::from_utf8(self.read(path)?).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), HarnessError> {
        write_atomic(&self.config.out(name), contents)?;
        self.outputs.insert(name.to_string(), sha256_hex(contents));
        Ok(())
    }

    fn finish(self) -> Result<(), HarnessError> {
        let manifest = Manifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&self.config.out(&format!("manifest-{}.json", self.command)), json.as_bytes())
    }

    fn load_log(&mut self) -> Result<EventLog, HarnessError> {
        let path = self.config.events_path();
        let bytes = self.read(&path)?;
        let parsed = parse_log(BufReader::new(&bytes[..]), self.config.parse_mode())?;
        if parsed.malformed + parsed.duplicates > 0 {
            eprintln!(
                "warning: skipped {} malformed and {} duplicate lines in {}",
                parsed.malformed,
                parsed.duplicates,
                path.display()
            );
        }
        Ok(derive_dropout_labels(parsed.log, Duration::ZERO, &BTreeMap::new()))
    }

    fn load_model(&mut self) -> Result<FactorModel, HarnessError> {
        let text = self.read_string(&self.config.out(FACTOR_FILE))?;
        Ok(FactorModel::from_json(&text)?)
    }

    fn load_forest(&mut self, name: &str) -> Result<Forest, HarnessError> {
        let text = self.read_string(&self.config.out(name))?;
        Ok(Forest::from_json(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub events: usize,
    pub users: usize,
    pub dropouts: usize,
}

/// Generate a synthetic world and its event log.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<GenSummary, HarnessError> {
    let mut run = Run::start("gen", config)?;
    let world = gen_world(config.n_users, config.n_exercises, config.n_workbooks, config.seed)?
        .with_dropout_coeffs(config.dropout_coeffs());
    let log = gen_log(&world, config.order_policy, config.max_events_per_user);
    let mut csv = Vec::new();
    write_log(&log, &mut csv).map_err(io_err(&config.out(EVENTS_FILE)))?;
    run.write(EVENTS_FILE, &csv)?;
    run.write(WORLD_FILE, serde_json::to_string_pretty(&world)?.as_bytes())?;
    run.finish()?;
    Ok(GenSummary {
        events: log.len(),
        users: log.user_count(),
        dropouts: log.dropout_count(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfSummary {
    pub events: usize,
    pub users: usize,
    pub exercises: usize,
    pub training_rmse: f64,
}

/// Stream the log through the factor model, optionally refine with batch
/// epochs, and snapshot it.
pub fn cmd_train_mf(config: &ExperimentConfig) -> Result<MfSummary, HarnessError> {
    let mut run = Run::start("train-mf", config)?;
    let log = run.load_log()?;
    if log.is_empty() {
        return Err(HarnessError::InsufficientData("the event log has no events".into()));
    }
    let model = train_factor_model(&log, config)?;
    let (pred, target): (Vec<f64>, Vec<f64>) = log
        .events()
        .iter()
        .map(|e| Ok((model.predict_score(&e.user_id, &e.exercise_id)?, e.score())))
        .collect::<Result<Vec<_>, FactorError>>()?
        .into_iter()
        .unzip();
    let training_rmse = rmse(&pred, &target).map_err(|e| HarnessError::Predict(e.into()))?;
    run.write(FACTOR_FILE, model.to_json()?.as_bytes())?;
    run.finish()?;
    Ok(MfSummary {
        events: log.len(),
        users: model.n_users(),
        exercises: model.n_exercises(),
        training_rmse,
    })
}

pub fn train_factor_model(log: &EventLog, config: &ExperimentConfig) -> Result<FactorModel, HarnessError> {
    let mut model = FactorModel::new(config.hyperparams())?;
    model.observe_log(log)?;
    model.batch_fit(log, config.mf_epochs)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorSummary {
    pub success_rmse: f64,
    pub baseline_rmse: f64,
    pub dropout_auc: f64,
    pub dropout_train_positives: usize,
}

/// Fit the success and dropout forests, snapshot both and report held-out
/// metrics and the dropout ROC curve.
pub fn cmd_train_predictors(config: &ExperimentConfig) -> Result<PredictorSummary, HarnessError> {
    let mut run = Run::start("train-predictors", config)?;
    let log = run.load_log()?;
    let model = run.load_model()?;
    if log.dropout_count() == 0 {
        return Err(HarnessError::SingleClass);
    }
    let success = fit_success_model(&log, &model, config.window, &config.forest_config(1))?;
    let dropout = fit_dropout_model(
        &log,
        &model,
        config.window,
        &config.forest_config(2),
        config.dropout_test_frac,
        seed::mix(config.seed, 2),
    )?;

    let mut report = Report::default();
    report.push("random_forest", config.window, "success_rmse", success.rmse);
    report.push("global_mean", config.window, "success_rmse", success.baseline_rmse);
    report.push("random_forest", config.window, "dropout_auc", dropout.roc.auc);
    let mut roc = String::from("fpr,tpr\n");
    for (fpr, tpr) in &dropout.roc.points {
        writeln!(roc, "{},{}", fpr, tpr).unwrap();
    }

    run.write(SUCCESS_FOREST_FILE, success.forest.to_json()?.as_bytes())?;
    run.write(DROPOUT_FOREST_FILE, dropout.forest.to_json()?.as_bytes())?;
    run.write(PREDICTOR_REPORT_FILE, report.to_csv().as_bytes())?;
    run.write(ROC_FILE, roc.as_bytes())?;
    run.finish()?;
    Ok(PredictorSummary {
        success_rmse: success.rmse,
        baseline_rmse: success.baseline_rmse,
        dropout_auc: dropout.roc.auc,
        dropout_train_positives: dropout.train_positives,
    })
}

/// Each user's enrolled workbook and recorded exercise order.
pub fn historical_sessions(log: &EventLog) -> BTreeMap<String, (String, Vec<String>)> {
    let mut out = BTreeMap::new();
    for user in log.users() {
        let mut events = log.user_events(user);
        let Some(first) = events.next() else { continue };
        let mut order = vec![first.exercise_id.clone()];
        order.extend(events.map(|e| e.exercise_id.clone()));
        out.insert(user.to_string(), (first.workbook_id.clone(), order));
    }
    out
}

/// Workbook contents as observed in the log, in ascending id order.
pub fn observed_workbooks(log: &EventLog) -> BTreeMap<String, Vec<String>> {
    log.workbook_index()
        .iter()
        .map(|(wb, ex)| (wb.clone(), ex.iter().cloned().collect()))
        .collect()
}

/// The (user, workbook, seed) of every comparison episode. Users are taken
/// in id order, cycling when there are fewer users than episodes.
pub fn episode_plan(
    sessions: &BTreeMap<String, (String, Vec<String>)>,
    episodes: usize,
    base_seed: u64,
) -> Vec<(String, String, u64)> {
    let users: Vec<(&String, &String)> = sessions.iter().map(|(u, (wb, _))| (u, wb)).collect();
    (0..episodes)
        .map(|i| {
            let (u, wb) = users[i % users.len()];
            (u.clone(), wb.clone(), seed::mix(seed::mix(base_seed, 4), i as u64))
        })
        .collect()
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped beforehand.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_half_n = n as f64 * 0.5f64.ln();
    (wins..=n)
        .map(|k| (ln_fact[n] - ln_fact[k] - ln_fact[n - k] + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSummary {
    pub episodes: usize,
    /// Mean episode return per policy, keyed by policy name.
    pub mean_return: BTreeMap<String, f64>,
    /// Mean of agent return minus replay return over paired episodes.
    pub mean_difference: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub sign_test_p: f64,
}

pub fn build_simulator(
    model: FactorModel,
    success: Forest,
    dropout: Forest,
    log: &EventLog,
    config: &ExperimentConfig,
) -> Result<Simulator, HarnessError> {
    Ok(Simulator::new(
        model,
        Box::new(success),
        Box::new(dropout),
        observed_workbooks(log),
        config.window,
        config.reward_config(),
    )?)
}

/// Train the agent, then run replay, greedy and the trained agent on the
/// same paired episodes.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<CompareSummary, HarnessError> {
    let mut run = Run::start("compare", config)?;
    let log = run.load_log()?;
    let model = run.load_model()?;
    let success = run.load_forest(SUCCESS_FOREST_FILE)?;
    let dropout = run.load_forest(DROPOUT_FOREST_FILE)?;
    let sim = build_simulator(model, success, dropout, &log, config)?;

    let sessions = historical_sessions(&log);
    if sessions.is_empty() {
        return Err(HarnessError::InsufficientData("the event log has no users".into()));
    }
    let starts: Vec<(String, String)> = sessions.iter().map(|(u, (wb, _))| (u.clone(), wb.clone())).collect();
    let env = SimEnvironment::new(&sim, starts)?;
    let agent_cfg = config.agent_config();
    let training = train_agent(&env, PolicyParams::zeros(policy_feature_len(sim.model().latent_dim())), &agent_cfg)?;

    let replay = ReplayPolicy::new(sessions.iter().map(|(u, (_, order))| (u.clone(), order.clone())).collect());
    let agent = SoftmaxPolicy {
        params: training.params.clone(),
        temperature: config.temperature,
        sample: false,
    };
    let policies: [&dyn Policy; 3] = [&replay, &GreedyPolicy, &agent];
    let plan = episode_plan(&sessions, config.compare_episodes, config.seed);
    let mut traces: Vec<Vec<EpisodeTrace>> = Vec::new();
    for policy in policies {
        let t = plan
            .iter()
            .enumerate()
            .map(|(i, (u, wb, s))| run_episode(&sim, policy, i, u, wb, *s))
            .collect::<Result<Vec<_>, _>>()?;
        traces.push(t);
    }

    let returns: Vec<Vec<f64>> = traces
        .iter()
        .map(|ts| ts.iter().map(|t| t.cumulative_reward).collect())
        .collect();
    let mut comparison = String::from("episode,user_id");
    for p in POLICIES {
        write!(comparison, ",{}_return", p).unwrap();
    }
    for p in POLICIES {
        write!(comparison, ",{}_cumulative", p).unwrap();
    }
    comparison.push('\n');
    let mut running = [0.0; 3];
    for (i, (u, _, _)) in plan.iter().enumerate() {
        write!(comparison, "{},{}", i, u).unwrap();
        for r in &returns {
            write!(comparison, ",{}", r[i]).unwrap();
        }
        for (k, r) in returns.iter().enumerate() {
            running[k] += r[i];
            write!(comparison, ",{}", running[k]).unwrap();
        }
        comparison.push('\n');
    }

    let n = plan.len() as f64;
    let mean_return: BTreeMap<String, f64> = POLICIES
        .iter()
        .zip(&returns)
        .map(|(p, r)| (p.to_string(), r.iter().sum::<f64>() / n))
        .collect();
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    let mut diff_sum = 0.0;
    for (a, r) in returns[2].iter().zip(&returns[0]) {
        diff_sum += a - r;
        match a.partial_cmp(r) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let summary = CompareSummary {
        episodes: plan.len(),
        mean_difference: diff_sum / n,
        sign_test_p: sign_test(wins, losses),
        mean_return,
        wins,
        losses,
        ties,
    };

    let mut summary_csv = String::from("statistic,value\n");
    for p in POLICIES {
        writeln!(summary_csv, "mean_return_{},{}", p, summary.mean_return[p]).unwrap();
    }
    writeln!(summary_csv, "episodes,{}", summary.episodes).unwrap();
    writeln!(summary_csv, "mean_difference_agent_minus_replay,{}", summary.mean_difference).unwrap();
    writeln!(summary_csv, "agent_wins,{}", wins).unwrap();
    writeln!(summary_csv, "agent_losses,{}", losses).unwrap();
    writeln!(summary_csv, "ties,{}", ties).unwrap();
    writeln!(summary_csv, "sign_test_p,{}", summary.sign_test_p).unwrap();

    run.write(POLICY_FILE, training.params.to_json()?.as_bytes())?;
    run.write(CURVE_FILE, training.curve_csv().as_bytes())?;
    run.write(COMPARISON_FILE, comparison.as_bytes())?;
    run.write(SUMMARY_FILE, summary_csv.as_bytes())?;
    for (p, t) in POLICIES.iter().zip(&traces) {
        run.write(&format!("traces_{}.csv", p), traces_to_csv(t).as_bytes())?;
    }
    run.finish()?;
    Ok(summary)
}

/// Held-out success RMSE of the forest and the global-mean baseline for
/// each configured window size.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let mut run = Run::start("eval", config)?;
    let log = run.load_log()?;
    let model = run.load_model()?;
    let report = evaluate_table1(&log, &model, &config.eval_windows, &config.forest_config(1))?;
    run.write(TABLE1_FILE, report.to_csv().as_bytes())?;
    run.finish()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_small_cases() {
        assert_eq!(sign_test(0, 0), 1.0);
        assert!((sign_test(3, 0) - 0.125).abs() < 1e-15);
        // P(X >= 2 | n = 3) = 4/8
        assert!((sign_test(2, 1) - 0.5).abs() < 1e-15);
        assert!((sign_test(0, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "window": 3}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.window, 3);
        assert_eq!(cfg.n_users, ExperimentConfig::default().n_users);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"windw": 3}"#).is_err());
        let bad = ExperimentConfig { window: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let missing = dir.path().join("nope").join("x.csv");
        assert!(write_atomic(&missing, b"z").is_err());
    }
}
