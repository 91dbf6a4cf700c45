mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use tutorsim::agents::{softmax_probs, train_agent, AgentConfig, PolicyParams};
use tutorsim::factor::{FactorModel, Hyperparams};
use tutorsim::harness::{train_factor_model, ExperimentConfig};
use tutorsim::predict::{fit_dropout_model, fit_forest, fit_success_model, pearson, rmse, roc_auc, Dataset, Forest, ForestConfig, Task};
use tutorsim::seed;
use tutorsim::synth::{gen_log, gen_world};

use common::{as_refs, brute_auc, direct_rmse, mf_gradient_error, random_model, Bandit};

fn report(n: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {:>2} {:<28} {} ({}; {:.1}s)", n, name, verdict, detail, elapsed.as_secs_f64()).unwrap();
    assert!(pass, "criterion {} failed: {}", n, detail);
}

#[test]
fn c01_gradient_correctness() {
    let t = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let (n, m, l) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let (model, obs) = random_model(seed::mix(101, k), n, m, l);
        worst = worst.max(mf_gradient_error(&model, &obs, 1e-5));
    }
    let el = t.elapsed();
    report(1, "gradient correctness", worst < 1e-5 && el.as_secs_f64() < 5.0, format!("max relative error {:.2e}", worst), el);
}

#[test]
fn c02_rank_recovery() {
    let t = Instant::now();
    let u = [1.0, 2.0, 3.0];
    let v = [0.1, 0.2, 0.3];
    let obs: Vec<(String, String, f64)> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (format!("u{}", i), format!("e{}", j), u[i] * v[j])))
        .collect();
    let mut model = FactorModel::new(Hyperparams { latent_factors: 1, ..Hyperparams::default() }).unwrap();
    model.batch_fit_scores(&as_refs(&obs), 200).unwrap();
    let (p, s): (Vec<f64>, Vec<f64>) = obs.iter().map(|(a, b, s)| (model.predict_score(a, b).unwrap(), *s)).unzip();
    let err = direct_rmse(&p, &s);
    let el = t.elapsed();
    report(2, "rank-1 recovery", err < 0.05 && el.as_secs_f64() < 1.0, format!("training RMSE {:.4}", err), el);
}

#[test]
fn c03_cold_start_improvement() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for s in 0..5u64 {
        let world = gen_world(500, 200, 5, s).unwrap();
        let log = gen_log(&world, tutorsim::synth::OrderPolicy::Random, 100);
        let (held, train): (Vec<_>, Vec<_>) = log.events().iter().enumerate().partition(|(i, _)| i % 10 == 0);
        assert!(train.len() >= 5000, "only {} training events", train.len());
        let targets: Vec<f64> = held.iter().map(|(_, e)| e.score()).collect();
        let mut model = FactorModel::new(Hyperparams { seed: s, ..Hyperparams::default() }).unwrap();
        let mut at = Vec::new();
        for (k, (_, e)) in train.iter().take(5000).enumerate() {
            model.observe(e).unwrap();
            if k + 1 == 500 || k + 1 == 5000 {
                let preds: Vec<f64> = held.iter().map(|(_, e)| model.predict_or_mean(&e.user_id, &e.exercise_id).unwrap()).collect();
                at.push(rmse(&preds, &targets).unwrap());
            }
        }
        pass &= at[1] < at[0];
        lines.push(format!("{:.3}->{:.3}", at[0], at[1]));
    }
    let el = t.elapsed();
    report(3, "cold-start improvement", pass && el.as_secs_f64() < 120.0, format!("held-out RMSE 500->5000 events: {}", lines.join(", ")), el);
}

#[test]
fn c04_average_init_identity() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let (mut model, _) = random_model(seed::mix(4, k), 1 + (k as usize % 8), 1 + (k as usize * 3 % 8), 1 + (k as usize % 4));
        let users = model.user_ids().to_vec();
        let exercises = model.exercise_ids().to_vec();
        let means: Vec<f64> = exercises
            .iter()
            .map(|e| users.iter().map(|u| model.predict_score(u, e).unwrap()).sum::<f64>() / users.len() as f64)
            .collect();
        model.add_user("newcomer").unwrap();
        for (e, m) in exercises.iter().zip(&means) {
            worst = worst.max((model.predict_score("newcomer", e).unwrap() - m).abs());
        }
    }
    report(4, "average-init identity", worst <= 1e-12, format!("max deviation {:.1e}", worst), t.elapsed());
}

#[test]
fn c05_predictor_sanity() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let world = gen_world(cfg.n_users, cfg.n_exercises, cfg.n_workbooks, cfg.seed)
        .unwrap()
        .with_dropout_coeffs(cfg.dropout_coeffs());
    let log = gen_log(&world, cfg.order_policy, cfg.max_events_per_user);
    let model = train_factor_model(&log, &cfg).unwrap();
    let success = fit_success_model(&log, &model, cfg.window, &cfg.forest_config(1)).unwrap();
    let truth: Vec<f64> = success.test_keys.iter().map(|(u, e)| world.true_prob_correct(u, e).unwrap()).collect();
    let corr = pearson(&success.predictions, &truth).unwrap().unwrap_or(0.0);
    let dropout = fit_dropout_model(&log, &model, cfg.window, &cfg.forest_config(2), cfg.dropout_test_frac, seed::mix(cfg.seed, 2)).unwrap();
    let el = t.elapsed();
    let pass = success.rmse < success.baseline_rmse && corr > 0.5 && dropout.roc.auc >= 0.70 && el.as_secs_f64() < 180.0;
    report(
        5,
        "predictor sanity",
        pass,
        format!(
            "success RMSE {:.4} vs baseline {:.4}, corr {:.3}, dropout AUC {:.3}",
            success.rmse, success.baseline_rmse, corr, dropout.roc.auc
        ),
        el,
    );
}

#[test]
fn c06_metric_oracles() {
    let t = Instant::now();
    let mut rng = seed::rng(6);
    let mut exact = true;
    let mut rmse_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..20);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        exact &= roc_auc(&scores, &labels).unwrap().auc == brute_auc(&scores, &labels);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        rmse_err = rmse_err.max((rmse(&a, &b).unwrap() - direct_rmse(&a, &b)).abs());
    }
    report(6, "metric oracles", exact && rmse_err <= 1e-12, format!("AUC exact on 100 instances: {}, max RMSE deviation {:.1e}", exact, rmse_err), t.elapsed());
}

#[test]
fn c07_bandit_convergence() {
    let t = Instant::now();
    let mut probs = Vec::new();
    for s in 0..5 {
        let cfg = AgentConfig { iterations: 200, seed: s, ..AgentConfig::default() };
        let run = train_agent(&Bandit, PolicyParams::zeros(2), &cfg).unwrap();
        probs.push(softmax_probs(&run.params, &[vec![1.0, 0.0], vec![0.0, 1.0]], cfg.temperature)[0]);
    }
    let el = t.elapsed();
    let pass = probs.iter().all(|&p| p > 0.9) && el.as_secs_f64() < 60.0;
    let shown: Vec<String> = probs.iter().map(|p| format!("{:.4}", p)).collect();
    report(7, "bandit convergence", pass, format!("P(optimal) per seed: {}", shown.join(", ")), el);
}

struct PipelineRuns {
    dirs: [PathBuf; 2],
    seconds: f64,
    _tmp: tempfile::TempDir,
}

/// The full default-config pipeline, run twice through the CLI.
fn pipeline_runs() -> &'static PipelineRuns {
    static RUNS: OnceLock<PipelineRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = [tmp.path().join("a"), tmp.path().join("b")];
        let t = Instant::now();
        for d in &dirs {
            for cmd in ["gen", "train-mf", "train-predictors", "compare", "eval"] {
                let out = Command::new(env!("CARGO_BIN_EXE_tutorsim"))
                    .args([cmd, "--out", d.to_str().unwrap()])
                    .output()
                    .unwrap();
                assert!(out.status.success(), "{}: {}", cmd, String::from_utf8_lossy(&out.stderr));
            }
        }
        PipelineRuns {
            dirs,
            seconds: t.elapsed().as_secs_f64() / 2.0,
            _tmp: tmp,
        }
    })
}

fn summary(dir: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(dir.join("summary.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn c08_agent_beats_replay() {
    let runs = pipeline_runs();
    let s = summary(&runs.dirs[0]);
    let (agent, replay, p, n) = (s["mean_return_agent"], s["mean_return_replay"], s["sign_test_p"], s["episodes"]);
    let pass = agent > replay && p < 0.05 && n >= 200.0 && runs.seconds < 600.0;
    report(
        8,
        "agent beats replay",
        pass,
        format!(
            "mean return agent {:.3} vs replay {:.3} (greedy {:.3}), wins {}/{}, sign-test p {:.2e}",
            agent, replay, s["mean_return_greedy"], s["agent_wins"], n, p
        ),
        Duration::from_secs_f64(runs.seconds),
    );
}

#[test]
fn c09_cli_determinism() {
    let t = Instant::now();
    let runs = pipeline_runs();
    let list = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                let n = p.file_name().unwrap().to_str().unwrap();
                !n.starts_with("manifest")
            })
            .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let (a, b) = (list(&runs.dirs[0]), list(&runs.dirs[1]));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let pass = a.len() == b.len() && a.len() >= 15 && differing.is_empty();
    report(9, "CLI determinism", pass, format!("{} output files compared, {} differ", a.len(), differing.len()), t.elapsed());
}

#[test]
fn c10_snapshot_roundtrips() {
    let t = Instant::now();
    let mut rng = seed::rng(10);
    let (model, _) = random_model(10, 8, 8, 4);
    let back = FactorModel::from_json(&model.to_json().unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let u = format!("u{}", rng.random_range(0..8));
        let e = format!("e{}", rng.random_range(0..8));
        worst = worst.max((model.predict_score(&u, &e).unwrap() - back.predict_score(&u, &e).unwrap()).abs());
    }

    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let reg: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 - r[1] + rng.random_range(-0.1..0.1)).collect();
    let cls: Vec<f64> = rows.iter().map(|r| if r[2] + r[3] > 0.0 { 1.0 } else { 0.0 }).collect();
    let cfg = ForestConfig { n_trees: 30, seed: 10, ..ForestConfig::default() };
    for (targets, task) in [(reg, Task::Regression), (cls, Task::Classification)] {
        let forest = fit_forest(&Dataset::from_rows(&rows, &targets).unwrap(), &cfg, task).unwrap();
        let reloaded = Forest::from_json(&forest.to_json().unwrap()).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
            worst = worst.max((forest.predict(&x).unwrap() - reloaded.predict(&x).unwrap()).abs());
        }
    }
    report(10, "snapshot round-trips", worst <= 1e-12, format!("max prediction deviation {:.1e} over 3000 inputs", worst), t.elapsed());
}
