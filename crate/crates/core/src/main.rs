use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tutorsim::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "tutorsim", version, about = "Student-interaction simulator and exercise-sequencing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its event log
    Gen(Common),
    /// Learn user and exercise embeddings from the event log
    TrainMf(Common),
    /// Fit the success and dropout forests
    TrainPredictors(Common),
    /// Train the agent and compare it against replay and greedy
    Compare(Common),
    /// Held-out success RMSE across window sizes
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reject the whole log on any malformed or duplicate line
    #[arg(long, conflicts_with = "lenient")]
    strict: bool,
    /// Skip malformed and duplicate lines
    #[arg(long)]
    lenient: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.strict {
            cfg.lenient = false;
        }
        if self.lenient {
            cfg.lenient = true;
        }
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Gen(c) => {
            let s = harness::cmd_gen(&c.resolve()?)?;
            println!("events={} users={} dropouts={}", s.events, s.users, s.dropouts);
        }
        Command::TrainMf(c) => {
            let s = harness::cmd_train_mf(&c.resolve()?)?;
            println!(
                "events={} users={} exercises={} training_rmse={}",
                s.events, s.users, s.exercises, s.training_rmse
            );
        }
        Command::TrainPredictors(c) => {
            let s = harness::cmd_train_predictors(&c.resolve()?)?;
            println!(
                "success_rmse={} baseline_rmse={} dropout_auc={}",
                s.success_rmse, s.baseline_rmse, s.dropout_auc
            );
        }
        Command::Compare(c) => {
            let s = harness::cmd_compare(&c.resolve()?)?;
            for (p, m) in &s.mean_return {
                println!("mean_return_{}={}", p, m);
            }
            println!(
                "mean_difference={} wins={} losses={} ties={} sign_test_p={}",
                s.mean_difference, s.wins, s.losses, s.ties, s.sign_test_p
            );
        }
        Command::Eval(c) => {
            let report = harness::cmd_eval(&c.resolve()?)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
