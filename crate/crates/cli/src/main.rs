//! `rltutor`: simulate students, train and select tutoring policies, and
//! explain them.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rltutor_core::runtime::{self, EvalMode, Experiment, PolicySource};
use rltutor_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rltutor", version, about = "Simulated reinforcement-learning math tutor")]
struct Cli {
    /// Experiment TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Wis,
    Rollout,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate students under a policy and write a trajectory file.
    Simulate {
        #[arg(long, default_value_t = 300)]
        students: u64,
        /// `uniform` or a checkpoint path.
        #[arg(long, default_value = "uniform")]
        policy: String,
    },
    /// Train a policy online with PPO against the simulator.
    TrainOnline {
        /// Total students; overrides the config.
        #[arg(long)]
        students: Option<u64>,
        /// Continue an interrupted run in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Select and train an offline policy from a trajectory file.
    TrainOffline {
        #[arg(long)]
        data: PathBuf,
        /// Number of 50/50 splits; overrides the config.
        #[arg(long)]
        splits: Option<usize>,
        /// Run every grid task on the calling thread.
        #[arg(long)]
        serial: bool,
    },
    /// Estimate a policy's mean reward.
    Evaluate {
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum, default_value = "wis")]
        mode: Mode,
        /// Trajectory file (wis mode).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fresh students (rollout mode); overrides the config.
        #[arg(long)]
        students: Option<u64>,
    },
    /// Integrated-gradient attributions and grouped action probabilities.
    Explain {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        data: PathBuf,
    },
    /// Outcome summary of a trajectory file.
    Report {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Writes a JSON summary to stdout; a closed pipe is not an error.
fn print<T: Serialize>(v: &T) {
    let text = serde_json::to_string_pretty(v).expect("summary serializes");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn out_or(cli_out: &Option<PathBuf>, exp: &Experiment, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| exp.config.out_dir.join(default))
}

fn run(cli: Cli) -> Result<()> {
    let mut exp = match &cli.config {
        Some(p) => Experiment::load(p)?,
        None => Experiment::default(),
    };
    if let Some(s) = cli.seed {
        exp = exp.with_seed(s);
    }
    match cli.command {
        Command::Simulate { students, policy } => {
            let out = out_or(&cli.out, &exp, "trajectories.jsonl");
            print(&runtime::simulate(&exp, &PolicySource::parse(&policy), students, &out)?);
        }
        Command::TrainOnline { students, resume } => {
            if let Some(n) = students {
                exp.config.ppo.total_students = n;
                exp.config.ppo.validate()?;
            }
            let out = out_or(&cli.out, &exp, "online");
            let run = runtime::train_online_cmd(&exp, &out, resume)?;
            print(&serde_json::json!({
                "updates": run.learner.updates_done,
                "final_checkpoint": run.final_checkpoint,
                "last_mean_reward": run.diagnostics.last().map(|d| d.mean_reward),
            }));
        }
        Command::TrainOffline { data, splits, serial } => {
            let out = out_or(&cli.out, &exp, "offline");
            let n_splits = splits.unwrap_or(exp.config.offline.n_splits);
            if n_splits == 0 {
                return Err(Error::config("splits", "must be at least 1"));
            }
            let report = runtime::train_offline(&exp, &data, n_splits, &out, !serial)?;
            let chosen = &report.configs[report.chosen];
            print(&serde_json::json!({
                "chosen": chosen.index,
                "config": chosen.config,
                "mean_wis": chosen.mean_wis,
                "mean_ess": chosen.mean_ess,
                "checkpoint": out.join(runtime::OFFLINE_CHECKPOINT),
            }));
        }
        Command::Evaluate {
            policy,
            mode,
            data,
            students,
        } => {
            let mode = match mode {
                Mode::Wis => EvalMode::Wis(data.ok_or_else(|| Error::Usage("wis mode needs --data".into()))?),
                Mode::Rollout => EvalMode::Rollout(students.unwrap_or(exp.config.rollout_students)),
            };
            print(&runtime::evaluate(&exp, &PolicySource::parse(&policy), &mode)?);
        }
        Command::Explain { policy, data } => {
            let out = out_or(&cli.out, &exp, "explain");
            let s = runtime::explain(&exp, &PolicySource::parse(&policy), &data, &out)?;
            print(&serde_json::json!({
                "grouped_attribution_pct": s.attributions.grouped.map(|g| g.map(|v| 100.0 * v)),
                "max_completeness_residual": s.attributions.max_completeness_residual,
                "files": s.files,
            }));
        }
        Command::Report { data } => {
            let out = out_or(&cli.out, &exp, "report");
            print(&runtime::report(&exp, &data, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rltutor: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
