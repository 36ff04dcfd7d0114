use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use uavnoma::cli::{self, Command, Overrides};
use uavnoma::{Error, Result};

/// NOMA-aided UAV network simulator.
#[derive(Parser)]
#[command(name = "uavnoma", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Monte Carlo evaluation of a disc, PPP or fixed scenario.
    Stochastic(RunArgs),
    /// Joint trajectory and power optimization with an OMA baseline.
    Trajectory(RunArgs),
    /// Q-learning placement for static users.
    Placement(RunArgs),
    /// Q-learning movement for random-walk users.
    Movement(RunArgs),
    /// Paired comparison of one metric across two runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to a directory under $UAVNOMA_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directory or results.csv of the first run.
    #[arg(long)]
    a: PathBuf,
    /// Second run. Defaults to the first, for comparing two policies of one run.
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    metric: String,
    #[arg(long)]
    policy_a: Option<String>,
    #[arg(long)]
    policy_b: Option<String>,
    /// Also write the paired table to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(expected: Command, args: RunArgs) -> Result<serde_json::Value> {
    let mut scenario = cli::parse_scenario(&args.config)?;
    if scenario.command() != expected {
        return Err(Error::Config {
            field: "mode".into(),
            constraint: format!(
                "`{}` block cannot run under `{}`",
                scenario.mode(),
                expected.name()
            ),
        });
    }
    scenario.apply(&Overrides {
        seed: args.seed,
        trials: args.trials,
        episodes: args.episodes,
        workers: args.workers,
        output: args.out,
    })?;
    Ok(serde_json::to_value(cli::run(&scenario)?)?)
}

fn compare(args: CompareArgs) -> Result<serde_json::Value> {
    let b = args.b.as_ref().unwrap_or(&args.a);
    let report = cli::compare(
        &args.a,
        b,
        &args.metric,
        args.policy_a.as_deref(),
        args.policy_b.as_deref(),
    )?;
    if let Some(path) = &args.out {
        report.write_csv(std::fs::File::create(path)?)?;
    }
    if report.hash_mismatch {
        eprintln!("{}", json!({ "warning": "scenario hashes differ" }));
    }
    Ok(serde_json::to_value(report)?)
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().command {
        Sub::Stochastic(a) => run(Command::Stochastic, a),
        Sub::Trajectory(a) => run(Command::Trajectory, a),
        Sub::Placement(a) => run(Command::Placement, a),
        Sub::Movement(a) => run(Command::Movement, a),
        Sub::Compare(a) => compare(a),
    };
    match outcome {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
            if let Error::Config { field, constraint } = &e {
                body["field"] = json!(field);
                body["constraint"] = json!(constraint);
            }
            eprintln!("{}", json!({ "error": body }));
            ExitCode::from(match e {
                Error::Config { .. } | Error::Parse(_) => 2,
                _ => 1,
            })
        }
    }
}
