//! `parpo`: runs simulations, estimator comparisons, bound checks, skill-graph
//! operations and reward-model training from one TOML config.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::RunConfig;

/// Exit 1 for runtime failures (divergence, failed bounds, I/O), 2 for bad
/// usage, configs or input files.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

const SIMULATE_HELP: &str = "\
Artifacts:
  world.tsv             noiseless reward table: user_id, query_id, trajectory_id, reward_base, reward_pers
  metrics.csv           step, optimizer, mean_reward, mean_pers_reward, adv_error
                        (expected rewards of the current policy; adv_error is the mean absolute
                        gap between the estimator's advantage and the oracle advantage)
  resolved_config.toml  the full config including defaults; feeding it back reproduces the run";

const COMPARE_HELP: &str = "\
Artifacts:
  compare_report.json   per-trial advantage errors and final personalized rewards per optimizer,
                        means over trials, PARPO error wins and ordering counts
  resolved_config.toml";

const BOUNDS_HELP: &str = "\
Artifacts:
  bounds_report.json    every bound with its left side, right side and pass/fail per query,
                        plus case and violation counts
  resolved_config.toml
Exits 1 if any bound fails.";

const TRAIN_RM_HELP: &str = "\
Artifacts:
  model.txt             trained collaborative-filtering reward model
  loss_trace.csv        step, rec, int, conf, orth, user, reg, align, total
                        (unweighted terms on the evaluation batch; step 0 is before training)
  resolved_config.toml
The gradient check runs first; a failed check exits 1 without training.";

#[derive(Parser)]
#[command(name = "parpo", version, about = "Personalized advantage estimation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) a world and train one policy on it.
    #[command(after_help = SIMULATE_HELP)]
    Simulate,
    /// Compare estimators over seeded trials.
    #[command(after_help = COMPARE_HELP)]
    Compare,
    /// Check every estimation bound on the world's ground-truth table.
    #[command(name = "verify-bounds", after_help = BOUNDS_HELP)]
    VerifyBounds,
    /// Build, query or cluster a skill graph.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Train the collaborative-filtering reward model on an interaction file.
    #[command(name = "train-rm", after_help = TRAIN_RM_HELP)]
    TrainRm,
}

#[derive(Subcommand)]
pub enum GraphCommand {
    /// Ingest node/embedding/edge records into graph.json in the output directory.
    Build {
        /// Record file: `node <id> <kind> [payload]`, `embedding <id> <x>...`, `edge <src> <dst> <kind> <weight>`.
        #[arg(long)]
        records: PathBuf,
        /// Existing graph to extend.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Print the ranked skills for a user and query embedding with each score factor.
    Query {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        user: String,
        /// Comma-separated query embedding.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        query: Vec<f64>,
    },
    /// Print every hierarchy level with its community count and modularity.
    Communities {
        #[arg(long)]
        graph: PathBuf,
    },
}

fn resolve(global: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            let cwd = std::env::current_dir().map_err(|e| Failure::Runtime(e.to_string()))?;
            c.absolutize(&cwd)?;
            c
        }
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.out_dir = std::path::absolute(o).map_err(|e| Failure::Usage(format!("bad --out: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::VerifyBounds => commands::verify_bounds(&cfg),
        Command::Graph(g) => commands::graph(&cfg, g),
        Command::TrainRm => commands::train_rm(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
