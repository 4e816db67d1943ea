use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod dataset;

use commands::CliError;

/// Serverless federated learning simulator.
///
/// Every command prints a JSON summary on stdout. Failures print a single
/// JSON line `{"error": <kind>, "message": <text>}` on stderr and exit with
/// a nonzero code (2 for usage errors, 1 otherwise).
#[derive(Debug, Parser)]
#[command(name = "faasfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a dataset into client shards and write them to a directory.
    Partition(PartitionArgs),
    /// Run a full training session on the simulated fabric.
    Run(RunArgs),
    /// Evaluate the latest global model of a persisted session.
    Evaluate(EvaluateArgs),
    /// Estimate FaaS and IaaS client cost from an invocation trace.
    EstimateCost(CostArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    /// Sort by label and cut into contiguous equal shards (non-IID).
    Sorted,
    /// Unbalanced per-user shards with log-normal sizes.
    User,
    /// Uniform random shards.
    Iid,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// `synthetic:features=32,classes=10,train=60000,test=10000[,separation=S][,noise=N]`,
    /// `idx:TRAIN_IMAGES,TRAIN_LABELS[,TEST_IMAGES,TEST_LABELS]`, or a TOML
    /// file with the same keys as the synthetic form.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Number of client shards.
    #[arg(long)]
    pub shards: usize,
    /// Output directory for shard files and manifests.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of every shard held out as its local test split; 0 keeps
    /// everything for training.
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Number of classes for IDX input.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Mean shard size for the `user` strategy.
    #[arg(long, default_value_t = 226.0)]
    pub user_mean: f64,
    /// Log-normal sigma of shard sizes for the `user` strategy.
    #[arg(long, default_value_t = 0.5)]
    pub user_sigma: f64,
    /// Seed for synthetic data, shuffling, user sizes and test splits.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Session TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Fabric TOML; defaults to one private deployment per client.
    #[arg(long)]
    pub fabric: Option<PathBuf>,
    /// Per-round metrics CSV, appended and flushed every round.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Directory written by `partition`.
    #[arg(long)]
    pub shards: PathBuf,
    /// Invocation trace CSV for `estimate-cost`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Persist the parameter store here so `evaluate` can read it later.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Extra virtual seconds charged for every uncached shard load.
    #[arg(long, default_value_t = 0.0)]
    pub shard_latency: f64,
    /// Overrides the session seed (initialisation, selection, shuffling, noise).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Held-out central test shard.
    Central,
    /// Weighted average over client test splits.
    Federated,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub session: String,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Parameter store directory given to `run --store`.
    #[arg(long)]
    pub store: PathBuf,
    /// Directory written by `partition`.
    #[arg(long)]
    pub shards: PathBuf,
    /// Shard used in central mode.
    #[arg(long, default_value = dataset::CENTRAL_TEST_ID)]
    pub central_shard: String,
    /// Number of clients sampled in federated mode; all when omitted.
    #[arg(long)]
    pub clients: Option<usize>,
    /// Seed for the federated client sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Invocation trace CSV written by `run --trace`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Prices TOML.
    #[arg(long)]
    pub prices: PathBuf,
    /// Metrics CSV; its last timestamp is the session wall time.
    #[arg(long)]
    pub wall_time_from: PathBuf,
    /// Cost-versus-round CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Target accuracies for the cost curve, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.85, 0.9])]
    pub targets: Vec<f64>,
    /// Duration multipliers for the sensitivity band, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 3.0])]
    pub multipliers: Vec<f64>,
    /// Include aggregator invocations; by default only client cost counts.
    #[arg(long)]
    pub all_functions: bool,
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "), 2);
        }
    };
    let out = match cli.command {
        Command::Partition(a) => commands::partition(&a),
        Command::Run(a) => commands::run(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::EstimateCost(a) => commands::estimate_cost(&a),
    };
    match out {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError { kind, message }) => fail(kind, &message, 1),
    }
}
