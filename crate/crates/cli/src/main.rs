mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use joadaa_core::memory::MemoryMode;
use joadaa_core::model::OnlineHead;
use joadaa_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "joadaa",
    version,
    about = "Joint online action detection and anticipation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `[dataset]` table of a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Stream the test split through a checkpoint and report mAP.
    Eval(EvalArgs),
    /// Train and evaluate every ablation cell for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Render tables and timeline strips for finished runs.
    Report {
        /// Run directories written by `eval` or `ablate`.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
}

/// Overrides shared by commands that build a model.
#[derive(Debug, Clone, Default, Args)]
struct ModelOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "memory-mode")]
    memory_mode: Option<MemoryMode>,
    /// Train without anticipation: no future queries and no anticipation loss.
    #[arg(long = "no-anticipation")]
    no_anticipation: bool,
    #[arg(long)]
    head: Option<OnlineHead>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed epochs, as if interrupted.
    #[arg(long, hide = true)]
    stop_after_epoch: Option<usize>,
    #[command(flatten)]
    overrides: ModelOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Score a model that outputs the ground truth.
    #[arg(long)]
    oracle: bool,
    /// Count the current frame as horizon 1.
    #[arg(long = "horizon-includes-current")]
    horizon_includes_current: bool,
}

/// Stable exit codes.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::UnknownAction(_)
        | Error::DegenerateGrammar { .. }
        | Error::HorizonTooLarge { .. }
        | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::Version { .. } => 5,
        Error::Cell { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => commands::gen_data(&config, &out, seed),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Ablate {
            config,
            out,
            horizons,
        } => commands::ablate(&config, &out, horizons),
        Command::Report {
            runs,
            out,
            horizons,
        } => commands::report(&runs, &out, horizons),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
