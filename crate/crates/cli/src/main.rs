//! `cmvqa`: generate synthetic copy-move datasets, train and evaluate the mixture-of-experts
//! question answering model, run ablations, and self-check gradients.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for a missing input file or directory.
pub const EXIT_MISSING_INPUT: u8 = 2;
/// Exit status for an invalid configuration or override.
pub const EXIT_INVALID_CONFIG: u8 = 3;
/// Exit status when the gradient check fails.
pub const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "cmvqa",
    version,
    about = "Copy-move forgery question answering with a gated mixture of experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tampered-scene dataset
    Gen(GenArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a trained run on one split
    Eval(EvalArgs),
    /// Train and compare every configuration along one ablation axis
    Ablate(AblateArgs),
    /// Check every differentiable operation against finite differences
    Gradcheck(GradcheckArgs),
    /// Export predicted masks and answers for one sample
    Inspect(InspectArgs),
}

/// Config file and `key=value` overrides shared by every subcommand that reads a config.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply to keys it omits
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, applied after the file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of samples (overrides dataset_size)
    #[arg(long)]
    n: Option<usize>,
    /// Global generation seed (overrides data_seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of tampered samples (overrides tamper_ratio)
    #[arg(long)]
    ratio: Option<f64>,
    /// Image side length in pixels (overrides image_size)
    #[arg(long)]
    size: Option<usize>,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen`
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for config, checkpoints and epoch reports
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Write into a non-empty run directory
    #[arg(long)]
    force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CheckpointArg {
    Best,
    Last,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory written by `gen`
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory written by `train`
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Which checkpoint of the run to load
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: CheckpointArg,
    /// Directory for predictions.jsonl and gating.jsonl [default: the run directory]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gen`
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Axis to vary: gating_modality, expert_structure, alpha or topk
    #[arg(long)]
    axis: String,
    /// Model seeds shared by every cell
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output CSV file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per registered check
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Seed for the random instances
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Dataset directory written by `gen`
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory written by `train`
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Sample id to inspect
    #[arg(long)]
    sample: usize,
    /// Which checkpoint of the run to load
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: CheckpointArg,
    /// Output directory for the predicted masks
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
