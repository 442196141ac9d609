mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CommandResult, EvalArgs, PrepareArgs, ReportArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "udaseg", version, about = "Self-training domain adaptation for aerial segmentation")]
struct Cli {
    /// Seed for every stochastic choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// TOML file. For `train` this is the run configuration; a table named
    /// after a subcommand supplies defaults for that subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tile a directory of parent images into a manifest.
    PrepareData(PrepareArgs),
    /// Generate a paired-domain synthetic dataset.
    Synth(SynthArgs),
    /// Train from a configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled manifest.
    Eval(EvalArgs),
    /// Render loss curves, IoU bars and overlays to static files.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let global = commands::Global { seed: cli.seed, force: cli.force, config: cli.config };
    let result = match cli.command {
        Command::PrepareData(a) => commands::prepare_data(&global, a),
        Command::Synth(a) => commands::synth(&global, a),
        Command::Train(a) => commands::train(&global, a),
        Command::Eval(a) => commands::eval(&global, a),
        Command::Report(a) => commands::report(&global, a),
    };
    let result = result.unwrap_or_else(CommandResult::failure);
    result.print();
    ExitCode::from(result.exit_code)
}
