use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uck::commands::{
    execute, rerun, resolve_ablate, resolve_eval, resolve_generate, resolve_train, AblateOptions, CommandConfig,
    EvalOptions, GenerateOptions, TrainOptions,
};
use uck::Error;

/// Graph reasoning with rule attention and bounded state dynamics.
#[derive(Parser)]
#[command(name = "uck", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled dataset.
    Generate(GenerateOptions),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainOptions),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalOptions),
    /// Run a paired-seed ablation grid (resumable).
    Ablate(AblateOptions),
    /// Execute the command recorded in a manifest again.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn run(cli: Cli) -> Result<CommandConfig, Error> {
    let config = match cli.command {
        Command::Generate(o) => resolve_generate(&o),
        Command::Train(o) => resolve_train(&o)?,
        Command::Eval(o) => resolve_eval(&o),
        Command::Ablate(o) => resolve_ablate(&o)?,
        Command::Rerun { manifest } => return rerun(&manifest),
    };
    execute(&config)?;
    Ok(config)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(config) => {
            eprintln!("{} done; manifest at {}", config.name(), config.manifest_path().display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
