//! `dfm`: command-line pipelines for fractured-media conductivity upscaling.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfm_core::{Error, Result};

use commands::BackendKind;

#[derive(Parser)]
#[command(
    name = "dfm",
    about = "Upscaling of hydraulic conductivity in 3D fractured media",
    version
)]
struct Cli {
    /// TOML configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs are invariant to this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; also where commands look for earlier outputs.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Dotted-key configuration overrides, e.g. --set domain.length=60.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fracture network and matrix conductivity field.
    Gen,
    /// Homogenize the generated sample into a coarse tensor field.
    Upscale {
        #[arg(long, value_enum)]
        backend: BackendKind,
    },
    /// Compare numerical and surrogate coarse fields on macro-scale problems.
    Benchmark,
    /// Generate a training dataset of homogenization samples.
    BuildDataset,
    /// Train the surrogate network on a dataset.
    Train,
    /// Apply a trained surrogate to the dataset's test split.
    Predict,
    /// Summarize predictions as NRMSE tables.
    Report,
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Error::parameter("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::parameter(format!("worker pool: {e}")))?;
    }
    let config = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Gen => commands::cmd_gen(&config, &cli.out),
        Command::Upscale { backend } => commands::cmd_upscale(&config, *backend, &cli.out),
        Command::Benchmark => commands::cmd_benchmark(&config, &cli.out),
        Command::BuildDataset => commands::cmd_build_dataset(&config, &cli.out),
        Command::Train => commands::cmd_train(&config, &cli.out),
        Command::Predict => commands::cmd_predict(&config, &cli.out),
        Command::Report => commands::cmd_report(&config, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
