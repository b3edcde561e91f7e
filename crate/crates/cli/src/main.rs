use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

/// Bad invocation or config file (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "brds", version, about = "Row-balanced dual-ratio sparse LSTM toolkit")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a float LSTM on a synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Row-balanced pruning of a checkpoint at fixed ratios.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spar_x: f64,
        #[arg(long)]
        spar_h: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dual-ratio sparsity search.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a grid of ratio pairs at one overall sparsity.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a float model to fixed point and dump the activation tables.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        f: Option<u32>,
    },
    /// Pack a sparse model into an accelerator memory image.
    BuildImage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cycle-level accelerator model over an input sequence.
    Simulate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic performance and resource report.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            epochs,
        } => train_cmd(TrainArgs {
            config: &config,
            out: &out,
            seed,
            epochs,
        }),
        Command::Prune {
            checkpoint,
            spar_x,
            spar_h,
            out,
        } => prune_cmd(&checkpoint, spar_x, spar_h, &out),
        Command::Search {
            config,
            checkpoint,
            out,
            seed,
        } => search_cmd(&checkpoint, &config, &out, seed),
        Command::Sweep {
            config,
            checkpoint,
            out,
            seed,
        } => sweep_cmd(&checkpoint, &config, &out, seed),
        Command::Quantize { model, out, n, f } => quantize_cmd(&model, &out, n, f),
        Command::BuildImage {
            model,
            masks,
            config,
            out,
        } => build_image_cmd(&model, masks.as_deref(), &config, &out),
        Command::Simulate {
            image,
            input,
            config,
            out,
        } => simulate_cmd(&image, &input, &config, &out),
        Command::Report { config, out, compare } => report_cmd(&config, &out, compare.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<brds_core::Error>() {
            if e.is_config() {
                return 2;
            }
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
