use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aniso_cascade::commands::{
    evaluate_command, infer_command, phantom_gen, render_command, rf_command, train_command, InferOptions,
    RenderOptions,
};
use aniso_cascade::error::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "aniso-cascade", version, about = "Cascaded anisotropic CNN segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom cases
    PhantomGen {
        /// Phantom parameter file (key = value); defaults if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the first case
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train one network, or all nine when the config names no stage/view
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of labelled cases
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and loss logs
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Print the loss every N iterations (0 = never)
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Segment a case directory, or every case under a directory
    Infer {
        /// Model-set manifest
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Label file (single case) or output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Run models that carry no normalization statistics on raw intensities
        #[arg(long)]
        allow_unnormalized: bool,
        /// Also write per-stage probability volumes
        #[arg(long)]
        probabilities: bool,
    },
    /// Score predictions against ground truth
    Evaluate {
        /// Prediction directory
        #[arg(long)]
        data: PathBuf,
        /// Directory of labelled cases
        #[arg(long)]
        truth: PathBuf,
        /// CSV report path
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-axis receptive fields
    Rf {
        /// Network config file; the three built-in networks if omitted
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a slice with its label overlay to PNG
    Render {
        /// Case directory
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label file to overlay instead of the case's own labels
        #[arg(long)]
        labels: Option<PathBuf>,
        /// 0 = x, 1 = y, 2 = z
        #[arg(long, default_value_t = 2)]
        axis: usize,
        /// Defaults to the middle slice
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::PhantomGen { config, out, seed, count } => phantom_gen(config.as_deref(), &out, seed, count),
        Command::Train { config, data, out, seed, threads, log_every } => {
            train_command(&config, &data, &out, seed, threads, &|kind, view, r| {
                if log_every > 0 && r.iteration % log_every == 0 {
                    eprintln!("{kind}/{view} iteration {} loss {:.4}", r.iteration, r.loss);
                }
            })
        }
        Command::Infer { config, data, out, threads, allow_unnormalized, probabilities } => {
            infer_command(&config, &data, &out, &InferOptions { threads, allow_unnormalized, probabilities })
        }
        Command::Evaluate { data, truth, out } => evaluate_command(&data, &truth, &out),
        Command::Rf { config } => rf_command(config.as_deref()),
        Command::Render { data, out, labels, axis, slice, channel } => {
            render_command(&data, &out, &RenderOptions { labels, channel, axis, slice })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
