//! `attralign`: train toy models, align terminal attribute distributions,
//! run baselines, evaluate sample files and sweep solver settings.

mod commands;
mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use attralign_core::memory::TrackingAllocator;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{RunContext, TrainTarget};
use config::{ExperimentConfig, InputError, SweepAxis};
use pipeline::Method;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "attralign", version, about = "Batch-level attribute alignment for flow samplers")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `solver.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Vanilla,
    Pg,
}

#[derive(Subcommand)]
enum Command {
    /// Train generator and oracle checkpoints on the configured mixture.
    Train {
        /// Models to train; all by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Vec<TrainTarget>,
    },
    /// Align terminal samples with the E-MSA solver.
    Align,
    /// Run an uncontrolled or particle-guidance baseline.
    Baseline {
        #[arg(long, value_enum, default_value = "vanilla")]
        method: BaselineMethod,
        /// Guidance weight for `pg`.
        #[arg(long, default_value_t = 0.0)]
        weight: f64,
    },
    /// Evaluate a samples CSV against the configured oracle and target.
    Eval {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Sweep one solver setting and tabulate metrics, time and memory.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let path = cli
        .config
        .ok_or_else(|| InputError("--config PATH is required".into()))?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.solver.seed = seed;
    }
    let out_dir = cli.out.unwrap_or_else(|| config.out_dir.clone());
    commands::ensure_out_dir(&out_dir)?;
    let ctx = RunContext {
        config,
        out_dir,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Train { models } => {
            let all = [TrainTarget::Score, TrainTarget::Noise, TrainTarget::Velocity, TrainTarget::Oracle];
            commands::train(&ctx, if models.is_empty() { &all } else { &models })
        }
        Command::Align => commands::align(&ctx),
        Command::Baseline { method, weight } => commands::baseline(
            &ctx,
            match method {
                BaselineMethod::Vanilla => Method::Vanilla,
                BaselineMethod::Pg => Method::Pg(weight),
            },
        ),
        Command::Eval { samples } => commands::eval(&ctx, &samples),
        Command::Sweep { axis, values } => commands::sweep(&ctx, axis, values),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
