//! `covar`: data generation, training, sampling, evaluation and ablations.
//!
//! Exit codes: 0 success, 1 failure or unmet thresholds, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covar_core::toyworld::TaskFamily;

#[derive(Parser, Debug)]
#[command(name = "covar", version, about = "Joint video-action generation on a toy tabletop")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Run kernels on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config entry, e.g. `--set model.hidden_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert episodes in COVR1 format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Total episodes across all splits.
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value = "pick-place")]
        task: TaskFamily,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Validation episodes (default: a tenth).
        #[arg(long)]
        val: Option<usize>,
        /// Test episodes (default: a tenth).
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train the co-generation model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (overrides `dataset_path`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from `out/checkpoint.ckpt`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train the action refiner.
    TrainRefiner {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Co-generation checkpoint for model-sampled coarse actions.
        #[arg(long)]
        covar_ckpt: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Generate video and actions for one scene.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long, default_value = "pick-place")]
        task: TaskFamily,
        #[arg(long, default_value_t = covar_core::flowcore::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Refiner checkpoint applied to the generated actions.
        #[arg(long)]
        refine: Option<PathBuf>,
        /// Upscaling factor of the strip image.
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Roll out a policy on held-out scenes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        refine: Option<PathBuf>,
        /// covar, expert or zero.
        #[arg(long)]
        policy: Option<String>,
        /// Take scenes from this dataset's test split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Euler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        min_success: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate the ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arm names to keep (the first is the reference).
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
}

/// Bad invocation: exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Thresholds not met: exit code 1 without an error trace.
#[derive(Debug)]
pub struct Unmet(pub String);

impl std::fmt::Display for Unmet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Unmet {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.sequential {
        covar_core::par::set_global(covar_core::par::Execution::Sequential);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) if e.is::<Unmet>() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
