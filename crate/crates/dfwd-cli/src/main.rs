//! `dfwd` — one binary for training, evaluation, robustness sweeps,
//! profiling, and the property-check suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 training divergence (non-finite values).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfwd_core::Error;

mod commands;
mod context;

// Measured peak-memory numbers in `profile` come from the tracking
// allocator; it has to be this binary's global allocator to see anything.
#[global_allocator]
static ALLOC: dfwd_core::alloc::TrackingAllocator = dfwd_core::alloc::TrackingAllocator;

#[derive(Parser)]
#[command(name = "dfwd", version, about = "Distance-forward local-learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network: writes checkpoint, per-epoch metrics CSV, manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint: overall and per-unit accuracy, separation
    Eval(EvalArgs),
    /// Noise and quantization sweeps around a trained checkpoint
    Robustness(RobustnessArgs),
    /// Analytic and measured memory/backward-time profile across strategies
    Profile(ProfileArgs),
    /// Run every property check; first violation fails the run
    Verify(VerifyArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines (defaults apply when omitted)
    #[arg(long)]
    pub(crate) config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub(crate) set: Vec<String>,
    /// Directory for checkpoints, CSVs, and the manifest
    #[arg(long, default_value = "runs")]
    pub(crate) out: PathBuf,
    /// Random seed (shorthand for --set seed=N)
    #[arg(long)]
    pub(crate) seed: Option<u64>,
    /// Worker threads; 1 is the reproducibility default
    #[arg(long, default_value_t = 1)]
    pub(crate) threads: usize,
    /// Dataset root directory (else $DFWD_DATA, else ./data)
    #[arg(long)]
    pub(crate) dataset_root: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub(crate) checkpoint: PathBuf,
}

#[derive(Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    /// Trained checkpoint the sweeps perturb
    #[arg(long)]
    pub(crate) checkpoint: PathBuf,
    /// Comma-separated sweep kinds: poisson, impulse, quant, grad_noise.
    /// grad_noise retrains the configured model once per noise level.
    #[arg(long, default_value = "poisson,impulse,quant")]
    pub(crate) kinds: String,
}

#[derive(Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,
    /// Strategies to profile, comma-separated
    #[arg(long, default_value = "greedy,df_o,df_r,backprop")]
    pub(crate) strategies: String,
    /// Depths (hidden layers) to sweep, comma-separated
    #[arg(long, default_value = "5,10,15,20,25")]
    pub(crate) depths: String,
    /// Uniform hidden width of the profiled multilayer perceptron
    #[arg(long, default_value_t = 500)]
    pub(crate) width: usize,
    /// Model rows per step (expanded batch rows; must be even)
    #[arg(long, default_value_t = 64)]
    pub(crate) batch: usize,
    /// Timing repetitions per cell
    #[arg(long, default_value_t = 50)]
    pub(crate) reps: usize,
    /// Discarded warmup repetitions per cell
    #[arg(long, default_value_t = 10)]
    pub(crate) warmups: usize,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub(crate) common: CommonArgs,
}

fn main() -> ExitCode {
    // die quietly when stdout is closed mid-stream (e.g. piped into head)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Robustness(args) => commands::robustness(&args),
        Command::Profile(args) => commands::profile(&args),
        Command::Verify(args) => commands::verify(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Verify { .. } => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}
