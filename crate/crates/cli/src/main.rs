//! `meg-enum`: estimate how many dipolar sources are simultaneously active
//! in sensor-array data.
//!
//! Four commands cover the workflow: `simulate` writes a synthetic
//! measurement with known ground truth, `calibrate` sweeps decision
//! thresholds over a signal-to-noise-by-source-count grid, `enumerate` runs
//! a source-count estimator on stored data, and `compare` scores the
//! F-ratio walk against the information-criterion baselines on identical
//! data. Every command takes `--config`, `--seed`, `--out`, and `--preset`,
//! writes its outputs atomically, and finishes with a digest manifest.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numerical failure.

mod manifest;
mod ops;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// How a failure maps to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Bad flags or configuration: exit 1.
    Config,
    /// Unreadable or incompatible data files: exit 2.
    Data,
    /// The computation itself failed: exit 3.
    Compute,
}

/// A failure tagged with the phase it occurred in.
#[derive(Debug)]
pub struct Failure {
    pub phase: Phase,
    pub error: meg_enum_core::Error,
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self.phase {
            Phase::Config => 1,
            Phase::Data => 2,
            Phase::Compute => 3,
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Attach a phase to a core result.
pub trait WithPhase<T> {
    fn config(self) -> CmdResult<T>;
    fn data(self) -> CmdResult<T>;
    fn compute(self) -> CmdResult<T>;
}

impl<T> WithPhase<T> for meg_enum_core::Result<T> {
    fn config(self) -> CmdResult<T> {
        self.map_err(|error| Failure { phase: Phase::Config, error })
    }
    fn data(self) -> CmdResult<T> {
        self.map_err(|error| Failure { phase: Phase::Data, error })
    }
    fn compute(self) -> CmdResult<T> {
        self.map_err(|error| Failure { phase: Phase::Compute, error })
    }
}

/// Config failure with a plain message.
pub fn usage(msg: impl Into<String>) -> Failure {
    Failure { phase: Phase::Config, error: meg_enum_core::Error::InvalidInput(msg.into()) }
}

#[derive(Parser)]
#[command(name = "meg-enum", version, about = "Source enumeration for MEG-style sensor arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a measurement with known ground truth.
    Simulate(SimulateArgs),
    /// Calibrate F-ratio thresholds over a signal-to-noise x count grid.
    Calibrate(CalibrateArgs),
    /// Estimate the source count of a stored measurement.
    Enumerate(EnumerateArgs),
    /// Score F-ratio, AIC, and MDL on identical Monte Carlo data.
    Compare(CompareArgs),
}

/// Flags shared by every command.
#[derive(Args)]
struct CommonArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Built-in parameter scales.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    /// Laptop-scale repetition counts.
    Desk,
    /// Published repetition counts (same desk-scale geometry).
    Paper,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter scale preset.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter scale preset; a config file refines it.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

/// Estimation methods selectable on the command line.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    /// Sequential F-ratio walk with calibrated thresholds.
    Fratio,
    /// Sequential F-ratio walk with nominal F quantiles.
    Nominal,
    /// Akaike information criterion on the eigenvalue spectrum.
    Aic,
    /// Minimum description length on the eigenvalue spectrum.
    Mdl,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter scale preset.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Measurement file (or trial file with --whiten).
    #[arg(long)]
    data: PathBuf,
    /// Calibrated threshold CSV (required by --method fratio).
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Methods to run, comma-separated.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fratio")]
    method: Vec<Method>,
    /// Orientation handling of the dipole scan.
    #[arg(long, default_value = "fixed")]
    mode: String,
    /// Treat the data file as trials and prewhiten before estimating.
    #[arg(long)]
    whiten: bool,
    /// Signal-to-noise ratio in dB for the threshold lookup; defaults to
    /// the whitening estimate when --whiten is given.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Test level of the nominal F-quantile thresholds.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Sampling rate assumed for trial files, Hz.
    #[arg(long, default_value_t = 1000.0)]
    sampling_rate_hz: f64,
}

/// Compare campaign presets.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ComparePreset {
    /// Laptop-scale Monte Carlo grid.
    Desk,
    /// Published repetition counts on the same grid.
    Paper,
    /// Shell-phantom campaign: delayed superposition, free orientation.
    Phantom,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Campaign preset; a config file refines it.
    #[arg(long, value_enum, default_value = "desk")]
    preset: ComparePreset,
    /// Calibrated threshold CSV for the F-ratio method.
    #[arg(long)]
    thresholds: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.error);
        std::process::exit(e.exit_code());
    }
    let outcome = match cli.command {
        Command::Simulate(args) => ops::simulate(args).map(|()| 0),
        Command::Calibrate(args) => ops::calibrate(args),
        Command::Enumerate(args) => ops::enumerate(args).map(|()| 0),
        Command::Compare(args) => ops::compare(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.error);
            std::process::exit(e.exit_code());
        }
    }
}

/// Cap worker parallelism from `MEG_ENUM_THREADS` (default: all cores).
fn configure_threads() -> CmdResult<()> {
    let Ok(raw) = std::env::var("MEG_ENUM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("MEG_ENUM_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("could not configure the {n}-thread worker pool: {e}")))
}
