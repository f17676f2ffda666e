//! `asep-spde`: generate environments, simulate ASEP, dump kernels and
//! semigroups, solve the SHE and run the diagnostic experiments.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.
//! A manifest (or any JSON object of flag values) can be fed back through
//! `--config`; flags given on the command line override it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "asep-spde", version, about = "Inhomogeneous ASEP and its stochastic heat equation limit")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GlobalOpts {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Exit with status 3 if the command's acceptance gate fails.
    #[arg(long, global = true)]
    pub assert: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// JSON file of flag values, or a manifest from a previous run.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Also write SVG charts where a command has one.
    #[arg(long, global = true)]
    pub svg: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an environment and write env.csv.
    Env(EnvCmd),
    /// Simulate ASEP and write the sampled Gärtner field.
    Simulate(SimulateCmd),
    /// Dump the random-walk kernel or certify the kernel bounds.
    Kernel(KernelCmd),
    /// Spectrum and kernel of the continuum semigroup for a coupled environment.
    Semigroup(SemigroupCmd),
    /// Solve the stochastic heat equation.
    She(SheCmd),
    /// Run one diagnostic experiment.
    Diagnose(DiagnoseCmd),
    /// Convergence ladder of ASEP covariances to the SHE.
    Converge(ConvergeCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Env(_) => "env",
            Command::Simulate(_) => "simulate",
            Command::Kernel(_) => "kernel",
            Command::Semigroup(_) => "semigroup",
            Command::She(_) => "she",
            Command::Diagnose(_) => "diagnose",
            Command::Converge(_) => "converge",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    Homogeneous,
    Iid,
    Fbm,
    Alternating,
}

/// How to obtain the environment: from a file or by generating one.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EnvOpts {
    /// Read the environment from an env.csv file instead of generating it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "homogeneous")]
    pub kind: KindArg,
    /// Number of sites.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Standard deviation of the iid increments (before scaling by N^{-1/2}).
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Bound on the iid increments (before scaling).
    #[arg(long, default_value_t = 1.0)]
    pub bound: f64,
    #[arg(long, default_value_t = 0.75)]
    pub hurst: f64,
    /// Alternating amplitude exponent: `a(x) = ±N^{-delta}`.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct EnvCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    /// Hölder exponent for the assumption report.
    #[arg(long, default_value_t = 0.49)]
    pub u: f64,
    /// Largest admissible Hölder seminorm of R.
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    /// Rates must lie in [1/rate-bound, rate-bound].
    #[arg(long, default_value_t = 4.0)]
    pub rate_bound: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcArg {
    Flat,
    Stationary,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct SimulateCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    /// Final macroscopic time (microscopic time t N²).
    #[arg(long, default_value_t = 0.05)]
    pub t: f64,
    /// Number of equally spaced frames after time 0.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, value_enum, default_value = "flat")]
    pub ic: IcArg,
    /// Trial index within the seed.
    #[arg(long, default_value_t = 0)]
    pub trial: u64,
    /// Also write path.bin.
    #[arg(long)]
    pub binary: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    Half,
    Physical,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct KernelCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    /// Macroscopic times of the dump (walk time t N²).
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
    pub times: Vec<f64>,
    #[arg(long, value_enum, default_value = "half")]
    pub normalization: NormArg,
    /// Write bounds_report.csv instead of a kernel dump.
    #[arg(long)]
    pub check_bounds: bool,
    #[arg(long, default_value_t = 0.49)]
    pub u: f64,
    #[arg(long, default_value_t = 0.3)]
    pub v: f64,
    /// Largest macroscopic time of the bound scan.
    #[arg(long, default_value_t = 1.0)]
    pub t_max: f64,
    /// Number of positive scan times.
    #[arg(long, default_value_t = 12)]
    pub grid_times: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct SemigroupCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    /// Continuum grid size.
    #[arg(long, default_value_t = 128)]
    pub m: usize,
    /// Number of leading eigenpairs in spectrum.csv.
    #[arg(long, default_value_t = 16)]
    pub modes: usize,
    /// Time of the kernel dump.
    #[arg(long, default_value_t = 0.1)]
    pub t: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    /// `Z ≡ 1`.
    One,
    /// `1 + ½ cos 2πx`.
    Cosine,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct SheCmd {
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    #[arg(long, default_value_t = 128)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Time step; defaults to 1/M².
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[arg(long, value_enum, default_value = "cosine")]
    pub init: InitArg,
    /// Solve the deterministic equation.
    #[arg(long)]
    pub noise_off: bool,
    /// Number of recorded frames.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long)]
    pub binary: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckArg {
    QuenchedMean,
    Martingale,
    Beta,
    Holder,
    Decorrelation,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct DiagnoseCmd {
    #[arg(long, value_enum)]
    pub check: CheckArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub env: EnvOpts,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    /// Macroscopic time (quenched mean, martingale, β integral).
    #[arg(long, default_value_t = 0.05)]
    pub t: f64,
    #[arg(long, value_enum, default_value = "stationary")]
    pub ic: IcArg,
    /// Number of eigenmodes in the martingale check.
    #[arg(long, default_value_t = 3)]
    pub modes: usize,
    /// Macroscopic horizon of the β integral.
    #[arg(long, default_value_t = 1.0)]
    pub beta_time: f64,
    /// Sizes for the β integral.
    #[arg(long, value_delimiter = ',', default_value = "64,256")]
    pub sizes: Vec<usize>,
    /// Environment, initial and kernel regularity for the Hölder floors.
    #[arg(long, default_value_t = 1.0)]
    pub u: f64,
    #[arg(long, default_value_t = 0.5)]
    pub u_ic: f64,
    #[arg(long, default_value_t = 0.99)]
    pub v: f64,
    /// Microscopic lags of the decorrelation curve.
    #[arg(long, value_delimiter = ',', default_value = "0,4,16,64,256")]
    pub lags: Vec<f64>,
    /// Microscopic history time of the decorrelation curve.
    #[arg(long, default_value_t = 2048.0)]
    pub history: f64,
    #[arg(long, default_value_t = 96)]
    pub branches: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LadderArg {
    Homogeneous,
    Alternating,
    Iid,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[command(args_override_self = true)]
pub struct ConvergeCmd {
    /// Environment family along the ladder.
    #[arg(long = "env", value_enum, default_value = "homogeneous")]
    #[serde(rename = "env")]
    pub kind: LadderArg,
    #[arg(long, default_value_t = 0.75)]
    pub delta: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub ladder: Vec<usize>,
    /// Macroscopic horizon.
    #[arg(long, default_value_t = 0.05)]
    pub t: f64,
    #[arg(long, default_value_t = 400)]
    pub trials: usize,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 8)]
    pub points: usize,
    #[arg(long, default_value_t = 64)]
    pub slices: usize,
    #[arg(long, default_value_t = 256)]
    pub reference_grid: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub reference_step: f64,
    #[arg(long, default_value_t = 500)]
    pub she_trials: usize,
    #[arg(long, default_value_t = 128)]
    pub she_grid: usize,
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(commands::Status::Ok) => ExitCode::SUCCESS,
        Ok(commands::Status::GateFailed(msg)) => {
            eprintln!("acceptance gate failed: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
