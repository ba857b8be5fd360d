//! Batch front end: every subcommand reads files, writes files, prints its
//! metrics JSON on stdout and returns an exit code (0 success, 1 invalid
//! input, 2 numerical failure).

mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relfeat::canonical::{InverseMode, DEFAULT_PINV_TOL};
use relfeat::datasets::DEFAULT_SHIFT_STD;

pub use output::{Metrics, RunManifest};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or inputs.
    Usage(String),
    /// Checks that ran but did not hold.
    Failed(String),
    Core(relfeat::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<relfeat::Error> for CliError {
    fn from(e: relfeat::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "relfeat", version, about = "Learn relevant feature pairs and infer conditional expectations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the two feature networks.
    Train(TrainArgs),
    /// Canonical spectrum of a trained model on a dataset.
    Spectrum(SpectrumArgs),
    /// Conditional expectations for new observations.
    Infer(InferArgs),
    /// Argmax classification with one-hot label targets.
    Classify(ClassifyArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Exact channel SVD or Gaussian closed forms.
    Oracle(OracleArgs),
    /// Run a suite of identity checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InverseArgs {
    /// Relative eigenvalue cutoff of the pseudo-inverse.
    #[arg(long, conflicts_with = "ridge_eps")]
    pub pinv_tol: Option<f64>,
    /// Use (M + εI)⁻¹ instead of the pseudo-inverse.
    #[arg(long)]
    pub ridge_eps: Option<f64>,
}

impl InverseArgs {
    pub fn mode(&self) -> CliResult<InverseMode> {
        match (self.pinv_tol, self.ridge_eps) {
            (_, Some(eps)) if !(eps >= 0.0 && eps.is_finite()) => Err(CliError::Usage(format!("--ridge-eps {eps}"))),
            (_, Some(eps)) => Ok(InverseMode::Ridge { eps }),
            (Some(tol), None) if !(tol >= 0.0 && tol.is_finite()) => Err(CliError::Usage(format!("--pinv-tol {tol}"))),
            (tol, None) => Ok(InverseMode::Pseudo { tol: tol.unwrap_or(DEFAULT_PINV_TOL) }),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    Gaussian,
    RingDisk,
    Blobs,
    Discrete,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Also write an independent test set of this size (seed + 1).
    #[arg(long, default_value_t = 0)]
    pub test_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Angular gap of the ring in radians.
    #[arg(long, default_value_t = 0.0)]
    pub gap: f64,
    #[arg(long, default_value_t = DEFAULT_SHIFT_STD)]
    pub shift: f64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 4)]
    pub nx: usize,
    #[arg(long, default_value_t = 4)]
    pub ny: usize,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    /// Dataset path (default: OUT/data.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test-set path (default: OUT/test.csv).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionArg {
    /// Observe y, infer functions of x.
    YToX,
    /// Observe x, infer functions of y.
    XToY,
}

impl From<DirectionArg> for relfeat::discrete::Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::YToX => relfeat::discrete::Direction::YToX,
            DirectionArg::XToY => relfeat::discrete::Direction::XToY,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k0: usize,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub inverse: InverseArgs,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// Use the raw Y columns (e.g. one-hot labels) as fixed Y features.
    #[arg(long)]
    pub y_identity: bool,
    /// Targets whose statistics are stored in the model, e.g. `x0,x0^2`.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long, value_enum, default_value = "y-to-x")]
    pub direction: DirectionArg,
    /// Model path (default: OUT/model.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of canonical pairs to report (default k0).
    #[arg(long)]
    pub k_report: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose observed-side columns are the observations.
    #[arg(long, conflicts_with = "obs")]
    pub data: Option<PathBuf>,
    /// Inline observations: rows separated by `;`, values by `,`.
    #[arg(long)]
    pub obs: Option<String>,
    /// Refit target statistics before inferring (needs --fit-data).
    #[arg(long, requires = "fit_data")]
    pub targets: Option<String>,
    /// Training pairs for --targets.
    #[arg(long)]
    pub fit_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "y-to-x")]
    pub direction: DirectionArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub inverse: InverseArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Discrete,
    Gaussian,
}

#[derive(Args, Debug, Clone)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub kind: OracleKind,
    /// Joint table CSV (discrete); random when absent.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub nx: usize,
    #[arg(long, default_value_t = 4)]
    pub ny: usize,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub k0: usize,
    /// Observations for the Gaussian posterior moments.
    #[arg(long, value_delimiter = ',', default_value = "2.0")]
    pub y: Vec<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gaussian,
    Discrete,
    Gradients,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let argv_text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(&cli.command, &argv_text) {
        Ok(metrics) => {
            use std::io::Write;
            let text = serde_json::to_string_pretty(&metrics).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
