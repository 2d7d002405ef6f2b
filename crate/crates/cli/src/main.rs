//! `student-rmt`: density-of-states curves, Monte Carlo spectra,
//! Kullback-Leibler benchmark tables and the windowed empirical protocol.
//!
//! Exit codes: 0 success, 1 numerical or I/O failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use student_rmt::SigmaLaw;

mod commands;
mod output;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Failure(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<student_rmt::Error> for CliError {
    fn from(e: student_rmt::Error) -> Self {
        match e {
            student_rmt::Error::InvalidParameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "student-rmt", version, about = "Spectra and entropy benchmarks for Wishart-Student correlation matrices")]
struct Cli {
    /// Worker threads; defaults to the available parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Limiting eigenvalue density on a grid.
    Dos(DosArgs),
    /// Pooled eigenvalue histogram of Monte Carlo estimators.
    Sample(SampleArgs),
    /// Expected Kullback-Leibler entropies Z/N and Z'/N.
    KlTable(KlTableArgs),
    /// Windowed spectra of a returns file against the analytic densities.
    Empirical(EmpiricalArgs),
    /// Writes a synthetic returns file with a market mode.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    Student,
    Gaussian,
    Lognormal,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct LawArgs {
    /// Volatility law.
    #[arg(long, value_enum, default_value_t = LawKind::Student)]
    pub law: LawKind,
    /// Student tail exponent (> 2).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Variance of ln σ² for the log-normal law.
    #[arg(long)]
    pub log_variance: Option<f64>,
}

impl LawArgs {
    pub fn law(&self) -> Result<SigmaLaw, CliError> {
        Ok(match self.law {
            LawKind::Student => SigmaLaw::student(
                self.mu.ok_or_else(|| CliError::Usage("--mu is required for --law student".into()))?,
            )?,
            LawKind::Gaussian => SigmaLaw::DeltaGaussian,
            LawKind::Lognormal => SigmaLaw::log_normal(
                self.log_variance
                    .ok_or_else(|| CliError::Usage("--log-variance is required for --law lognormal".into()))?,
            )?,
        })
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DosArgs {
    #[command(flatten)]
    pub law: LawArgs,
    /// Aspect ratio T/N (> 1).
    #[arg(long = "Q")]
    pub q: f64,
    /// Uniform grid `lo,hi`; by default a grid adapted to the edges and tail.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub lambda_range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 400)]
    pub points: usize,
    /// Solve every point exactly instead of switching to the asymptotic tail.
    #[arg(long)]
    pub exact_tail: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Pearson,
    Mle,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub law: LawArgs,
    #[arg(long = "N")]
    pub n: usize,
    /// Aspect ratio; T = round(Q·N).
    #[arg(long = "Q")]
    pub q: f64,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EstimatorKind::Pearson)]
    pub estimator: EstimatorKind,
    #[arg(long, default_value_t = 120)]
    pub bins: usize,
    /// Upper end of the histogram; defaults to the 99.5% quantile of the pooled eigenvalues.
    #[arg(long)]
    pub max_lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct KlTableArgs {
    /// Tail exponents; `inf` gives the Gaussian row.
    #[arg(long, value_delimiter = ',', required = true)]
    #[serde(serialize_with = "as_strings")]
    pub mu_list: Vec<f64>,
    #[arg(long = "Q-list", value_delimiter = ',', required = true)]
    pub q_list: Vec<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

// JSON has no infinity; `inf` must survive in the manifest.
fn as_strings<S: serde::Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingKind {
    DropDate,
    ZeroFill,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffKind {
    Poisson,
    Independent,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct EmpiricalArgs {
    /// Returns CSV: header `date,TICKER...`, ISO dates, decimal returns.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1125)]
    pub window: usize,
    #[arg(long, default_value_t = 15)]
    pub step: usize,
    /// Number of top eigenvalues removed from each window.
    #[arg(long = "Km", default_value_t = 0)]
    pub km: usize,
    /// Tail exponent of the Student overlay.
    #[arg(long)]
    pub mu: f64,
    #[arg(long)]
    pub rescale_volatility: bool,
    #[arg(long, value_enum, default_value_t = MissingKind::DropDate)]
    pub missing: MissingKind,
    #[arg(long, value_enum, default_value_t = CutoffKind::Poisson)]
    pub cutoff_model: CutoffKind,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    pub cutoff_probs: Vec<f64>,
    /// Also report distances for K_m = 2..10.
    #[arg(long)]
    pub km_sweep: bool,
    #[arg(long, default_value_t = 120)]
    pub bins: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long = "N", default_value_t = 450)]
    pub n: usize,
    #[arg(long = "T", default_value_t = 1410)]
    pub t: usize,
    #[arg(long, default_value_t = 3.85)]
    pub mu: f64,
    /// Pairwise correlation of the one-factor market mode.
    #[arg(long, default_value_t = 0.25)]
    pub market_correlation: f64,
    #[arg(long, default_value_t = 2003)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Failure(e.to_string()))?;
    let written = match cli.command {
        Command::Dos(a) => commands::dos(a)?,
        Command::Sample(a) => commands::sample(a)?,
        Command::KlTable(a) => commands::kl_table(a)?,
        Command::Empirical(a) => commands::empirical(a)?,
        Command::Synth(a) => commands::synth(a)?,
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
