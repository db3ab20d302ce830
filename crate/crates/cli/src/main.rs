//! `dynfactor` command-line front end.

mod commands;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dynfactor::error::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "dynfactor", version, about = "Dynamic factor models for stock return panels")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Write tables as JSON instead of CSV.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for numerical batches (1 disables parallelism).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "DYNFACTOR_OUT_DIR", default_value = ".")]
    pub out: PathBuf,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Price CSV to a filtered, centered percent-return panel.
    Clean(CleanArgs),
    /// Principal components of a return panel.
    Pca(PcaArgs),
    /// Bai–Ng information criteria for the number of factors.
    Ic(IcArgs),
    /// Maximum-likelihood fit of the dynamic factor model.
    Fit(FitArgs),
    /// CAPM betas against a market index.
    Capm(CapmArgs),
    /// Correlation tables for a fitted run.
    Diagnose(DiagnoseArgs),
    /// AR(1) and factor-augmented bridge nowcasts of GDP growth.
    Nowcast(NowcastArgs),
    /// Simulate a panel from a parameter file.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct CleanArgs {
    /// Price CSV: a date column followed by one column per ticker.
    #[arg(long)]
    pub input: PathBuf,
    /// Maximum fraction of missing prices a series may have.
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    /// Keep each series' mean in the returns.
    #[arg(long)]
    pub no_center: bool,
    /// Simple returns instead of percent points.
    #[arg(long)]
    pub no_percent: bool,
    #[arg(long, default_value = "%Y-%m-%d")]
    pub date_format: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Use the correlation matrix instead of the covariance matrix.
    #[arg(long)]
    pub correlation: bool,
}

#[derive(Args, Debug)]
pub struct IcArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Return panel written by `clean` or `simulate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of common factors.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Factor VAR order.
    #[arg(long, required_unless_present = "auto_order")]
    pub p: Option<usize>,
    /// Idiosyncratic AR order.
    #[arg(long, required_unless_present = "auto_order")]
    pub q: Option<usize>,
    /// Choose (p, q) by BIC over the grids.
    #[arg(long, conflicts_with_all = ["p", "q"])]
    pub auto_order: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub p_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
    pub q_grid: Vec<usize>,
    /// Skip the Hessian and its standard errors.
    #[arg(long)]
    pub no_std_errors: bool,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct CapmArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Market index levels (date column plus one price column).
    #[arg(long)]
    pub market: PathBuf,
    /// The market file already holds percent returns.
    #[arg(long)]
    pub market_returns: bool,
    /// Per-period risk-free rate in the same units as the returns.
    #[arg(long, default_value_t = 0.0)]
    pub risk_free: f64,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory of a `fit` run.
    #[arg(long)]
    pub run: PathBuf,
    /// Market index levels; the equal-weighted panel mean is used otherwise.
    #[arg(long)]
    pub market: Option<PathBuf>,
    /// The market file already holds percent returns.
    #[arg(long)]
    pub market_returns: bool,
    /// Number of principal components to compare against.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// A second `fit` run on the same dates; each factor of `--run` is
    /// regressed on all of its factors.
    #[arg(long)]
    pub nested: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Growth {
    Yoy,
    Qoq,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum PathArg {
    Split,
    Smoothed,
    Filtered,
}

#[derive(Args, Debug)]
pub struct NowcastArgs {
    /// Quarterly GDP CSV with `year,quarter,growth` or `year,quarter,level`.
    #[arg(long)]
    pub gdp: PathBuf,
    /// Output directory of a `fit` run.
    #[arg(long)]
    pub run: PathBuf,
    /// First day of the test window.
    #[arg(long)]
    pub boundary: NaiveDate,
    /// Any day in the first training quarter. Defaults to the first quarter
    /// fully covered by the factor paths.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    /// Any day in the last test quarter. Defaults to the last fully covered quarter.
    #[arg(long)]
    pub end: Option<NaiveDate>,
    /// Growth definition used when the GDP file holds levels.
    #[arg(long, value_enum, default_value_t = Growth::Yoy)]
    pub growth: Growth,
    /// Which factor path feeds the indicators.
    #[arg(long, value_enum, default_value_t = PathArg::Split)]
    pub path: PathArg,
    /// Z-score indicator regressors with training-window moments.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = dynfactor::simulate::DEFAULT_BURN_IN)]
    pub burn_in: usize,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl From<dynfactor::error::Error> for CliError {
    fn from(e: dynfactor::error::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| {
            let mut err: CliError = e.into();
            err.message = format!("{what}: {}", err.message);
            err
        })
    }
}

fn fail(err: &CliError) -> ExitCode {
    let kind = match err.kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    };
    let line = serde_json::json!({ "error": kind, "code": err.code(), "message": err.message });
    eprintln!("{line}");
    ExitCode::from(err.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&CliError::usage(e.kind().to_string()));
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
