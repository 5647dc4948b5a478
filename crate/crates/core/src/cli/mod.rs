//! Batch front-end: `fracmin <command> --config <file> [--threads N] [--out DIR]`.
//!
//! Exit status 0 on success, 1 when a check fails or an internal error
//! occurs, 2 on schema violations, 3 when a resource cap is hit. Every run
//! that gets past validation writes `report.json` into the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::error::Error;

mod commands;
pub mod config;
pub mod report;
mod verify;

pub use config::RunConfig;
pub use report::{Check, Report};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Energy,
    Minimize,
    Curvature,
    Flow,
    Phi,
    Cones,
    Product,
    Verify,
}

#[derive(Debug, Parser)]
#[command(name = "fracmin", version, about = "Nonlocal minimal surfaces on grids")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Dump a PGM frame every K flow steps.
    #[arg(long, value_name = "K")]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Schema(String),
    Cap(String),
    Internal(String),
    /// Number of failed checks.
    Checks(usize),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Schema(_) => 2,
            Failure::Cap(_) => 3,
            Failure::Internal(_) | Failure::Checks(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Schema(m) => write!(f, "config error: {m}"),
            Failure::Cap(m) => write!(f, "resource cap: {m}"),
            Failure::Internal(m) => write!(f, "error: {m}"),
            Failure::Checks(n) => write!(f, "{n} check(s) failed, see report.json"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Order(_) | Error::Config(_) => Failure::Schema(e.to_string()),
            Error::ResourceCap(_) => Failure::Cap(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

pub(crate) fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Internal(format!("{}: {e}", path.display()))
}

/// Runs a parsed command line and returns the report.
pub fn run(cli: &Cli) -> Result<Report, Failure> {
    let (cfg, dir) = RunConfig::load(&cli.config)?;
    if cli.threads == Some(0) {
        return Err(Failure::Schema("--threads must be at least 1".into()));
    }
    fs::create_dir_all(&cli.out).map_err(|e| io_failure(&cli.out, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::Internal(e.to_string()))?;
    let ctx = commands::Context {
        cfg: &cfg,
        dir: &dir,
        out: &cli.out,
        frames: cli.frames,
    };
    let mut report = Report::default();
    let result = pool.install(|| match cli.command {
        Command::Energy => commands::energy(&ctx, &mut report),
        Command::Minimize => commands::minimize(&ctx, &mut report),
        Command::Curvature => commands::curvature(&ctx, &mut report),
        Command::Flow => commands::flow(&ctx, &mut report),
        Command::Phi => commands::phi(&ctx, &mut report),
        Command::Cones => commands::cones(&ctx, &mut report),
        Command::Product => commands::product(&ctx, &mut report),
        Command::Verify => verify::verify(&ctx, &mut report),
    });
    let path = cli.out.join("report.json");
    fs::write(&path, report.to_json()).map_err(|e| io_failure(&path, e))?;
    result?;
    match report.failures() {
        0 => Ok(report),
        n => Err(Failure::Checks(n)),
    }
}

/// Parses `args` (program name first), runs, prints diagnostics and returns
/// the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(report) => {
            println!("{} check(s) passed", report.checks.len());
            0
        }
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
