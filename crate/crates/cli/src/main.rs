//! `nodectl`: synthesis, simulation and verification of piecewise-constant
//! neural ODE controls from the command line.
//!
//! Every subcommand writes its artifacts into `--out`: a `manifest.json`
//! echoing the fully resolved configuration, a `report.json` whose bytes
//! depend only on configuration and seed, and where applicable
//! `schedule.json`, `trajectories.csv` and `plot.svg`.
//!
//! Exit codes: 0 when every verification gate passes, 2 when a gate fails,
//! 3 for unusable inputs, 4 for numerical breakdowns.

mod commands;
mod io;
mod plot;
mod report;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// CLI-level failure, split by exit code. Gate outcomes are not errors;
/// they travel as the `Ok(bool)` of each command.
#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Numeric(String),
}

impl CliError {
    pub fn parse(message: String) -> Self {
        CliError::Parse(message)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse(_) => "parse",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Numeric(m) => m,
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl From<nodectl_core::Error> for CliError {
    fn from(e: nodectl_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Parse(e.to_string())
        }
    }
}

/// Worker-pool cap from NODECTL_THREADS, when set to a positive integer.
pub fn threads_cap() -> Option<usize> {
    std::env::var("NODECTL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[derive(Parser)]
#[command(
    name = "nodectl",
    version,
    about = "Piecewise-constant control synthesis for neural ODEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steer every dataset pair with a two-stage sweep plan.
    Interpolate(commands::InterpolateArgs),
    /// Interpolate with a single constant control through separating strips.
    Shallow(commands::ShallowArgs),
    /// Interpolate in a matched-first-coordinate basis (needs dim > pairs).
    Basis(commands::BasisArgs),
    /// Fit shallow surrogates to the exact interpolating field and certify them.
    FieldFit(commands::FieldFitArgs),
    /// Transport a particle measure onto the uniform measure on the unit cube.
    Transport(commands::TransportArgs),
    /// Monte Carlo estimate of the axis-separability probability.
    McProb(commands::McProbArgs),
    /// Integrate stored points through a stored schedule.
    Simulate(commands::SimulateArgs),
    /// Re-check a stored schedule against a dataset.
    Verify(commands::VerifyArgs),
}

fn dispatch(command: &Command) -> (&'static str, PathBuf, Result<bool, CliError>) {
    match command {
        Command::Interpolate(a) => ("interpolate", a.out.clone(), commands::interpolate(a)),
        Command::Shallow(a) => ("shallow", a.out.clone(), commands::shallow_run(a)),
        Command::Basis(a) => ("basis", a.out.clone(), commands::basis(a)),
        Command::FieldFit(a) => ("field-fit", a.out.clone(), commands::field_fit(a)),
        Command::Transport(a) => ("transport", a.out.clone(), commands::transport_run(a)),
        Command::McProb(a) => ("mc-prob", a.out.clone(), commands::mc_prob(a)),
        Command::Simulate(a) => ("simulate", a.out.clone(), commands::simulate(a)),
        Command::Verify(a) => ("verify", a.out.clone(), commands::verify(a)),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Some(cap) = threads_cap() {
        // Must precede any rayon use; a failure here means a pool already
        // exists, which only happens in tests driving main in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build_global();
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(3);
        }
    };
    let (name, out, result) = dispatch(&cli.command);
    let code = match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!(
                "nodectl {name}: verification gates failed; see {}",
                out.join("report.json").display()
            );
            2
        }
        Err(err) => {
            report::write_diagnostic(&out, name, &err);
            eprintln!("nodectl {name}: {err}");
            err.code()
        }
    };
    std::process::exit(code);
}
