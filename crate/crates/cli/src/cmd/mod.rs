//! Subcommand implementations and the usage/data/numerical error split that
//! drives the process exit code.

use clap::Subcommand;
use topoflow::Error;

pub mod bench;
pub mod dist;
pub mod eval;
pub mod generate;
pub mod ph;
pub mod train;
pub mod vectorize;

// One variant is constructed per process, so the size spread is harmless.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled point-cloud dataset.
    Generate(generate::Args),
    /// Compute persistence diagrams and Betti curves for one input.
    Ph(ph::Args),
    /// Compare two persistence diagrams.
    Dist(dist::Args),
    /// Render a persistence diagram as a persistence image.
    Vectorize(vectorize::Args),
    /// Train a flow model on a generated dataset.
    Train(train::Args),
    /// Evaluate a checkpoint on a dataset.
    Eval(eval::Args),
    /// Time the filtration and reduction kernels.
    Bench(bench::Args),
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(args) => generate::run(args),
        Command::Ph(args) => ph::run(args),
        Command::Dist(args) => dist::run(args),
        Command::Vectorize(args) => vectorize::run(args),
        Command::Train(args) => train::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Bench(args) => bench::run(args),
    }
}

/// A library error classified by whose fault it is: the invocation, the
/// input files, or the arithmetic.
#[derive(Debug)]
pub enum CliError {
    Usage(Error),
    Data(Error),
    Numeric(Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// Forces the data classification; used wherever file contents are being
    /// read or validated, so that a bad file never reports as a usage error.
    pub fn data(e: Error) -> CliError {
        match e {
            Error::NumericalFailure(_) => CliError::Numeric(e),
            other => CliError::Data(other),
        }
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    /// Default classification by variant: I/O, parsing, and content-derived
    /// degeneracies are data problems; non-finite arithmetic is numerical;
    /// everything else means the invocation cannot work as given.
    fn from(e: Error) -> CliError {
        match e {
            Error::Io(_)
            | Error::Json(_)
            | Error::Parse { .. }
            | Error::ZeroVariance { .. }
            | Error::UndefinedCorrelation(_) => CliError::Data(e),
            Error::NumericalFailure(_) => CliError::Numeric(e),
            Error::InvalidInput(_) | Error::InvalidDimension { .. } | Error::InvalidState(_) => {
                CliError::Usage(e)
            }
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Data(e) | CliError::Numeric(e) => e.fmt(f),
        }
    }
}
