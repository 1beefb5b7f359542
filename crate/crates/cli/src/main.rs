//! Experiment driver for the topoflow library.
//!
//! Subcommands cover the full workflow: synthesizing labeled point-cloud
//! datasets, computing persistence from several input kinds, comparing and
//! vectorizing diagrams, training and evaluating flow models, and
//! benchmarking the filtration/reduction kernels.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
//! malformed input data, 4 numerical failure.

use clap::Parser;

mod cfg;
mod cmd;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "topoflow",
    version,
    about = "Topological representation learning: persistence, diagram metrics, trainable flows"
)]
struct Cli {
    #[command(subcommand)]
    command: cmd::Command,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cmd::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
