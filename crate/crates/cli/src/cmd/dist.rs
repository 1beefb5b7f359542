//! `dist`: distances and Betti correlation between two diagrams.
//!
//! Values that are infinite (bottleneck under mismatched essential counts)
//! or undefined (correlation of constant curves) serialize as JSON null
//! rather than failing the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use topoflow::metrics::{betti_correlation, bottleneck_distance, wasserstein_distance};
use topoflow::persistence::betti_curve;
use topoflow::{Error, PersistenceDiagram};

use crate::cmd::{CliError, CliResult};
use crate::manifest::write_json;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// First diagram (JSON).
    #[arg(long)]
    pub a: PathBuf,
    /// Second diagram (JSON).
    #[arg(long)]
    pub b: PathBuf,
    /// Number of grid points for the Betti correlation.
    #[arg(long, default_value_t = 64)]
    pub betti_grid: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct DistReport {
    pub dim: usize,
    pub bottleneck: Option<f64>,
    pub wasserstein_q1: Option<f64>,
    pub wasserstein_q2: Option<f64>,
    pub betti_rho: Option<f64>,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn load_diagram(path: &Path) -> CliResult<PersistenceDiagram> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Data(Error::invalid(format!("cannot read {}: {e}", path.display())))
    })?;
    PersistenceDiagram::from_json(&text).map_err(CliError::data)
}

/// All pairwise comparisons of two same-dimension diagrams.
pub fn compare(
    da: &PersistenceDiagram,
    db: &PersistenceDiagram,
    betti_grid: usize,
) -> CliResult<DistReport> {
    if da.dim != db.dim {
        return Err(CliError::Usage(Error::invalid(format!(
            "diagrams have different dimensions ({} vs {})",
            da.dim, db.dim
        ))));
    }
    if betti_grid < 2 {
        return Err(CliError::Usage(Error::invalid(
            "betti grid needs at least two points",
        )));
    }

    let (bn, _) = bottleneck_distance(da, db)?;
    let (w1, _) = wasserstein_distance(da, db, 1.0).map_err(CliError::data)?;
    let (w2, _) = wasserstein_distance(da, db, 2.0).map_err(CliError::data)?;

    // Betti correlation over a grid spanning both diagrams' activity.
    let hi = da
        .pairs
        .iter()
        .chain(&db.pairs)
        .flat_map(|&(b, d)| [b, d])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(da.truncation.unwrap_or(0.0))
        .max(db.truncation.unwrap_or(0.0));
    let span = if hi > 0.0 { hi } else { 1.0 };
    let grid: Vec<f64> = (0..betti_grid)
        .map(|i| span * i as f64 / (betti_grid - 1) as f64)
        .collect();
    let ca = betti_curve(da, &grid)?;
    let cb = betti_curve(db, &grid)?;
    let rho = match betti_correlation(&ca, &cb) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e.into()),
    };

    Ok(DistReport {
        dim: da.dim,
        bottleneck: finite_or_none(bn),
        wasserstein_q1: finite_or_none(w1),
        wasserstein_q2: finite_or_none(w2),
        betti_rho: rho,
    })
}

pub fn run(args: Args) -> CliResult<()> {
    let da = load_diagram(&args.a)?;
    let db = load_diagram(&args.b)?;
    let report = compare(&da, &db, args.betti_grid)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.into()))?;
    println!("{text}");
    if let Some(out) = &args.out {
        write_json(&report, out).map_err(CliError::data)?;
    }
    Ok(())
}
