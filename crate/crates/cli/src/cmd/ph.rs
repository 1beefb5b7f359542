//! `ph`: persistence diagrams and Betti curves for one input file.
//!
//! Inputs become a dissimilarity matrix first: point clouds through
//! euclidean distances, time series through z-scored correlation weights,
//! spike counts through co-firing weights, and connectivity matrices either
//! directly (they must already look like dissimilarities) or as `1 - f`
//! after optional symmetric degree normalization.

use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use serde::Serialize;
use topoflow::data::{
    cofiring_weights, corr_weights, load_connectivity, load_point_cloud, load_spike_counts,
    load_time_series, sym_normalize, zscore,
};
use topoflow::persistence::betti_curve;
use topoflow::{compute_persistence, Error, FilteredComplex};

use crate::cmd::{CliError, CliResult};
use crate::manifest::{write_json, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InputKind {
    PointCloud,
    Connectivity,
    TimeSeries,
    SpikeCounts,
}

impl InputKind {
    fn name(self) -> &'static str {
        match self {
            InputKind::PointCloud => "point-cloud",
            InputKind::Connectivity => "connectivity",
            InputKind::TimeSeries => "time-series",
            InputKind::SpikeCounts => "spike-counts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConnectivityMode {
    /// Weights are already dissimilarities (zero diagonal required).
    Direct,
    /// Convert strengths in [0, 1] to dissimilarities as 1 - f off-diagonal.
    OneMinus,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Input CSV file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "point-cloud")]
    pub kind: InputKind,
    /// Top simplex dimension of the filtration.
    #[arg(long, default_value_t = 2)]
    pub max_dim: usize,
    /// Top homology dimension to report.
    #[arg(long, default_value_t = 1)]
    pub max_p: usize,
    /// Drop simplices past this filtration value.
    #[arg(long)]
    pub max_scale: Option<f64>,
    /// Sampling rate in Hz (time-series input only).
    #[arg(long)]
    pub sample_rate_hz: Option<f64>,
    /// Bin width in milliseconds (spike-counts input only).
    #[arg(long)]
    pub bin_width_ms: Option<f64>,
    /// Symmetric degree normalization before the dissimilarity conversion
    /// (connectivity input only).
    #[arg(long)]
    pub normalize: bool,
    /// How connectivity weights become dissimilarities.
    #[arg(long, value_enum, default_value = "one-minus")]
    pub connectivity_mode: ConnectivityMode,
    /// Number of grid points in the Betti curves.
    #[arg(long, default_value_t = 64)]
    pub betti_grid: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ResolvedPh {
    kind: String,
    max_dim: usize,
    max_p: usize,
    max_scale: Option<f64>,
    betti_grid: usize,
    preprocessing: Vec<String>,
}

/// Loads the input and reduces it to a dissimilarity matrix plus the chain
/// of steps applied.
fn dissimilarity(args: &Args) -> CliResult<(Array2<f64>, Vec<String>)> {
    if args.normalize && args.kind != InputKind::Connectivity {
        return Err(CliError::Usage(Error::invalid(
            "--normalize only applies to connectivity input",
        )));
    }
    let mut chain = Vec::new();
    let w = match args.kind {
        InputKind::PointCloud => {
            let cloud = load_point_cloud(&args.input).map_err(CliError::data)?;
            chain.push("euclidean-distances".into());
            topoflow::data::euclidean_distances(cloud.points())
        }
        InputKind::TimeSeries => {
            let rate = args.sample_rate_hz.ok_or_else(|| {
                CliError::Usage(Error::invalid("time-series input needs --sample-rate-hz"))
            })?;
            let ts = load_time_series(&args.input, rate).map_err(CliError::data)?;
            let z = zscore(&ts).map_err(CliError::data)?;
            chain.push("zscore".into());
            chain.push("corr-weights(1-r)".into());
            corr_weights(&z).map_err(CliError::data)?
        }
        InputKind::SpikeCounts => {
            let dt = args.bin_width_ms.ok_or_else(|| {
                CliError::Usage(Error::invalid("spike-counts input needs --bin-width-ms"))
            })?;
            let counts = load_spike_counts(&args.input, dt).map_err(CliError::data)?;
            chain.push("cofiring-weights(1-r)".into());
            cofiring_weights(&counts).map_err(CliError::data)?
        }
        InputKind::Connectivity => {
            let mut conn = load_connectivity(&args.input).map_err(CliError::data)?;
            if args.normalize {
                conn = sym_normalize(&conn).map_err(CliError::data)?;
                chain.push("sym-normalize".into());
            }
            match args.connectivity_mode {
                ConnectivityMode::Direct => conn.weights().to_owned(),
                ConnectivityMode::OneMinus => {
                    let f = conn.weights();
                    let n = conn.n_nodes();
                    if let Some(v) = f.iter().find(|v| **v > 1.0) {
                        return Err(CliError::Data(Error::invalid(format!(
                            "connectivity strength {v} exceeds 1; normalize first or use \
                             --connectivity-mode direct"
                        ))));
                    }
                    chain.push("one-minus".into());
                    let mut w = Array2::<f64>::zeros((n, n));
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                w[(i, j)] = 1.0 - f[(i, j)];
                            }
                        }
                    }
                    w
                }
            }
        }
    };
    Ok((w, chain))
}

pub fn run(args: Args) -> CliResult<()> {
    let (w, chain) = dissimilarity(&args)?;
    let cx =
        FilteredComplex::build_rips(&w, args.max_dim, args.max_scale).map_err(CliError::data)?;
    let res = compute_persistence(&cx, args.max_p)?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Data(e.into()))?;
    for d in &res.diagrams {
        let path = args.out.join(format!("diagram_{}.json", d.dim));
        fs::write(path, d.to_json() + "\n").map_err(|e| CliError::Data(e.into()))?;
    }

    if args.betti_grid < 2 {
        return Err(CliError::Usage(Error::invalid(
            "betti grid needs at least two points",
        )));
    }
    let fmax = cx.filtration_max();
    let grid: Vec<f64> = (0..args.betti_grid)
        .map(|i| fmax * i as f64 / (args.betti_grid - 1) as f64)
        .collect();
    let curves = res
        .diagrams
        .iter()
        .map(|d| betti_curve(d, &grid))
        .collect::<topoflow::Result<Vec<_>>>()?;
    let mut csv = String::from("scale");
    for d in 0..curves.len() {
        csv.push_str(&format!(",betti_{d}"));
    }
    csv.push('\n');
    for (i, &s) in grid.iter().enumerate() {
        csv.push_str(&format!("{s}"));
        for c in &curves {
            csv.push_str(&format!(",{}", c.counts[i]));
        }
        csv.push('\n');
    }
    fs::write(args.out.join("betti.csv"), csv).map_err(|e| CliError::Data(e.into()))?;

    let manifest = Manifest {
        kind: args.kind.name().into(),
        path: Some(args.input.display().to_string()),
        samples: Vec::new(),
        preprocessing: chain.clone(),
    };
    manifest.save(&args.out).map_err(CliError::data)?;
    write_json(
        &ResolvedPh {
            kind: args.kind.name().into(),
            max_dim: args.max_dim,
            max_p: args.max_p,
            max_scale: args.max_scale,
            betti_grid: args.betti_grid,
            preprocessing: chain,
        },
        &args.out.join("resolved_config.json"),
    )
    .map_err(CliError::data)?;

    for d in &res.diagrams {
        let finite = d.pairs.iter().filter(|(_, death)| death.is_finite()).count();
        let essential = d.pairs.len() - finite;
        println!(
            "dimension {}: {} finite pairs, {} essential",
            d.dim, finite, essential
        );
    }
    Ok(())
}
