//! `bench`: wall-clock timings of the geometry kernels across input sizes.
//!
//! For each size n, a noisy circle cloud is generated, then three stages are
//! timed separately over repeated runs: Rips construction (top simplex
//! dimension configurable), the persistence reduction (homology up to H1),
//! and diagram distances (bottleneck plus 1-Wasserstein on the H1 diagrams
//! of two independent clouds). Times are reported as min/median seconds; all
//! stages run on one thread.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use topoflow::data::{euclidean_distances, gen_synthetic};
use topoflow::metrics::{bottleneck_distance, wasserstein_distance};
use topoflow::{compute_persistence, Error, FilteredComplex, SyntheticStructure};

use crate::cmd::{CliError, CliResult};
use crate::manifest::write_json;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Comma-separated point counts, e.g. "50,100,200".
    #[arg(long, default_value = "50,100,200")]
    pub sizes: String,
    /// Timed repetitions per stage.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Top simplex dimension of the Rips filtrations.
    #[arg(long, default_value_t = 2)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageTiming {
    pub min_s: f64,
    pub median_s: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub rips_build: StageTiming,
    pub reduction: StageTiming,
    pub distances: StageTiming,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub max_dim: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

fn timing(samples: &mut [f64]) -> StageTiming {
    samples.sort_by(f64::total_cmp);
    StageTiming {
        min_s: samples[0],
        median_s: samples[samples.len() / 2],
    }
}

fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> CliResult<T>) -> CliResult<StageTiming> {
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = f()?;
        samples.push(t0.elapsed().as_secs_f64());
        drop(out);
    }
    Ok(timing(&mut samples))
}

pub fn run(args: Args) -> CliResult<()> {
    let mut sizes = Vec::new();
    for part in args.sizes.split(',') {
        let n: usize = part.trim().parse().map_err(|_| {
            CliError::Usage(Error::invalid(format!(
                "--sizes must be comma-separated integers, got '{part}'"
            )))
        })?;
        sizes.push(n);
    }
    if sizes.is_empty() || args.repeats == 0 {
        return Err(CliError::Usage(Error::invalid(
            "need at least one size and one repeat",
        )));
    }

    let mut rows = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let cloud_a = gen_synthetic(SyntheticStructure::Circle, n, 2, 0.05, args.seed + 2 * k as u64)?;
        let cloud_b =
            gen_synthetic(SyntheticStructure::Circle, n, 2, 0.05, args.seed + 2 * k as u64 + 1)?;
        let wa = euclidean_distances(cloud_a.points());
        let wb = euclidean_distances(cloud_b.points());

        let rips_build = time_repeats(args.repeats, || {
            Ok(FilteredComplex::build_rips(&wa, args.max_dim, None)?)
        })?;
        let ca = FilteredComplex::build_rips(&wa, args.max_dim, None)?;
        let cb = FilteredComplex::build_rips(&wb, args.max_dim, None)?;
        let reduction = time_repeats(args.repeats, || Ok(compute_persistence(&ca, 1)?))?;
        let ra = compute_persistence(&ca, 1)?;
        let rb = compute_persistence(&cb, 1)?;
        let (da, db) = (&ra.diagrams[1], &rb.diagrams[1]);
        let distances = time_repeats(args.repeats, || {
            let (bn, _) = bottleneck_distance(da, db)?;
            let (w1, _) = wasserstein_distance(da, db, 1.0)?;
            Ok(bn + w1)
        })?;

        rows.push(BenchRow {
            n,
            rips_build,
            reduction,
            distances,
        });
    }

    println!(
        "{:>8} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "n",
        "rips min",
        "rips median",
        "reduce min",
        "reduce median",
        "dist min",
        "dist median"
    );
    for r in &rows {
        println!(
            "{:>8} {:>14.6} {:>14.6} {:>14.6} {:>14.6} {:>14.6} {:>14.6}",
            r.n,
            r.rips_build.min_s,
            r.rips_build.median_s,
            r.reduction.min_s,
            r.reduction.median_s,
            r.distances.min_s,
            r.distances.median_s
        );
    }

    let report = BenchReport {
        max_dim: args.max_dim,
        repeats: args.repeats,
        rows,
    };
    if let Some(out) = &args.out {
        write_json(&report, out).map_err(CliError::data)?;
    }
    Ok(())
}
