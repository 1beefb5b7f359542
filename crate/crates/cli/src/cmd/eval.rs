//! `eval`: score a trained checkpoint on a labeled dataset.
//!
//! Embeddings are computed with the checkpoint's parameters and its frozen
//! image windows; signature vectors of the evaluation samples are rebuilt
//! under those same windows rather than refitted, so the comparison lives in
//! the feature space the model was trained in. The report carries task
//! metrics plus, per homology dimension, how far the embedding cloud's
//! topology sits from the signature cloud's.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use topoflow::data::{euclidean_distances, save_matrix_csv, stack_rows};
use topoflow::pipeline::{prepare_dataset, signature_with};
use topoflow::training::{embed_dataset, evaluate, Checkpoint, TaskHead};
use topoflow::{compute_persistence, Error, FilteredComplex, FlowModel, Targets};

use crate::cfg::{ResolvedConfig, RESOLVED_CONFIG_FILE};
use crate::cmd::dist::{compare, DistReport};
use crate::cmd::train::LABELS_FILE;
use crate::cmd::{CliError, CliResult};
use crate::manifest::{read_json, write_json, Manifest};

/// Above this many samples the dataset-level complexes get expensive; the
/// per-dimension topology rows are skipped rather than stalling the run.
const TOPO_REPORT_MAX_SAMPLES: usize = 512;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint produced by `train` (JSON).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory containing manifest.json and sample CSVs.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate the checkpoint's best-epoch model instead of its last.
    #[arg(long)]
    pub use_best: bool,
    /// Resolved configuration of the training run; defaults to
    /// resolved_config.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Class names in head-index order; defaults to labels.json next to the
    /// checkpoint.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of grid points for Betti correlations.
    #[arg(long, default_value_t = 64)]
    pub betti_grid: usize,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    n_samples: usize,
    accuracy: f64,
    f1_macro: Option<f64>,
    task_loss: f64,
    topo_loss: f64,
    ridge: f64,
    /// Embedding-cloud vs signature-cloud diagram comparisons, one row per
    /// homology dimension; absent on oversized datasets.
    dims: Option<Vec<DistReport>>,
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    match checkpoint.parent() {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

pub fn run(args: Args) -> CliResult<()> {
    let text = fs::read_to_string(&args.checkpoint).map_err(|e| {
        CliError::Data(Error::invalid(format!(
            "cannot read {}: {e}",
            args.checkpoint.display()
        )))
    })?;
    let ck = Checkpoint::from_json(&text).map_err(CliError::data)?;
    let model: FlowModel = if args.use_best { ck.best_model } else { ck.model };
    let head_classes = match &model.head {
        TaskHead::Classification { bias, .. } => bias.len(),
        TaskHead::Regression { .. } => {
            return Err(CliError::Usage(Error::invalid(
                "checkpoint holds a regression head; this command evaluates classifiers",
            )))
        }
    };

    let config_path = args
        .config
        .clone()
        .unwrap_or_else(|| sibling(&args.checkpoint, RESOLVED_CONFIG_FILE));
    let resolved: ResolvedConfig = read_json(&config_path).map_err(CliError::data)?;
    let labels_path = args
        .labels
        .clone()
        .unwrap_or_else(|| sibling(&args.checkpoint, LABELS_FILE));
    let label_names: Vec<String> = read_json(&labels_path).map_err(CliError::data)?;
    if label_names.len() > head_classes {
        return Err(CliError::Usage(Error::invalid(format!(
            "{} class names for a {head_classes}-way head",
            label_names.len()
        ))));
    }

    let manifest = Manifest::load(&args.data).map_err(CliError::data)?;
    let clouds = manifest.load_clouds(&args.data).map_err(CliError::data)?;
    let mut classes = Vec::with_capacity(clouds.len());
    for (i, cloud) in clouds.iter().enumerate() {
        let name = cloud
            .label
            .as_ref()
            .ok_or_else(|| CliError::Data(Error::invalid(format!("sample {i} has no label"))))?;
        let id = label_names.iter().position(|l| l == name).ok_or_else(|| {
            CliError::Data(Error::invalid(format!(
                "label '{name}' was not present at training time"
            )))
        })?;
        classes.push(id);
    }
    let targets = Targets::Classes(classes);

    let mut ds = prepare_dataset(&clouds, &resolved.pipeline).map_err(CliError::data)?;
    if ds.channels != model.channels {
        return Err(CliError::Usage(Error::invalid(format!(
            "checkpoint expects {} channels but the dataset was prepared with {}; pass the \
             training run's config",
            model.channels, ds.channels
        ))));
    }
    // Rebuild signatures under the model's frozen windows.
    ds.image_params = model.image_params.clone();
    for (i, s) in ds.samples.iter().enumerate() {
        ds.signatures[i] = signature_with(s, &ds.image_params)?;
    }

    let metrics = evaluate(&model, &ds, &targets, &resolved.train)?;
    let zs = embed_dataset(&model, &ds)?;
    let z_mat = stack_rows(&zs).map_err(CliError::data)?;

    let n = ds.n_samples();
    let dims = if (2..=TOPO_REPORT_MAX_SAMPLES).contains(&n) {
        let s_mat = ds.signature_matrix().map_err(CliError::data)?;
        Some(cloud_comparison(&z_mat, &s_mat, args.betti_grid)?)
    } else {
        None
    };

    fs::create_dir_all(&args.out).map_err(|e| CliError::Data(e.into()))?;
    save_matrix_csv(&z_mat, args.out.join("embeddings.csv")).map_err(CliError::data)?;
    let report = EvalReport {
        n_samples: n,
        accuracy: metrics.task_metric,
        f1_macro: metrics.f1_macro,
        task_loss: metrics.task_loss,
        topo_loss: metrics.topo,
        ridge: metrics.ridge,
        dims,
    };
    write_json(&report, &args.out.join("report.json")).map_err(CliError::data)?;

    println!(
        "accuracy {:.4}, f1 {:.4}, task_loss {:.6} on {n} samples",
        report.accuracy,
        report.f1_macro.unwrap_or(f64::NAN),
        report.task_loss
    );
    if let Some(rows) = &report.dims {
        for r in rows {
            println!(
                "dim {}: d_B {}, W1 {}, rho_beta {}",
                r.dim,
                fmt_opt(r.bottleneck),
                fmt_opt(r.wasserstein_q1),
                fmt_opt(r.betti_rho)
            );
        }
    }
    println!("wrote embeddings.csv, report.json in {}", args.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "n/a".into(),
    }
}

/// Per-dimension diagram comparisons between two clouds with the same number
/// of rows: Rips complexes (top simplex dimension 2), homology up to H1.
pub fn cloud_comparison(
    a: &Array2<f64>,
    b: &Array2<f64>,
    betti_grid: usize,
) -> CliResult<Vec<DistReport>> {
    let wa = euclidean_distances(a);
    let wb = euclidean_distances(b);
    let ca = FilteredComplex::build_rips(&wa, 2, None).map_err(CliError::data)?;
    let cb = FilteredComplex::build_rips(&wb, 2, None).map_err(CliError::data)?;
    let ra = compute_persistence(&ca, 1)?;
    let rb = compute_persistence(&cb, 1)?;
    let mut out = Vec::with_capacity(2);
    for p in 0..=1 {
        out.push(compare(&ra.diagrams[p], &rb.diagrams[p], betti_grid)?);
    }
    Ok(out)
}
