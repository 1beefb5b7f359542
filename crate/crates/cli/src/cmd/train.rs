//! `train`: fit a flow model on a labeled point-cloud dataset.
//!
//! Reads a dataset directory (manifest plus per-sample CSVs), prepares
//! complexes, diagrams, and signature vectors, and runs SGD on the composite
//! loss. The output directory receives the fully resolved configuration, a
//! training log (the rows produced by this invocation), and two checkpoints:
//! `checkpoint_last.json` to resume from and `checkpoint_best.json` holding
//! the best-accuracy epoch as its current model.

use std::fs;
use std::path::PathBuf;

use topoflow::pipeline::prepare_dataset;
use topoflow::training::{log_to_csv, train, Checkpoint};
use topoflow::{Error, Targets};

use crate::cfg::{self, ConfigFile, Overrides, RESOLVED_CONFIG_FILE};
use crate::cmd::{CliError, CliResult};
use crate::manifest::{read_json, write_json, Manifest};

pub const CHECKPOINT_LAST: &str = "checkpoint_last.json";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.json";
pub const LOG_FILE: &str = "log.csv";
/// Class names in head-index order; `eval` maps labels through this file so
/// a differently ordered evaluation manifest cannot scramble classes.
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset directory containing manifest.json and sample CSVs.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for initialization, shuffling, and batch order.
    #[arg(long)]
    pub seed: u64,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint produced by an earlier run with the same
    /// configuration (a larger --epochs extends the horizon).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn run(args: Args) -> CliResult<()> {
    let file: Option<ConfigFile> = match &args.config {
        Some(path) => Some(read_json(path).map_err(CliError::data)?),
        None => None,
    };
    let resolved = cfg::resolve(args.seed, file.as_ref(), &args.overrides)?;

    let manifest = Manifest::load(&args.data).map_err(CliError::data)?;
    let clouds = manifest.load_clouds(&args.data).map_err(CliError::data)?;
    let ds = prepare_dataset(&clouds, &resolved.pipeline).map_err(CliError::data)?;
    let targets = Targets::Classes(ds.labels.clone());

    let resume = match &args.resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Data(Error::invalid(format!("cannot read {}: {e}", path.display())))
            })?;
            Some(Checkpoint::from_json(&text).map_err(CliError::data)?)
        }
        None => None,
    };

    let result = train(&ds, &targets, &resolved.train, resume)?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Data(e.into()))?;
    write_json(&resolved, &args.out.join(RESOLVED_CONFIG_FILE)).map_err(CliError::data)?;
    write_json(&ds.label_names, &args.out.join(LABELS_FILE)).map_err(CliError::data)?;
    fs::write(args.out.join(LOG_FILE), log_to_csv(&result.log))
        .map_err(|e| CliError::Data(e.into()))?;

    let last = &result.checkpoint;
    fs::write(args.out.join(CHECKPOINT_LAST), last.to_json() + "\n")
        .map_err(|e| CliError::Data(e.into()))?;
    let best = Checkpoint {
        epoch: last.best_epoch,
        config: last.config.clone(),
        optimizer: last.optimizer.clone(),
        model: last.best_model.clone(),
        best_epoch: last.best_epoch,
        best_metric: last.best_metric,
        best_model: last.best_model.clone(),
    };
    fs::write(args.out.join(CHECKPOINT_BEST), best.to_json() + "\n")
        .map_err(|e| CliError::Data(e.into()))?;

    match result.log.last() {
        Some(row) => println!(
            "epoch {}: task_loss {:.6}, topo {:.6}, accuracy {:.4} (best epoch {}, accuracy {:.4})",
            row.epoch, row.task_loss, row.topo_loss, row.accuracy, last.best_epoch, last.best_metric
        ),
        None => println!(
            "no new epochs ran (checkpoint already at epoch {})",
            last.epoch
        ),
    }
    println!(
        "wrote {}, {}, {} in {}",
        RESOLVED_CONFIG_FILE,
        LOG_FILE,
        CHECKPOINT_LAST,
        args.out.display()
    );
    Ok(())
}
