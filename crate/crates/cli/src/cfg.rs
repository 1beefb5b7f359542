//! Layered run configuration: library defaults, then an optional JSON
//! config file, then explicit command-line flags. The fully resolved result
//! is written next to every run's outputs so it can be re-run or evaluated
//! later without guessing.

use serde::{Deserialize, Serialize};
use topoflow::pipeline::PipelineConfig;
use topoflow::training::TrainConfig;
use topoflow::Result;

/// The fully resolved configuration of a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Optional overrides accepted from a JSON config file. Every field may be
/// omitted; `seed` always comes from the command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub epochs: Option<usize>,
    pub q: Option<f64>,
    pub n_layers: Option<usize>,
    pub weight_init_std: Option<f64>,
    pub alpha_init: Option<f64>,
    pub per_dim_alpha: Option<bool>,
    pub step_h: Option<f64>,
    pub steps_t: Option<usize>,
    pub batch_max_dim: Option<usize>,
    pub max_dim: Option<usize>,
    pub max_p: Option<usize>,
    pub channels: Option<usize>,
    pub image_grid: Option<usize>,
    pub max_scale: Option<f64>,
}

/// Command-line overrides shared by `train`; identical shape to the file
/// layer so the two resolve through the same code path.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// SGD learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Samples per update.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the topology term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the ridge term.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Order of the matching distance in the topology term.
    #[arg(long)]
    pub q: Option<f64>,
    /// Flow layers per dimension.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Standard deviation of the flow weight initialization.
    #[arg(long)]
    pub weight_init_std: Option<f64>,
    /// Initial diffusion coefficient.
    #[arg(long)]
    pub alpha_init: Option<f64>,
    /// Learn one diffusion coefficient per dimension.
    #[arg(long)]
    pub per_dim_alpha: Option<bool>,
    /// Euler step size inside each layer.
    #[arg(long)]
    pub step_h: Option<f64>,
    /// Euler steps per layer.
    #[arg(long)]
    pub steps_t: Option<usize>,
    /// Top simplex dimension of batch-level complexes.
    #[arg(long)]
    pub batch_max_dim: Option<usize>,
    /// Top simplex dimension of per-sample complexes.
    #[arg(long)]
    pub max_dim: Option<usize>,
    /// Top homology dimension read per sample.
    #[arg(long)]
    pub max_p: Option<usize>,
    /// Cochain channels.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Persistence image grid (pixels per axis).
    #[arg(long)]
    pub image_grid: Option<usize>,
    /// Drop simplices past this filtration value in per-sample complexes.
    #[arg(long)]
    pub max_scale: Option<f64>,
}

fn apply<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_file(train: &mut TrainConfig, pipeline: &mut PipelineConfig, f: &ConfigFile) {
    apply(&mut train.learning_rate, f.learning_rate);
    apply(&mut train.batch_size, f.batch_size);
    apply(&mut train.lambda, f.lambda);
    apply(&mut train.beta, f.beta);
    apply(&mut train.epochs, f.epochs);
    apply(&mut train.q, f.q);
    apply(&mut train.n_layers, f.n_layers);
    apply(&mut train.weight_init_std, f.weight_init_std);
    apply(&mut train.alpha_init, f.alpha_init);
    apply(&mut train.per_dim_alpha, f.per_dim_alpha);
    apply(&mut train.step_h, f.step_h);
    apply(&mut train.steps_t, f.steps_t);
    apply(&mut train.batch_max_dim, f.batch_max_dim);
    apply(&mut pipeline.max_dim, f.max_dim);
    apply(&mut pipeline.max_p, f.max_p);
    apply(&mut pipeline.channels, f.channels);
    apply(&mut pipeline.image_grid, f.image_grid);
    if f.max_scale.is_some() {
        pipeline.max_scale = f.max_scale;
    }
}

fn apply_flags(train: &mut TrainConfig, pipeline: &mut PipelineConfig, o: &Overrides) {
    apply(&mut train.learning_rate, o.learning_rate);
    apply(&mut train.batch_size, o.batch_size);
    apply(&mut train.lambda, o.lambda);
    apply(&mut train.beta, o.beta);
    apply(&mut train.epochs, o.epochs);
    apply(&mut train.q, o.q);
    apply(&mut train.n_layers, o.n_layers);
    apply(&mut train.weight_init_std, o.weight_init_std);
    apply(&mut train.alpha_init, o.alpha_init);
    apply(&mut train.per_dim_alpha, o.per_dim_alpha);
    apply(&mut train.step_h, o.step_h);
    apply(&mut train.steps_t, o.steps_t);
    apply(&mut train.batch_max_dim, o.batch_max_dim);
    apply(&mut pipeline.max_dim, o.max_dim);
    apply(&mut pipeline.max_p, o.max_p);
    apply(&mut pipeline.channels, o.channels);
    apply(&mut pipeline.image_grid, o.image_grid);
    if o.max_scale.is_some() {
        pipeline.max_scale = o.max_scale;
    }
}

/// Resolves seed + optional file + flags into a validated configuration.
pub fn resolve(seed: u64, file: Option<&ConfigFile>, flags: &Overrides) -> Result<ResolvedConfig> {
    let mut train = TrainConfig::with_seed(seed);
    let mut pipeline = PipelineConfig::default();
    if let Some(f) = file {
        apply_file(&mut train, &mut pipeline, f);
    }
    apply_flags(&mut train, &mut pipeline, flags);
    train.validate()?;
    pipeline.validate()?;
    Ok(ResolvedConfig { train, pipeline })
}
