//! `vectorize`: render a diagram as a persistence-image CSV.
//!
//! Grid bounds and bandwidth either come from a saved parameter file (so a
//! new diagram can be embedded in the same feature space as a training set)
//! or are fitted to the input diagram itself.

use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use topoflow::data::save_matrix_csv;
use topoflow::vectorization::vectorize;
use topoflow::{Error, ImageParams, PersistenceDiagram};

use crate::cmd::{CliError, CliResult};
use crate::manifest::{read_json, write_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Diagram to vectorize (JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV, grid_h rows by grid_w columns.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse previously fitted image parameters (JSON) instead of fitting.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Pixels along the birth axis when fitting.
    #[arg(long, default_value_t = 8)]
    pub grid_w: usize,
    /// Pixels along the persistence axis when fitting.
    #[arg(long, default_value_t = 8)]
    pub grid_h: usize,
    /// Save the image parameters that were used.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

pub fn run(args: Args) -> CliResult<()> {
    let text = fs::read_to_string(&args.input).map_err(|e| {
        CliError::Data(Error::invalid(format!(
            "cannot read {}: {e}",
            args.input.display()
        )))
    })?;
    let diagram = PersistenceDiagram::from_json(&text).map_err(CliError::data)?;
    // Essential classes are capped at the recorded truncation value so that
    // every point has a finite persistence.
    let finite = diagram.truncated().map_err(CliError::data)?;

    let params: ImageParams = match &args.params {
        Some(path) => read_json(path).map_err(CliError::data)?,
        None => ImageParams::fit(&[&finite], args.grid_w, args.grid_h)?,
    };
    let flat = vectorize(&finite, &params)?;
    let image = Array2::from_shape_vec((params.grid_h, params.grid_w), flat)
        .expect("image length is grid_h * grid_w by construction");
    save_matrix_csv(&image, &args.out).map_err(CliError::data)?;
    if let Some(path) = &args.params_out {
        write_json(&params, path).map_err(CliError::data)?;
    }
    println!(
        "wrote {} ({}x{} pixels, birth [{:.6}, {:.6}], persistence [{:.6}, {:.6}])",
        args.out.display(),
        params.grid_h,
        params.grid_w,
        params.birth_range.0,
        params.birth_range.1,
        params.pers_range.0,
        params.pers_range.1,
    );
    Ok(())
}
