//! End-to-end sample preparation: point clouds to filtered complexes,
//! persistence diagrams, initial cochain states, and Laplacians, plus the
//! dataset-level bookkeeping (shared image windows, per-sample topological
//! signature vectors, class labels) the trainer consumes.
//!
//! Per-sample complexes are capped at dimension `max_dim` and homology is
//! read up to `max_p`; with the default cap of 2 only `D_0` and `D_1` are
//! meaningful, so `max_p` defaults to 1 and `D_2` stays empty rather than
//! reporting the truncation artifacts of a dimension-capped complex.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::FilteredComplex;
use crate::data::{euclidean_distances, PointCloud};
use crate::error::{Error, Result};
use crate::flow::{init_state, laplacian_or_empty, CochainState, AGG_DIMS};
use crate::persistence::{compute_persistence_opts, PersistenceDiagram, PersistenceOptions};
use crate::sparse::SparseFieldMatrix;
use crate::vectorization::{vectorize, ImageParams};

/// Knobs for turning raw samples into flow-ready inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    /// Top simplex dimension of per-sample complexes.
    pub max_dim: usize,
    /// Top homology dimension read from per-sample complexes.
    pub max_p: usize,
    /// Cochain channels (>= 2).
    pub channels: usize,
    /// Persistence images are `image_grid x image_grid`.
    pub image_grid: usize,
    /// Optional cap on per-sample filtration scale.
    pub max_scale: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_dim: 2,
            max_p: 1,
            channels: 2,
            image_grid: 8,
            max_scale: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_p >= self.max_dim {
            return Err(Error::invalid(format!(
                "reading homology dimension {} needs complexes of dimension at least {}",
                self.max_p,
                self.max_p + 1
            )));
        }
        if self.max_p >= AGG_DIMS {
            return Err(Error::invalid(format!(
                "homology dimension cap {} exceeds the readout dimensions (< {AGG_DIMS})",
                self.max_p
            )));
        }
        if self.channels < 2 {
            return Err(Error::invalid("pipeline needs at least 2 cochain channels"));
        }
        if self.image_grid == 0 {
            return Err(Error::invalid("image grid must be positive"));
        }
        Ok(())
    }
}

/// One sample, fully prepared for the flow layers.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub complex: FilteredComplex,
    /// Diagrams for p = 0..AGG_DIMS; dims beyond `max_p` are empty. Deaths
    /// of essential classes are already capped at the sample's filtration
    /// maximum so every downstream consumer sees finite coordinates.
    pub diagrams: Vec<PersistenceDiagram>,
    pub state0: CochainState,
    pub laplacians: Vec<SparseFieldMatrix>,
    pub label: Option<String>,
}

/// Prepares a single point cloud: Rips complex, reduced diagrams (with the
/// transcript feeding the initial cochain state), and Hodge Laplacians.
pub fn prepare_sample(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<PreparedSample> {
    cfg.validate()?;
    let dists = euclidean_distances(cloud.points());
    let complex = FilteredComplex::build_rips(&dists, cfg.max_dim, cfg.max_scale)?;
    let opts = PersistenceOptions {
        keep_zero_length: false,
        with_transcript: true,
    };
    let res = compute_persistence_opts(&complex, cfg.max_p, opts)?;
    let transcript = res
        .transcript
        .as_ref()
        .ok_or_else(|| Error::InvalidState("persistence did not return a transcript".into()))?;
    let state0 = init_state(&complex, transcript, cfg.channels)?;
    let mut diagrams = Vec::with_capacity(AGG_DIMS);
    for p in 0..AGG_DIMS {
        if p < res.diagrams.len() {
            diagrams.push(res.diagrams[p].truncated()?);
        } else {
            diagrams.push(PersistenceDiagram::empty(p));
        }
    }
    let mut laplacians = Vec::with_capacity(AGG_DIMS);
    for p in 0..AGG_DIMS {
        laplacians.push(laplacian_or_empty(&complex, p)?);
    }
    Ok(PreparedSample {
        complex,
        diagrams,
        state0,
        laplacians,
        label: cloud.label.clone(),
    })
}

/// A labeled dataset prepared for training: per-sample inputs, the image
/// windows fitted on this dataset's diagrams (frozen thereafter), and the
/// per-sample topological signature vectors used as the geometric target.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
    /// One image parameterization per readout dimension, fitted here.
    pub image_params: Vec<ImageParams>,
    /// Per-sample concatenated persistence images (the "signature").
    pub signatures: Vec<Array1<f64>>,
    /// Class index per sample (first-seen label order).
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub channels: usize,
}

impl PreparedDataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Length of the embeddings the flow model will produce.
    pub fn embedding_len(&self) -> usize {
        AGG_DIMS * self.channels
            + self
                .image_params
                .iter()
                .map(ImageParams::output_len)
                .sum::<usize>()
    }

    pub fn signature_len(&self) -> usize {
        self.signatures.first().map_or(0, Array1::len)
    }

    /// Stacks the signature vectors into an (n_samples x signature_len)
    /// point cloud, the geometric reference the topology term pulls
    /// embeddings toward.
    pub fn signature_matrix(&self) -> Result<Array2<f64>> {
        crate::data::stack_rows(&self.signatures)
    }
}

/// Concatenated persistence images of one sample's diagrams under the given
/// (usually frozen) image windows. Evaluating against a trained model must
/// use the model's windows, not windows refitted on the evaluation data.
pub fn signature_with(sample: &PreparedSample, image_params: &[ImageParams]) -> Result<Array1<f64>> {
    if image_params.len() < AGG_DIMS {
        return Err(Error::invalid(format!(
            "need {AGG_DIMS} image parameterizations, got {}",
            image_params.len()
        )));
    }
    let mut v = Vec::new();
    for (d, ip) in sample.diagrams.iter().zip(image_params).take(AGG_DIMS) {
        v.extend(vectorize(d, ip)?);
    }
    Ok(Array1::from_vec(v))
}

/// Prepares every cloud, fits per-dimension image windows on the resulting
/// diagrams, and derives signature vectors and integer labels.
pub fn prepare_dataset(clouds: &[PointCloud], cfg: &PipelineConfig) -> Result<PreparedDataset> {
    if clouds.is_empty() {
        return Err(Error::invalid("cannot prepare an empty dataset"));
    }
    // Samples are independent and the map preserves order, so the parallel
    // collect is bitwise identical to the sequential one.
    let samples: Vec<PreparedSample> = clouds
        .par_iter()
        .map(|c| prepare_sample(c, cfg))
        .collect::<Result<_>>()?;

    let mut image_params = Vec::with_capacity(AGG_DIMS);
    for p in 0..AGG_DIMS {
        let refs: Vec<&PersistenceDiagram> = samples.iter().map(|s| &s.diagrams[p]).collect();
        image_params.push(ImageParams::fit(&refs, cfg.image_grid, cfg.image_grid)?);
    }

    let mut signatures = Vec::with_capacity(samples.len());
    for s in &samples {
        signatures.push(signature_with(s, &image_params)?);
    }

    let mut label_names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(samples.len());
    for s in &samples {
        let name = s.label.clone().unwrap_or_default();
        let id = match label_names.iter().position(|l| *l == name) {
            Some(i) => i,
            None => {
                label_names.push(name);
                label_names.len() - 1
            }
        };
        labels.push(id);
    }

    Ok(PreparedDataset {
        samples,
        image_params,
        signatures,
        labels,
        label_names,
        channels: cfg.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticStructure};

    fn tiny_dataset() -> Vec<PointCloud> {
        let mut clouds = Vec::new();
        for i in 0..3 {
            clouds.push(gen_synthetic(SyntheticStructure::Circle, 12, 2, 0.05, 10 + i).unwrap());
        }
        for i in 0..3 {
            clouds
                .push(gen_synthetic(SyntheticStructure::TwoCircles, 12, 2, 0.05, 20 + i).unwrap());
        }
        clouds
    }

    #[test]
    fn config_validation_catches_inconsistent_caps() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.max_p = 2; // needs max_dim 3
        assert!(cfg.validate().is_err());
        cfg = PipelineConfig {
            channels: 1,
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prepared_sample_has_consistent_shapes() {
        let cloud = gen_synthetic(SyntheticStructure::Circle, 10, 2, 0.0, 1).unwrap();
        let cfg = PipelineConfig::default();
        let s = prepare_sample(&cloud, &cfg).unwrap();
        assert_eq!(s.diagrams.len(), AGG_DIMS);
        assert_eq!(s.laplacians.len(), AGG_DIMS);
        assert_eq!(s.state0.n_dims(), AGG_DIMS);
        for p in 0..AGG_DIMS {
            let n_p = if p <= s.complex.max_dim() {
                s.complex.count(p)
            } else {
                0
            };
            assert_eq!(s.state0.phi(p).nrows(), n_p);
            assert_eq!(s.laplacians[p].rows(), n_p);
            assert_eq!(s.diagrams[p].dim, p);
            // Truncation already applied: no infinite deaths anywhere.
            assert!(s.diagrams[p].pairs.iter().all(|&(_, d)| d.is_finite()));
        }
        // A 10-point cloud merges into one component: 9 finite D_0 deaths
        // plus the essential class capped at the filtration maximum.
        assert_eq!(s.diagrams[0].len(), 10);
        assert!(s.diagrams[2].is_empty());
    }

    #[test]
    fn dataset_preparation_fits_images_and_labels() {
        let clouds = tiny_dataset();
        let cfg = PipelineConfig {
            image_grid: 4,
            ..PipelineConfig::default()
        };
        let ds = prepare_dataset(&clouds, &cfg).unwrap();
        assert_eq!(ds.n_samples(), 6);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.label_names, vec!["circle", "two-circles"]);
        assert_eq!(ds.signature_len(), AGG_DIMS * 16);
        assert_eq!(ds.embedding_len(), AGG_DIMS * 2 + AGG_DIMS * 16);
        for sig in &ds.signatures {
            assert!(sig.iter().all(|v| v.is_finite()));
        }
        // Signatures are not all identical across classes.
        let d01 = (&ds.signatures[0] - &ds.signatures[3])
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
        assert!(d01 > 0.0);
        let m = ds.signature_matrix().unwrap();
        assert_eq!(m.nrows(), 6);
        assert_eq!(m.ncols(), ds.signature_len());
    }
}
