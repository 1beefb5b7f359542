//! Topological representation learning on filtered simplicial complexes.
//!
//! The pipeline runs: dissimilarity data -> Rips/clique filtration ->
//! persistent homology -> persistence images -> cochain flow layers driven by
//! Hodge Laplacians -> pooled embeddings, trained with a composite loss that
//! matches predicted and reference diagrams under a Wasserstein penalty.

pub mod complex;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod persistence;
pub mod pipeline;
pub mod sparse;
pub mod training;
pub mod vectorization;

pub use complex::{FilteredComplex, Simplex};
pub use data::{PointCloud, SyntheticStructure};
pub use error::{Error, Result};
pub use metrics::{MatchTarget, MatchingResult};
pub use persistence::{
    betti_curve, compute_persistence, compute_persistence_opts, BettiCurve, PairRecord,
    PersistenceDiagram, PersistenceOptions, PersistenceResult, ReductionTranscript,
};
pub use pipeline::{PipelineConfig, PreparedDataset, PreparedSample};
pub use sparse::{FieldTag, SparseFieldMatrix};
pub use training::{Checkpoint, FlowModel, Targets, TrainConfig, TrainResult};
pub use vectorization::ImageParams;
