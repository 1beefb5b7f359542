//! Composite-loss training of flow models.
//!
//! The objective combines a task term (softmax cross-entropy or squared
//! error on a linear head), a topology term, and a ridge term:
//!
//! ```text
//! total = task + lambda * topo + beta * ridge
//! ```
//!
//! `topo` sums, over readout dimensions, order-q matching distances between
//! the diagrams of a Rips complex built on the batch embeddings and the
//! diagrams of one built on the per-sample signature vectors. Its gradient
//! reaches the embeddings through the matched points' critical simplices:
//! each matched coordinate routes to the creator or destroyer simplex, whose
//! filtration value is realized by its longest edge, and finally to the two
//! embedding vectors spanning that edge. `ridge` is the raw sum of squared
//! Frobenius norms of the flow weights; the stored breakdown keeps raw terms
//! so the total above holds exactly.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::complex::FilteredComplex;
use crate::data::{euclidean_distances, stack_rows};
use crate::error::{Error, Result};
use crate::flow::{
    aggregate, aggregate_state_backward, stack_backward, stack_forward, CochainState, Embedding,
    FlowCache, FlowLayerParams, AGG_DIMS,
};
use crate::persistence::{compute_persistence_opts, PersistenceDiagram, PersistenceOptions};
use crate::pipeline::{PreparedDataset, PreparedSample};
use crate::vectorization::ImageParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Hyperparameters of a training run. `seed` drives initialization and the
/// per-epoch shuffles; identical configs and datasets give bitwise-identical
/// runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the topology term.
    pub lambda: f64,
    /// Weight of the ridge term.
    pub beta: f64,
    pub epochs: usize,
    /// Order of the matching distance in the topology term.
    pub q: f64,
    pub seed: u64,
    pub n_layers: usize,
    pub weight_init_std: f64,
    pub alpha_init: f64,
    /// One diffusion coefficient per readout dimension instead of a shared
    /// scalar.
    pub per_dim_alpha: bool,
    pub step_h: f64,
    pub steps_t: usize,
    /// Top simplex dimension of the batch-level complexes.
    pub batch_max_dim: usize,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 16,
            lambda: 0.1,
            beta: 1e-4,
            epochs: 50,
            q: 2.0,
            seed,
            n_layers: 1,
            weight_init_std: 0.05,
            alpha_init: 0.1,
            per_dim_alpha: false,
            step_h: crate::flow::DEFAULT_STEP_H,
            steps_t: crate::flow::DEFAULT_STEPS_T,
            batch_max_dim: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("weight_init_std", self.weight_init_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.q.is_finite() && self.q >= 1.0) {
            return Err(Error::invalid(format!("q must be >= 1, got {}", self.q)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.batch_max_dim == 0 || self.batch_max_dim > crate::complex::MAX_DIM {
            return Err(Error::invalid(format!(
                "batch complex dimension must be in 1..={}, got {}",
                crate::complex::MAX_DIM,
                self.batch_max_dim
            )));
        }
        if !(self.step_h.is_finite() && self.step_h > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::invalid("alpha_init must be finite"));
        }
        Ok(())
    }
}

/// Raw loss terms. `topo` and `ridge` are stored unweighted; the weighted
/// total is always derived through `total()`, so the identity
/// `total = task + lambda * topo + beta * ridge` holds exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub topo: f64,
    pub ridge: f64,
    pub lambda: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.task + self.lambda * self.topo + self.beta * self.ridge
    }

    /// The weighted ridge term as it enters the total.
    pub fn ridge_term(&self) -> f64 {
        self.beta * self.ridge
    }

    /// The weighted topology term as it enters the total.
    pub fn topo_term(&self) -> f64 {
        self.lambda * self.topo
    }

    pub fn is_finite(&self) -> bool {
        self.task.is_finite() && self.topo.is_finite() && self.ridge.is_finite()
    }
}

/// Linear task head on the embedding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TaskHead {
    /// Softmax cross-entropy over `n_classes` logits.
    Classification { weight: Array2<f64>, bias: Array1<f64> },
    /// Squared error on a scalar prediction.
    Regression { weight: Array1<f64>, bias: f64 },
}

impl TaskHead {
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            TaskHead::Classification { bias, .. } => Some(bias.len()),
            TaskHead::Regression { .. } => None,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            TaskHead::Classification { weight, .. } => weight.nrows(),
            TaskHead::Regression { weight, .. } => weight.len(),
        }
    }

    fn logits(&self, z: &Array1<f64>) -> Array1<f64> {
        match self {
            TaskHead::Classification { weight, bias } => z.dot(weight) + bias,
            TaskHead::Regression { weight, bias } => Array1::from_vec(vec![z.dot(weight) + bias]),
        }
    }

    pub fn predict_class(&self, z: &Array1<f64>) -> Result<usize> {
        match self {
            TaskHead::Classification { .. } => {
                let l = self.logits(z);
                let mut best = 0usize;
                for k in 1..l.len() {
                    if l[k] > l[best] {
                        best = k;
                    }
                }
                Ok(best)
            }
            TaskHead::Regression { .. } => {
                Err(Error::invalid("regression head has no class prediction"))
            }
        }
    }

    pub fn predict_value(&self, z: &Array1<f64>) -> f64 {
        self.logits(z)[0]
    }
}

/// Per-sample supervision for the task term.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - m).exp());
    let s = exp.sum();
    exp / s
}

/// (loss, d_loss/d_z, d_loss/d_head_weight, d_loss/d_head_bias); the
/// head-gradient shapes follow the classification layout, a regression head
/// uses a single column.
type TaskBackward = (f64, Array1<f64>, Array2<f64>, Array1<f64>);

/// Loss and gradients of the task head on one sample.
fn task_forward_backward(head: &TaskHead, z: &Array1<f64>, target: &TargetRef) -> Result<TaskBackward> {
    match (head, target) {
        (TaskHead::Classification { weight, bias }, TargetRef::Class(y)) => {
            let k = bias.len();
            if *y >= k {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let p = softmax(&(z.dot(weight) + bias));
            let loss = -p[*y].max(f64::MIN_POSITIVE).ln();
            let mut dlogits = p;
            dlogits[*y] -= 1.0;
            let dz = weight.dot(&dlogits);
            let mut dw = Array2::<f64>::zeros(weight.dim());
            for i in 0..z.len() {
                for j in 0..k {
                    dw[(i, j)] = z[i] * dlogits[j];
                }
            }
            Ok((loss, dz, dw, dlogits))
        }
        (TaskHead::Regression { weight, bias }, TargetRef::Value(y)) => {
            let pred = z.dot(weight) + bias;
            let r = pred - y;
            let loss = r * r;
            let dz = weight.mapv(|w| 2.0 * r * w);
            let mut dw = Array2::<f64>::zeros((weight.len(), 1));
            for i in 0..z.len() {
                dw[(i, 0)] = 2.0 * r * z[i];
            }
            Ok((loss, dz, dw, Array1::from_vec(vec![2.0 * r])))
        }
        _ => Err(Error::invalid(
            "task head kind does not match the provided targets",
        )),
    }
}

enum TargetRef {
    Class(usize),
    Value(f64),
}

fn target_at(targets: &Targets, i: usize) -> TargetRef {
    match targets {
        Targets::Classes(v) => TargetRef::Class(v[i]),
        Targets::Values(v) => TargetRef::Value(v[i]),
    }
}

/// Diffusion coefficient storage: one scalar shared by every readout
/// dimension, or one per dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum AlphaParam {
    Shared(f64),
    PerDim(Vec<f64>),
}

impl AlphaParam {
    pub fn get(&self, p: usize) -> f64 {
        match self {
            AlphaParam::Shared(a) => *a,
            AlphaParam::PerDim(v) => v[p],
        }
    }

    /// Applies per-dimension gradient `deltas` scaled by `-eta`; the shared
    /// variant folds all dimensions into its single scalar.
    fn sgd_step(&mut self, deltas: &[f64], eta: f64) {
        match self {
            AlphaParam::Shared(a) => {
                let total: f64 = deltas.iter().sum();
                *a -= eta * total;
            }
            AlphaParam::PerDim(v) => {
                for (a, d) in v.iter_mut().zip(deltas) {
                    *a -= eta * d;
                }
            }
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            AlphaParam::Shared(a) => a.is_finite(),
            AlphaParam::PerDim(v) => v.iter().all(|a| a.is_finite()),
        }
    }
}

/// A trainable model: per-dimension stacks of flow layers, a task head, and
/// the frozen image windows the embeddings are built with.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlowModel {
    pub channels: usize,
    /// `weights[p][l]` mixes channels in layer `l` of dimension `p`.
    pub weights: Vec<Vec<Array2<f64>>>,
    pub alpha: AlphaParam,
    pub step_h: f64,
    pub steps_t: usize,
    pub head: TaskHead,
    pub image_params: Vec<ImageParams>,
}

impl FlowModel {
    /// Random initialization: flow weights and head entries are Gaussian
    /// with small standard deviations, biases start at zero.
    pub fn init(ds: &PreparedDataset, cfg: &TrainConfig) -> Result<FlowModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = ds.channels;
        let mut weights = Vec::with_capacity(AGG_DIMS);
        for _ in 0..AGG_DIMS {
            let mut per_layer = Vec::with_capacity(cfg.n_layers);
            for _ in 0..cfg.n_layers {
                let mut w = Array2::<f64>::zeros((c, c));
                for v in w.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal) * cfg.weight_init_std;
                }
                per_layer.push(w);
            }
            weights.push(per_layer);
        }
        let alpha = if cfg.per_dim_alpha {
            AlphaParam::PerDim(vec![cfg.alpha_init; AGG_DIMS])
        } else {
            AlphaParam::Shared(cfg.alpha_init)
        };
        let z_len = ds.embedding_len();
        let n_classes = ds.n_classes().max(2);
        let head_std = 1.0 / (z_len as f64).sqrt();
        let mut hw = Array2::<f64>::zeros((z_len, n_classes));
        for v in hw.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * head_std;
        }
        Ok(FlowModel {
            channels: c,
            weights,
            alpha,
            step_h: cfg.step_h,
            steps_t: cfg.steps_t,
            head: TaskHead::Classification {
                weight: hw,
                bias: Array1::zeros(n_classes),
            },
            image_params: ds.image_params.clone(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn layer_params(&self, p: usize) -> Vec<FlowLayerParams> {
        self.weights[p]
            .iter()
            .map(|w| FlowLayerParams {
                weight: w.clone(),
                alpha: self.alpha.get(p),
                step_h: self.step_h,
                steps_t: self.steps_t,
            })
            .collect()
    }

    /// Raw ridge value: the sum of squared Frobenius norms of all flow
    /// weights.
    pub fn ridge_raw(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        let head_ok = match &self.head {
            TaskHead::Classification { weight, bias } => {
                weight.iter().all(|v| v.is_finite()) && bias.iter().all(|v| v.is_finite())
            }
            TaskHead::Regression { weight, bias } => {
                weight.iter().all(|v| v.is_finite()) && bias.is_finite()
            }
        };
        head_ok
            && self.alpha.is_finite()
            && self
                .weights
                .iter()
                .flatten()
                .all(|w| w.iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<FlowModel> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Gradient accumulator shaped like the trainable parameters.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub weights: Vec<Vec<Array2<f64>>>,
    /// Per-dimension alpha gradients (folded on update for a shared alpha).
    pub alphas: Vec<f64>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl ModelGrads {
    fn zeros_like(model: &FlowModel) -> ModelGrads {
        let (hw, hb) = match &model.head {
            TaskHead::Classification { weight, bias } => {
                (Array2::zeros(weight.dim()), Array1::zeros(bias.len()))
            }
            TaskHead::Regression { weight, .. } => (Array2::zeros((weight.len(), 1)), Array1::zeros(1)),
        };
        ModelGrads {
            weights: model
                .weights
                .iter()
                .map(|ws| ws.iter().map(|w| Array2::zeros(w.dim())).collect())
                .collect(),
            alphas: vec![0.0; AGG_DIMS],
            head_weight: hw,
            head_bias: hb,
        }
    }

    fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .flatten()
            .all(|w| w.iter().all(|v| v.is_finite()))
            && self.alphas.iter().all(|v| v.is_finite())
            && self.head_weight.iter().all(|v| v.is_finite())
            && self.head_bias.iter().all(|v| v.is_finite())
    }
}

/// Per-sample forward cache for the backward pass.
pub struct SampleCache {
    caches: Vec<Vec<FlowCache>>,
    state_t: CochainState,
}

/// Runs the flow stacks and readout for one prepared sample.
pub fn forward_sample(model: &FlowModel, sample: &PreparedSample) -> Result<(Embedding, SampleCache)> {
    let mut finals = Vec::with_capacity(AGG_DIMS);
    let mut caches = Vec::with_capacity(AGG_DIMS);
    for p in 0..AGG_DIMS {
        let layers = model.layer_params(p);
        let (phi_t, cache) = stack_forward(sample.state0.phi(p), &sample.laplacians[p], &layers)?;
        finals.push(phi_t);
        caches.push(cache);
    }
    // Shapes are correct by construction, so a constructor error here means
    // the dynamics left the finite range.
    let state_t = CochainState::new(finals)
        .map_err(|_| Error::numerical("flow state diverged to non-finite values"))?;
    let emb = aggregate(&state_t, &sample.diagrams, &model.image_params)?;
    Ok((emb, SampleCache { caches, state_t }))
}

/// Embeds every sample of a dataset with the current parameters.
pub fn embed_dataset(model: &FlowModel, ds: &PreparedDataset) -> Result<Vec<Array1<f64>>> {
    ds.samples
        .iter()
        .map(|s| forward_sample(model, s).map(|(e, _)| e.z))
        .collect()
}

/// Routes an embedding gradient back through readout and flow stacks,
/// accumulating parameter gradients.
#[allow(clippy::needless_range_loop)]
fn backward_sample(
    model: &FlowModel,
    sample: &PreparedSample,
    cache: &SampleCache,
    dz: &Array1<f64>,
    image_lens: &[usize],
    grads: &mut ModelGrads,
) -> Result<()> {
    let dstate = aggregate_state_backward(dz, &cache.state_t, image_lens)?;
    for p in 0..AGG_DIMS {
        let layers = model.layer_params(p);
        let (_, per_layer) =
            stack_backward(&cache.caches[p], &sample.laplacians[p], &layers, &dstate[p])?;
        for (l, (dw, da)) in per_layer.into_iter().enumerate() {
            grads.weights[p][l] += &dw;
            grads.alphas[p] += da;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Topology term
// ---------------------------------------------------------------------------

/// The topology term of one batch: per-dimension matching distances between
/// the diagrams of the embedding cloud and of the signature cloud, plus the
/// gradient with respect to each embedding vector.
pub struct BatchTopo {
    pub per_dim: Vec<f64>,
    pub total: f64,
    pub d_z: Vec<Array1<f64>>,
    /// Whether any matched cost had an ambiguous maximizing coordinate or
    /// realizing edge; finite-difference checks skip such batches.
    pub has_ties: bool,
}

const TIE_TOL: f64 = 1e-9;

/// Finite persistence pairs of a reduced complex together with their
/// creator/destroyer simplex indices, in the diagram's canonical order.
struct RecordedDiagram {
    diagram: PersistenceDiagram,
    creators: Vec<usize>,
    destroyers: Vec<usize>,
}

fn recorded_diagrams(cx: &FilteredComplex, max_p: usize) -> Result<Vec<RecordedDiagram>> {
    let opts = PersistenceOptions {
        keep_zero_length: false,
        with_transcript: true,
    };
    let res = compute_persistence_opts(cx, max_p, opts)?;
    let transcript = res
        .transcript
        .ok_or_else(|| Error::InvalidState("persistence did not return a transcript".into()))?;
    let mut out = Vec::with_capacity(max_p + 1);
    for p in 0..=max_p {
        let mut pairs = Vec::new();
        let mut creators = Vec::new();
        let mut destroyers = Vec::new();
        for r in transcript.aligned(p, false) {
            if let Some(d) = r.destroyer {
                pairs.push((r.birth, r.death));
                creators.push(r.creator);
                destroyers.push(d);
            }
        }
        out.push(RecordedDiagram {
            diagram: PersistenceDiagram {
                dim: p,
                pairs,
                truncation: Some(cx.filtration_max()),
            },
            creators,
            destroyers,
        });
    }
    Ok(out)
}

/// Adds `coeff * d(value of simplex g)/d(points)` into `d_z`. The filtration
/// value of a Rips simplex is the length of its longest edge; the gradient
/// flows to that edge's two endpoints. Vertices (value 0) and zero-length
/// edges contribute nothing.
fn route_simplex_gradient(
    cx: &FilteredComplex,
    g: usize,
    coeff: f64,
    points: &Array2<f64>,
    dists: &Array2<f64>,
    d_z: &mut [Array1<f64>],
    has_ties: &mut bool,
) {
    let verts = cx.simplex(g).vertices();
    if verts.len() < 2 {
        return;
    }
    let mut best = (0usize, 0usize);
    let mut best_d = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for i in 0..verts.len() {
        for j in (i + 1)..verts.len() {
            let (u, v) = (verts[i] as usize, verts[j] as usize);
            let d = dists[(u, v)];
            if d > best_d {
                second = best_d;
                best_d = d;
                best = (u, v);
            } else if d > second {
                second = d;
            }
        }
    }
    if verts.len() > 2 && best_d - second < TIE_TOL {
        *has_ties = true;
    }
    if best_d <= 0.0 {
        return;
    }
    let (u, v) = best;
    let scale = coeff / best_d;
    for k in 0..points.ncols() {
        let diff = points[(u, k)] - points[(v, k)];
        d_z[u][k] += scale * diff;
        d_z[v][k] -= scale * diff;
    }
}

/// Computes the batch topology term and its gradient with respect to the
/// embedding vectors. `gt` rows are the per-sample signature vectors.
pub fn topo_term(zs: &[Array1<f64>], gt: &[Array1<f64>], q: f64, batch_max_dim: usize) -> Result<BatchTopo> {
    if zs.len() != gt.len() || zs.is_empty() {
        return Err(Error::invalid(
            "topology term needs matching nonempty embedding and signature batches",
        ));
    }
    let z_mat = stack_rows(zs)?;
    let gt_mat = stack_rows(gt)?;
    let z_dists = euclidean_distances(&z_mat);
    let gt_dists = euclidean_distances(&gt_mat);
    if z_dists.iter().chain(gt_dists.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "pairwise distances overflowed in the topology term",
        ));
    }
    let max_p = batch_max_dim - 1;
    let pred_cx = FilteredComplex::build_rips(&z_dists, batch_max_dim, None)?;
    let gt_cx = FilteredComplex::build_rips(&gt_dists, batch_max_dim, None)?;
    let pred = recorded_diagrams(&pred_cx, max_p)?;
    let gt_rec = recorded_diagrams(&gt_cx, max_p)?;

    let mut d_z: Vec<Array1<f64>> = zs.iter().map(|z| Array1::zeros(z.len())).collect();
    let mut per_dim = Vec::with_capacity(max_p + 1);
    let mut has_ties = false;

    for p in 0..=max_p {
        let pd = &pred[p];
        let gd = &gt_rec[p].diagram;
        let (dist, matching) = crate::metrics::wasserstein_distance(&pd.diagram, gd, q)?;
        per_dim.push(dist);
        if dist <= 0.0 {
            continue;
        }
        for &(left, right) in &matching.pairs {
            // Gradient only flows into prediction points.
            let i = match left {
                crate::metrics::MatchTarget::Point(i) => i,
                crate::metrics::MatchTarget::Diagonal => continue,
            };
            let (b, d) = pd.diagram.pairs[i];
            // (cost m, d m/d birth, d m/d death) for this pair.
            let (m, db, dd) = match right {
                crate::metrics::MatchTarget::Point(j) => {
                    let (gb, gdth) = gd.pairs[j];
                    let (ab, ad) = ((b - gb).abs(), (d - gdth).abs());
                    if (ab - ad).abs() < TIE_TOL && ab.max(ad) > 0.0 {
                        has_ties = true;
                    }
                    if ab >= ad {
                        (ab, (b - gb).signum(), 0.0)
                    } else {
                        (ad, 0.0, (d - gdth).signum())
                    }
                }
                crate::metrics::MatchTarget::Diagonal => ((d - b) / 2.0, -0.5, 0.5),
            };
            if m <= 0.0 {
                continue;
            }
            // d dist / d m for the order-q objective.
            let factor = if q == 1.0 {
                1.0
            } else {
                (m / dist).powf(q - 1.0)
            };
            if db != 0.0 {
                route_simplex_gradient(
                    &pred_cx,
                    pd.creators[i],
                    factor * db,
                    &z_mat,
                    &z_dists,
                    &mut d_z,
                    &mut has_ties,
                );
            }
            if dd != 0.0 {
                route_simplex_gradient(
                    &pred_cx,
                    pd.destroyers[i],
                    factor * dd,
                    &z_mat,
                    &z_dists,
                    &mut d_z,
                    &mut has_ties,
                );
            }
        }
    }
    let total = per_dim.iter().sum();
    Ok(BatchTopo {
        per_dim,
        total,
        d_z,
        has_ties,
    })
}

// ---------------------------------------------------------------------------
// Composite loss over a batch
// ---------------------------------------------------------------------------

/// Loss breakdown and parameter gradients on one batch of sample indices.
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    pub topo_per_dim: Vec<f64>,
    pub has_ties: bool,
    /// Smallest |pre-activation| across all flow steps in the batch.
    pub min_abs_preactivation: f64,
}

pub fn composite_loss_batch(
    model: &FlowModel,
    ds: &PreparedDataset,
    targets: &Targets,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if targets.len() != ds.n_samples() {
        return Err(Error::invalid(format!(
            "got {} targets for {} samples",
            targets.len(),
            ds.n_samples()
        )));
    }
    let bsz = indices.len() as f64;
    let mut grads = ModelGrads::zeros_like(model);
    let mut zs = Vec::with_capacity(indices.len());
    let mut caches = Vec::with_capacity(indices.len());
    let mut image_lens: Vec<usize> = Vec::new();
    let mut min_abs = f64::INFINITY;
    for &i in indices {
        let (emb, cache) = forward_sample(model, &ds.samples[i])?;
        if emb.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite embedding for sample {i}"
            )));
        }
        for stack in &cache.caches {
            for c in stack {
                min_abs = min_abs.min(c.min_abs_preactivation());
            }
        }
        if image_lens.is_empty() {
            image_lens = emb.image_lens.clone();
        }
        zs.push(emb.z);
        caches.push(cache);
    }

    // Task term (mean over the batch) and its head/embedding gradients.
    let mut task = 0.0;
    let mut dzs: Vec<Array1<f64>> = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let (loss, dz, dhw, dhb) =
            task_forward_backward(&model.head, &zs[slot], &target_at(targets, i))?;
        task += loss / bsz;
        dzs.push(dz / bsz);
        grads.head_weight.scaled_add(1.0 / bsz, &dhw);
        grads.head_bias.scaled_add(1.0 / bsz, &dhb);
    }

    // Topology term on the batch point sets.
    let mut topo = 0.0;
    let mut topo_per_dim = vec![0.0; cfg.batch_max_dim];
    let mut has_ties = false;
    if cfg.lambda != 0.0 && indices.len() >= 2 {
        let gt: Vec<Array1<f64>> = indices.iter().map(|&i| ds.signatures[i].clone()).collect();
        let bt = topo_term(&zs, &gt, cfg.q, cfg.batch_max_dim)?;
        topo = bt.total;
        topo_per_dim = bt.per_dim;
        has_ties = bt.has_ties;
        for (dz, dt) in dzs.iter_mut().zip(&bt.d_z) {
            dz.scaled_add(cfg.lambda, dt);
        }
    }

    // Backpropagate the combined embedding gradient through the flow.
    for (slot, &i) in indices.iter().enumerate() {
        backward_sample(model, &ds.samples[i], &caches[slot], &dzs[slot], &image_lens, &mut grads)?;
    }

    // Ridge on the flow weights: raw value plus its exact gradient 2 beta W.
    let ridge = model.ridge_raw();
    if cfg.beta != 0.0 {
        for (gw, mw) in grads.weights.iter_mut().flatten().zip(model.weights.iter().flatten()) {
            gw.scaled_add(2.0 * cfg.beta, mw);
        }
    }

    Ok(BatchResult {
        breakdown: LossBreakdown {
            task,
            topo,
            ridge,
            lambda: cfg.lambda,
            beta: cfg.beta,
        },
        grads,
        topo_per_dim,
        has_ties,
        min_abs_preactivation: min_abs,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Dataset-level metrics logged once per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task_loss: f64,
    /// Mean per-batch topology term (index-order batches).
    pub topo: f64,
    pub ridge: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub task_metric: f64,
    pub f1_macro: Option<f64>,
}

/// Evaluates the model on the whole dataset without updating it. Batches
/// are taken in index order, so the result is a pure function of the model
/// and dataset.
#[allow(clippy::needless_range_loop)]
pub fn evaluate(
    model: &FlowModel,
    ds: &PreparedDataset,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<EvalMetrics> {
    let n = ds.n_samples();
    let zs = embed_dataset(model, ds)?;
    let mut task = 0.0;
    for i in 0..n {
        let (loss, _, _, _) = task_forward_backward(&model.head, &zs[i], &target_at(targets, i))?;
        task += loss / n as f64;
    }
    let mut topo_sum = 0.0;
    let mut n_batches = 0usize;
    if cfg.lambda != 0.0 {
        let mut start = 0usize;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            if end - start >= 2 {
                let zb: Vec<Array1<f64>> = zs[start..end].to_vec();
                let gb: Vec<Array1<f64>> = ds.signatures[start..end].to_vec();
                topo_sum += topo_term(&zb, &gb, cfg.q, cfg.batch_max_dim)?.total;
                n_batches += 1;
            }
            start = end;
        }
    }
    let topo = if n_batches > 0 {
        topo_sum / n_batches as f64
    } else {
        0.0
    };

    let (task_metric, f1_macro) = match (&model.head, targets) {
        (TaskHead::Classification { bias, .. }, Targets::Classes(labels)) => {
            let k = bias.len();
            let mut correct = 0usize;
            let mut tp = vec![0usize; k];
            let mut fp = vec![0usize; k];
            let mut fnn = vec![0usize; k];
            for i in 0..n {
                let pred = model.head.predict_class(&zs[i])?;
                if pred == labels[i] {
                    correct += 1;
                    tp[pred] += 1;
                } else {
                    fp[pred] += 1;
                    fnn[labels[i]] += 1;
                }
            }
            let mut f1_sum = 0.0;
            for c in 0..k {
                let denom = 2 * tp[c] + fp[c] + fnn[c];
                f1_sum += if denom == 0 {
                    // Class absent from both predictions and labels.
                    1.0
                } else {
                    2.0 * tp[c] as f64 / denom as f64
                };
            }
            (correct as f64 / n as f64, Some(f1_sum / k as f64))
        }
        (TaskHead::Regression { .. }, Targets::Values(ys)) => {
            let mut mse = 0.0;
            for i in 0..n {
                let r = model.head.predict_value(&zs[i]) - ys[i];
                mse += r * r / n as f64;
            }
            (mse, None)
        }
        _ => {
            return Err(Error::invalid(
                "task head kind does not match the provided targets",
            ))
        }
    };

    Ok(EvalMetrics {
        task_loss: task,
        topo,
        ridge: model.ridge_raw(),
        task_metric,
        f1_macro,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One row of the training log; written once before any update (epoch 0)
/// and once after each epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub topo_loss: f64,
    pub ridge: f64,
    pub accuracy: f64,
}

/// Serializes log rows as the canonical training CSV.
pub fn log_to_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,task_loss,topo_loss,ridge,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.task_loss, r.topo_loss, r.ridge, r.accuracy
        ));
    }
    out
}

/// Plain-SGD state; serialized so resumed runs continue identically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
}

/// Everything needed to restart training after any completed epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Last completed epoch (0 = initialized, untrained).
    pub epoch: usize,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub model: FlowModel,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_model: FlowModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Result of a training run: the full log (starting at the epoch-0 row for
/// fresh runs) and the final checkpoint holding last and best models.
pub struct TrainResult {
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

/// Two configs describe the same run when they agree on everything except
/// the horizon; resuming may extend `epochs`.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.epochs = 0;
    b.epochs = 0;
    a == b
}

/// Decouples the shuffle of each epoch from everything else so a resumed
/// run shuffles identically.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::data::derive_seed(seed, epoch as u64)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn sgd_step(model: &mut FlowModel, grads: &ModelGrads, eta: f64) {
    for (ws, gs) in model.weights.iter_mut().zip(&grads.weights) {
        for (w, g) in ws.iter_mut().zip(gs) {
            w.scaled_add(-eta, g);
        }
    }
    model.alpha.sgd_step(&grads.alphas, eta);
    match &mut model.head {
        TaskHead::Classification { weight, bias } => {
            weight.scaled_add(-eta, &grads.head_weight);
            bias.scaled_add(-eta, &grads.head_bias);
        }
        TaskHead::Regression { weight, bias } => {
            for (i, w) in weight.iter_mut().enumerate() {
                *w -= eta * grads.head_weight[(i, 0)];
            }
            *bias -= eta * grads.head_bias[0];
        }
    }
}

fn eval_row(
    model: &FlowModel,
    ds: &PreparedDataset,
    targets: &Targets,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLog> {
    let m = evaluate(model, ds, targets, cfg)?;
    Ok(EpochLog {
        epoch,
        task_loss: m.task_loss,
        topo_loss: m.topo,
        ridge: m.ridge,
        accuracy: m.task_metric,
    })
}

/// Trains a fresh model (or continues from `resume`) with plain SGD.
///
/// The first log row of a fresh run is the epoch-0 evaluation of the
/// initialized, untouched model. Any non-finite loss term or gradient
/// aborts with the epoch, batch, and term named. Shuffles depend only on
/// `(seed, epoch)`, so resuming from a checkpoint after epoch `e`
/// reproduces the uninterrupted run exactly.
pub fn train(
    ds: &PreparedDataset,
    targets: &Targets,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.n_samples() == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if targets.len() != ds.n_samples() {
        return Err(Error::invalid(format!(
            "got {} targets for {} samples",
            targets.len(),
            ds.n_samples()
        )));
    }

    let mut log = Vec::new();
    let (mut model, mut best_epoch, mut best_metric, mut best_model, start_epoch) = match resume {
        Some(ck) => {
            if !same_run(&ck.config, cfg) {
                return Err(Error::InvalidState(
                    "checkpoint was produced by a different configuration".into(),
                ));
            }
            let e = ck.epoch;
            (ck.model, ck.best_epoch, ck.best_metric, ck.best_model, e)
        }
        None => {
            let model = FlowModel::init(ds, cfg)?;
            let row = eval_row(&model, ds, targets, cfg, 0).map_err(|e| match e {
                Error::NumericalFailure(msg) => {
                    Error::numerical(format!("initial evaluation: {msg}"))
                }
                other => other,
            })?;
            log.push(row);
            let metric = row.accuracy;
            (model.clone(), 0, metric, model, 0)
        }
    };

    for epoch in (start_epoch + 1)..=cfg.epochs {
        let order = shuffled_indices(ds.n_samples(), epoch_seed(cfg.seed, epoch));
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let res = match composite_loss_batch(&model, ds, targets, chunk, cfg) {
                Ok(r) => r,
                Err(Error::NumericalFailure(msg)) => {
                    return Err(Error::numerical(format!(
                        "epoch {epoch}, batch {batch_no}: {msg}"
                    )));
                }
                Err(other) => return Err(other),
            };
            if !res.breakdown.is_finite() || !res.breakdown.total().is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}: task={}, topo={}, ridge={}",
                    res.breakdown.task, res.breakdown.topo, res.breakdown.ridge
                )));
            }
            if !res.grads.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite gradient at epoch {epoch}, batch {batch_no}"
                )));
            }
            sgd_step(&mut model, &res.grads, cfg.learning_rate);
            if !model.is_finite() {
                return Err(Error::numerical(format!(
                    "parameters became non-finite after epoch {epoch}, batch {batch_no}"
                )));
            }
        }
        let row = eval_row(&model, ds, targets, cfg, epoch).map_err(|e| match e {
            Error::NumericalFailure(msg) => {
                Error::numerical(format!("epoch {epoch} evaluation: {msg}"))
            }
            other => other,
        })?;
        log.push(row);
        let better = match &model.head {
            // Higher accuracy is better; lower MSE is better.
            TaskHead::Classification { .. } => row.accuracy > best_metric,
            TaskHead::Regression { .. } => row.accuracy < best_metric,
        };
        if better {
            best_metric = row.accuracy;
            best_epoch = epoch;
            best_model = model.clone();
        }
    }

    Ok(TrainResult {
        log,
        checkpoint: Checkpoint {
            epoch: cfg.epochs,
            config: cfg.clone(),
            optimizer: OptimizerState {
                learning_rate: cfg.learning_rate,
            },
            model,
            best_epoch,
            best_metric,
            best_model,
        },
    })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// What the finite-difference probe differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckMode {
    /// Only the flow parameters, with the task head fixed.
    FlowOnly,
    /// Every trainable parameter against the full composite loss.
    FullLoss,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

fn batch_total(
    model: &FlowModel,
    ds: &PreparedDataset,
    targets: &Targets,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(composite_loss_batch(model, ds, targets, indices, cfg)?
        .breakdown
        .total())
}

/// Compares analytic gradients of the composite loss against central finite
/// differences on one batch. Instances whose forward pass grazes a relu
/// kink or whose matching has tied costs are skipped (counted, not checked):
/// the loss is not differentiable there and the comparison is meaningless.
pub fn gradient_check(
    model: &FlowModel,
    ds: &PreparedDataset,
    targets: &Targets,
    indices: &[usize],
    cfg: &TrainConfig,
    mode: GradCheckMode,
    fd_h: f64,
) -> Result<GradCheckReport> {
    let base = composite_loss_batch(model, ds, targets, indices, cfg)?;
    if base.has_ties || base.min_abs_preactivation < 10.0 * fd_h {
        return Ok(GradCheckReport {
            checked: 0,
            skipped: 1,
            max_rel_error: 0.0,
        });
    }
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;

    let probe = |analytic: f64, fd: f64, max_rel: &mut f64, checked: &mut usize| {
        let rel = (analytic - fd).abs() / fd.abs().max(1.0);
        *max_rel = max_rel.max(rel);
        *checked += 1;
    };

    // Flow weights: one entry per dimension/layer.
    for p in 0..AGG_DIMS {
        for l in 0..model.n_layers() {
            let c = model.channels;
            let (i, j) = ((p + l) % c, (p * 2 + l) % c);
            let mut up = model.clone();
            up.weights[p][l][(i, j)] += fd_h;
            let mut dn = model.clone();
            dn.weights[p][l][(i, j)] -= fd_h;
            let fd = (batch_total(&up, ds, targets, indices, cfg)?
                - batch_total(&dn, ds, targets, indices, cfg)?)
                / (2.0 * fd_h);
            probe(base.grads.weights[p][l][(i, j)], fd, &mut max_rel, &mut checked);
        }
    }

    // Alpha (shared: gradients must be folded the way the update folds them).
    {
        let analytic = match &model.alpha {
            AlphaParam::Shared(_) => base.grads.alphas.iter().sum::<f64>(),
            AlphaParam::PerDim(_) => base.grads.alphas[1],
        };
        let bump = |m: &mut FlowModel, delta: f64| match &mut m.alpha {
            AlphaParam::Shared(a) => *a += delta,
            AlphaParam::PerDim(v) => v[1] += delta,
        };
        let mut up = model.clone();
        bump(&mut up, fd_h);
        let mut dn = model.clone();
        bump(&mut dn, -fd_h);
        let fd = (batch_total(&up, ds, targets, indices, cfg)?
            - batch_total(&dn, ds, targets, indices, cfg)?)
            / (2.0 * fd_h);
        probe(analytic, fd, &mut max_rel, &mut checked);
    }

    if mode == GradCheckMode::FullLoss {
        // A couple of head coordinates.
        let coords = [(0usize, 0usize), (1usize, 0usize)];
        for &(i, j) in &coords {
            let analytic = base.grads.head_weight[(i, j)];
            let bump = |m: &mut FlowModel, delta: f64| match &mut m.head {
                TaskHead::Classification { weight, .. } => weight[(i, j)] += delta,
                TaskHead::Regression { weight, .. } => weight[i] += delta,
            };
            let mut up = model.clone();
            bump(&mut up, fd_h);
            let mut dn = model.clone();
            bump(&mut dn, -fd_h);
            let fd = (batch_total(&up, ds, targets, indices, cfg)?
                - batch_total(&dn, ds, targets, indices, cfg)?)
                / (2.0 * fd_h);
            probe(analytic, fd, &mut max_rel, &mut checked);
        }
    }

    Ok(GradCheckReport {
        checked,
        skipped: 0,
        max_rel_error: max_rel,
    })
}
