//! Trainable flow layers on cochains of a filtered complex.
//!
//! A layer evolves per-dimension cochain features `phi_p` (one row per
//! p-simplex, `c` channels) by explicit Euler steps of
//!
//! ```text
//! phi <- phi + h * relu(phi W + alpha * L_p phi)
//! ```
//!
//! where `L_p` is the symmetric Hodge Laplacian of the complex. The
//! nonlinearity sits inside the Euler increment, so zero parameters make the
//! layer an exact identity and harmonic cochains are exact fixed points of
//! the pure-diffusion layer. `flow_backward` implements reverse-mode
//! differentiation through the unrolled steps with the convention
//! `relu'(0) = 0`.

use ndarray::{Array1, Array2};

use crate::complex::FilteredComplex;
use crate::error::{Error, Result};
use crate::persistence::{PersistenceDiagram, ReductionTranscript};
use crate::sparse::{FieldTag, SparseFieldMatrix};
use crate::vectorization::{vectorize, ImageParams};

/// Default Euler step size.
pub const DEFAULT_STEP_H: f64 = 0.1;
/// Default number of Euler steps per layer.
pub const DEFAULT_STEPS_T: usize = 10;
/// Cochain dimensions that participate in readout: p = 0, 1, 2.
pub const AGG_DIMS: usize = 3;

/// Per-dimension cochain feature matrices; `phi(p)` has one row per
/// p-simplex (in filtration-local rank order) and a fixed channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct CochainState {
    channels: usize,
    phi: Vec<Array2<f64>>,
}

impl CochainState {
    /// Validates equal channel counts and finite entries.
    pub fn new(phi: Vec<Array2<f64>>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::invalid("cochain state needs at least one dimension"));
        }
        let channels = phi[0].ncols();
        for (p, m) in phi.iter().enumerate() {
            if m.ncols() != channels {
                return Err(Error::invalid(format!(
                    "dimension {p} has {} channels, expected {channels}",
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "cochain state for dimension {p} contains a non-finite entry"
                )));
            }
        }
        Ok(Self { channels, phi })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_dims(&self) -> usize {
        self.phi.len()
    }

    pub fn phi(&self, p: usize) -> &Array2<f64> {
        &self.phi[p]
    }

    pub fn phi_mut(&mut self, p: usize) -> &mut Array2<f64> {
        &mut self.phi[p]
    }

    pub fn into_inner(self) -> Vec<Array2<f64>> {
        self.phi
    }
}

/// Parameters of one flow layer: a channel-mixing matrix, a diffusion
/// coefficient on the Laplacian, and the Euler discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayerParams {
    /// Channel mixing, `channels x channels`.
    pub weight: Array2<f64>,
    /// Coefficient on the Hodge-Laplacian term.
    pub alpha: f64,
    /// Euler step size, positive.
    pub step_h: f64,
    /// Number of Euler steps.
    pub steps_t: usize,
}

impl FlowLayerParams {
    pub fn new(weight: Array2<f64>, alpha: f64) -> Self {
        Self {
            weight,
            alpha,
            step_h: DEFAULT_STEP_H,
            steps_t: DEFAULT_STEPS_T,
        }
    }

    /// All-zero parameters: the layer is then an exact identity.
    pub fn zeros(channels: usize) -> Self {
        Self::new(Array2::zeros((channels, channels)), 0.0)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.weight.nrows() != channels || self.weight.ncols() != channels {
            return Err(Error::invalid(format!(
                "flow weight must be {channels}x{channels}, got {}x{}",
                self.weight.nrows(),
                self.weight.ncols()
            )));
        }
        if self.weight.iter().any(|v| !v.is_finite()) || !self.alpha.is_finite() {
            return Err(Error::invalid("flow parameters contain a non-finite value"));
        }
        if !(self.step_h.is_finite() && self.step_h > 0.0) {
            return Err(Error::invalid(format!(
                "step size must be positive, got {}",
                self.step_h
            )));
        }
        Ok(())
    }
}

/// Builds the initial cochain state of a complex from its reduction
/// transcript. Channel 0 carries the filtration value of each simplex,
/// channel 1 the persistence of the finite pair it participates in (0 for
/// unpaired simplices), and any remaining channels start at zero. The state
/// always spans dimensions `0..AGG_DIMS`, with empty matrices where the
/// complex has no simplices.
pub fn init_state(
    cx: &FilteredComplex,
    transcript: &ReductionTranscript,
    channels: usize,
) -> Result<CochainState> {
    if channels < 2 {
        return Err(Error::invalid(format!(
            "initial state needs at least 2 channels, got {channels}"
        )));
    }
    for p in 0..=transcript.max_p() {
        for r in transcript.records(p) {
            let bad = r.creator >= cx.len() || r.destroyer.is_some_and(|d| d >= cx.len());
            if bad {
                return Err(Error::InvalidState(format!(
                    "transcript references simplex index beyond the complex \
                     ({} simplices); it was computed for a different complex",
                    cx.len()
                )));
            }
        }
    }
    let pair_pers = transcript.simplex_pair_persistence(cx.len());
    let mut phi = Vec::with_capacity(AGG_DIMS);
    for p in 0..AGG_DIMS {
        let n_p = if p <= cx.max_dim() { cx.count(p) } else { 0 };
        let mut m = Array2::<f64>::zeros((n_p, channels));
        for j in 0..n_p {
            let g = cx.global_index(p, j);
            m[(j, 0)] = cx.value(g);
            m[(j, 1)] = pair_pers[g];
        }
        phi.push(m);
    }
    CochainState::new(phi)
}

/// The Hodge Laplacian for dimension `p`, or an empty matrix when the
/// complex has no p-simplices. The flow layer treats both uniformly.
pub fn laplacian_or_empty(cx: &FilteredComplex, p: usize) -> Result<SparseFieldMatrix> {
    if p <= cx.max_dim() && cx.count(p) > 0 {
        cx.hodge_laplacian(p)
    } else {
        Ok(SparseFieldMatrix::zeros(0, 0, FieldTag::Real))
    }
}

fn check_shapes(
    phi: &Array2<f64>,
    laplacian: &SparseFieldMatrix,
    params: &FlowLayerParams,
) -> Result<()> {
    params.validate(phi.ncols())?;
    if laplacian.rows() != laplacian.cols() || laplacian.rows() != phi.nrows() {
        return Err(Error::invalid(format!(
            "laplacian is {}x{} but the state has {} rows",
            laplacian.rows(),
            laplacian.cols(),
            phi.nrows()
        )));
    }
    if laplacian.field() != FieldTag::Real {
        return Err(Error::invalid("flow needs a real-field laplacian"));
    }
    Ok(())
}

/// One pre-activation `phi W + alpha L phi`.
fn pre_activation(
    phi: &Array2<f64>,
    laplacian: &SparseFieldMatrix,
    params: &FlowLayerParams,
) -> Array2<f64> {
    let mut a = phi.dot(&params.weight);
    if params.alpha != 0.0 {
        a.scaled_add(params.alpha, &laplacian.mul_dense(phi));
    }
    a
}

/// Runs the unrolled Euler steps, returning the final state.
pub fn flow_forward(
    phi0: &Array2<f64>,
    laplacian: &SparseFieldMatrix,
    params: &FlowLayerParams,
) -> Result<Array2<f64>> {
    check_shapes(phi0, laplacian, params)?;
    let mut phi = phi0.clone();
    for _ in 0..params.steps_t {
        let a = pre_activation(&phi, laplacian, params);
        phi.scaled_add(params.step_h, &a.mapv(|x| if x > 0.0 { x } else { 0.0 }));
    }
    Ok(phi)
}

/// Everything the backward pass needs: the state before each step and the
/// active-set mask of each pre-activation (`relu'(0) = 0`).
#[derive(Debug, Clone)]
pub struct FlowCache {
    phis: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
    min_abs: f64,
}

impl FlowCache {
    /// Smallest absolute pre-activation seen while building the cache; tiny
    /// values flag proximity to the relu kink, where finite differences are
    /// not trustworthy.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.min_abs
    }
}

/// Forward pass that also returns the step-by-step cache.
pub fn flow_forward_cached(
    phi0: &Array2<f64>,
    laplacian: &SparseFieldMatrix,
    params: &FlowLayerParams,
) -> Result<(Array2<f64>, FlowCache)> {
    check_shapes(phi0, laplacian, params)?;
    let mut phi = phi0.clone();
    let mut phis = Vec::with_capacity(params.steps_t + 1);
    let mut masks = Vec::with_capacity(params.steps_t);
    let mut min_abs = f64::INFINITY;
    for _ in 0..params.steps_t {
        let a = pre_activation(&phi, laplacian, params);
        // Exact zeros come from structurally zero rows and columns (e.g. the
        // all-zero filtration channel of vertices) and stay zero under any
        // parameter perturbation, so they are not near-kink hazards; only
        // small nonzero magnitudes can cross the relu threshold.
        for &v in a.iter() {
            if v != 0.0 {
                min_abs = min_abs.min(v.abs());
            }
        }
        let mask = a.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        phis.push(phi.clone());
        phi.scaled_add(params.step_h, &(&a * &mask));
        masks.push(mask);
    }
    phis.push(phi.clone());
    Ok((phi, FlowCache { phis, masks, min_abs }))
}

/// Gradients of a scalar loss with respect to a layer's inputs and
/// parameters, given the gradient with respect to its output.
#[derive(Debug, Clone)]
pub struct FlowGrad {
    pub d_phi0: Array2<f64>,
    pub d_weight: Array2<f64>,
    pub d_alpha: f64,
}

/// Reverse-mode pass through the unrolled Euler steps. `laplacian` must be
/// the symmetric matrix used in the forward pass.
pub fn flow_backward(
    cache: &FlowCache,
    laplacian: &SparseFieldMatrix,
    params: &FlowLayerParams,
    upstream: &Array2<f64>,
) -> Result<FlowGrad> {
    let c = params.weight.nrows();
    if cache.phis.len() != params.steps_t + 1 || cache.masks.len() != params.steps_t {
        return Err(Error::InvalidState(
            "flow cache does not match the layer's step count".into(),
        ));
    }
    let last = cache.phis.last().expect("nonempty cache");
    if upstream.dim() != last.dim() {
        return Err(Error::invalid(format!(
            "upstream gradient shape {:?} does not match state shape {:?}",
            upstream.dim(),
            last.dim()
        )));
    }
    debug_assert!(laplacian.is_symmetric(1e-12), "flow laplacian must be symmetric");
    let mut g = upstream.clone();
    let mut d_weight = Array2::<f64>::zeros((c, c));
    let mut d_alpha = 0.0;
    for t in (0..params.steps_t).rev() {
        // M_t = h * (g_{t+1} restricted to the active set of step t).
        let m = cache.masks[t].mapv(|x| x * params.step_h) * &g;
        d_weight += &cache.phis[t].t().dot(&m);
        let lphi = laplacian.mul_dense(&cache.phis[t]);
        d_alpha += (&m * &lphi).sum();
        // g_t = g_{t+1} + M_t W^T + alpha L M_t (L symmetric).
        g += &m.dot(&params.weight.t());
        if params.alpha != 0.0 {
            g.scaled_add(params.alpha, &laplacian.mul_dense(&m));
        }
    }
    Ok(FlowGrad { d_phi0: g, d_weight, d_alpha })
}

/// Applies a stack of layers in order, collecting each layer's cache.
pub fn stack_forward(
    phi0: &Array2<f64>,
    laplacian: &SparseFieldMatrix,
    layers: &[FlowLayerParams],
) -> Result<(Array2<f64>, Vec<FlowCache>)> {
    let mut phi = phi0.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for params in layers {
        let (next, cache) = flow_forward_cached(&phi, laplacian, params)?;
        phi = next;
        caches.push(cache);
    }
    Ok((phi, caches))
}

/// One (weight gradient, alpha gradient) pair per layer.
pub type LayerGrads = Vec<(Array2<f64>, f64)>;

/// Backward through a layer stack; returns the input gradient and per-layer
/// (weight, alpha) gradients, ordered like `layers`.
pub fn stack_backward(
    caches: &[FlowCache],
    laplacian: &SparseFieldMatrix,
    layers: &[FlowLayerParams],
    upstream: &Array2<f64>,
) -> Result<(Array2<f64>, LayerGrads)> {
    if caches.len() != layers.len() {
        return Err(Error::InvalidState(
            "layer stack and cache list have different lengths".into(),
        ));
    }
    let mut g = upstream.clone();
    let mut grads = vec![None; layers.len()];
    for (idx, (params, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let fg = flow_backward(cache, laplacian, params, &g)?;
        g = fg.d_phi0;
        grads[idx] = Some((fg.d_weight, fg.d_alpha));
    }
    Ok((g, grads.into_iter().map(|g| g.expect("filled")).collect()))
}

/// A sample-level embedding: for each dimension p, the mean-pooled final
/// cochain state concatenated with the persistence image of `D_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub z: Array1<f64>,
    /// Channel count of the pooled state blocks.
    pub channels: usize,
    /// Per-dimension image lengths, for block bookkeeping.
    pub image_lens: Vec<usize>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Pools the final state and concatenates per-dimension persistence images.
/// Dimensions with no simplices contribute zero pooled blocks, so the
/// embedding length depends only on the channel count and image parameters.
pub fn aggregate(
    state: &CochainState,
    diagrams: &[PersistenceDiagram],
    image_params: &[ImageParams],
) -> Result<Embedding> {
    if diagrams.len() != state.n_dims() || image_params.len() != state.n_dims() {
        return Err(Error::invalid(format!(
            "aggregate needs one diagram and one image parameterization per state \
             dimension ({}), got {} and {}",
            state.n_dims(),
            diagrams.len(),
            image_params.len()
        )));
    }
    let c = state.channels();
    let mut z = Vec::new();
    let mut image_lens = Vec::with_capacity(state.n_dims());
    for p in 0..state.n_dims() {
        if diagrams[p].dim != p {
            return Err(Error::invalid(format!(
                "diagram at position {p} has dimension {}",
                diagrams[p].dim
            )));
        }
        let phi = state.phi(p);
        let n = phi.nrows();
        if n > 0 {
            let scale = 1.0 / n as f64;
            for j in 0..c {
                z.push(phi.column(j).sum() * scale);
            }
        } else {
            z.extend(std::iter::repeat_n(0.0, c));
        }
        let img = vectorize(&diagrams[p], &image_params[p])?;
        image_lens.push(img.len());
        z.extend(img);
    }
    Ok(Embedding {
        z: Array1::from_vec(z),
        channels: c,
        image_lens,
    })
}

/// Routes an embedding gradient back to the final cochain states. The image
/// blocks are functions of the input diagrams only, so their gradient stops
/// there; each pooled coordinate spreads uniformly over the simplex rows.
#[allow(clippy::needless_range_loop)]
pub fn aggregate_state_backward(
    dz: &Array1<f64>,
    state: &CochainState,
    image_lens: &[usize],
) -> Result<Vec<Array2<f64>>> {
    let c = state.channels();
    let expect: usize = state.n_dims() * c + image_lens.iter().sum::<usize>();
    if dz.len() != expect || image_lens.len() != state.n_dims() {
        return Err(Error::invalid(format!(
            "embedding gradient has length {}, expected {expect}",
            dz.len()
        )));
    }
    let mut grads = Vec::with_capacity(state.n_dims());
    let mut off = 0usize;
    for p in 0..state.n_dims() {
        let n = state.phi(p).nrows();
        let mut g = Array2::<f64>::zeros((n, c));
        if n > 0 {
            let scale = 1.0 / n as f64;
            for j in 0..c {
                let v = dz[off + j] * scale;
                for i in 0..n {
                    g[(i, j)] = v;
                }
            }
        }
        grads.push(g);
        off += c + image_lens[p];
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::Simplex;
    use crate::persistence::{compute_persistence_opts, PersistenceOptions};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((r, c));
        for v in m.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * scale;
        }
        m
    }

    fn random_symmetric_sparse(rng: &mut ChaCha8Rng, n: usize) -> SparseFieldMatrix {
        let mut d = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = rng.sample::<f64, _>(StandardNormal);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        SparseFieldMatrix::from_dense(&d, FieldTag::Real)
    }

    /// Hollow triangle: three vertices at value 0, three edges at value 1,
    /// no 2-simplex, so the cycle class never dies.
    fn hollow_triangle() -> FilteredComplex {
        let items = vec![
            (Simplex::new(&[0]).unwrap(), 0.0),
            (Simplex::new(&[1]).unwrap(), 0.0),
            (Simplex::new(&[2]).unwrap(), 0.0),
            (Simplex::new(&[0, 1]).unwrap(), 1.0),
            (Simplex::new(&[0, 2]).unwrap(), 1.0),
            (Simplex::new(&[1, 2]).unwrap(), 1.0),
        ];
        FilteredComplex::from_simplices(items, 1).unwrap()
    }

    fn unit_square_complex() -> FilteredComplex {
        let pts: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let mut d = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let dx = pts[i].0 - pts[j].0;
                let dy = pts[i].1 - pts[j].1;
                d[(i, j)] = (dx * dx + dy * dy).sqrt();
            }
        }
        FilteredComplex::build_rips(&d, 2, None).unwrap()
    }

    #[test]
    fn zero_parameters_are_an_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_symmetric_sparse(&mut rng, 7);
        let phi = randn_matrix(&mut rng, 7, 3, 1.0);
        let params = FlowLayerParams::zeros(3);
        let out = flow_forward(&phi, &l, &params).unwrap();
        assert_eq!(out, phi);
    }

    #[test]
    fn harmonic_cochain_is_an_exact_fixed_point_of_pure_diffusion() {
        let cx = hollow_triangle();
        let l1 = cx.hodge_laplacian(1).unwrap();
        // ker L_1 for the hollow triangle is spanned by (1, -1, 1) on the
        // lexicographic edges (01), (02), (12).
        let harmonic = array![[1.0, 2.0], [-1.0, -2.0], [1.0, 2.0]];
        let params = FlowLayerParams::new(Array2::zeros((2, 2)), 1.0);
        let lphi = l1.mul_dense(&harmonic);
        assert!(lphi.iter().all(|&v| v == 0.0), "harmonic check");
        let (out, cache) = flow_forward_cached(&harmonic, &l1, &params).unwrap();
        assert_eq!(out, harmonic);
        // Nothing is active, so gradients pass through untouched and the
        // diffusion coefficient receives exactly zero gradient.
        let upstream = array![[0.3, -0.7], [1.1, 0.2], [-0.5, 0.9]];
        let g = flow_backward(&cache, &l1, &params, &upstream).unwrap();
        assert_eq!(g.d_phi0, upstream);
        assert_eq!(g.d_alpha, 0.0);
        assert!(g.d_weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let n = rng.random_range(3..9);
            let l = random_symmetric_sparse(&mut rng, n);
            let phi = randn_matrix(&mut rng, n, 3, 1.0);
            let mut params = FlowLayerParams::new(randn_matrix(&mut rng, 3, 3, 0.3), 0.4);
            params.steps_t = 5;
            // Random permutation of the simplex indexing.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let ld = l.to_dense();
            let mut lp = Array2::<f64>::zeros((n, n));
            let mut phip = Array2::<f64>::zeros((n, 3));
            for i in 0..n {
                for j in 0..n {
                    lp[(perm[i], perm[j])] = ld[(i, j)];
                }
                for k in 0..3 {
                    phip[(perm[i], k)] = phi[(i, k)];
                }
            }
            let lp = SparseFieldMatrix::from_dense(&lp, FieldTag::Real);
            let out = flow_forward(&phi, &l, &params).unwrap();
            let outp = flow_forward(&phip, &lp, &params).unwrap();
            for i in 0..n {
                for k in 0..3 {
                    let (a, b) = (out[(i, k)], outp[(perm[i], k)]);
                    assert!(
                        (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                        "row {i} channel {k}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn euler_error_halves_with_the_step() {
        // In a regime where every unit stays active the dynamics are linear
        // and smooth, so the first-order global error scales like h and
        // successive halvings should shrink the solution difference by ~2.
        let cx = hollow_triangle();
        let l1 = cx.hodge_laplacian(1).unwrap();
        let phi0 = array![[1.0, 0.8], [1.2, 1.0], [0.9, 1.1]];
        let w = array![[0.5, 0.2], [0.2, 0.5]];
        let tau = 0.8;
        let run = |h: f64| {
            let params = FlowLayerParams {
                weight: w.clone(),
                alpha: 0.05,
                step_h: h,
                steps_t: (tau / h).round() as usize,
            };
            let (out, cache) = flow_forward_cached(&phi0, &l1, &params).unwrap();
            assert!(
                cache.min_abs_preactivation() > 0.0,
                "expected a fully active trajectory"
            );
            out
        };
        let a = run(0.1);
        let b = run(0.05);
        let c = run(0.025);
        let d1 = (&a - &b).mapv(f64::abs).sum();
        let d2 = (&b - &c).mapv(f64::abs).sum();
        let ratio = d1 / d2;
        assert!(
            (1.8..=2.2).contains(&ratio),
            "convergence ratio {ratio} not ~2"
        );
    }

    #[test]
    fn init_state_carries_value_and_pair_persistence() {
        let cx = unit_square_complex();
        let opts = PersistenceOptions {
            keep_zero_length: false,
            with_transcript: true,
        };
        let res = compute_persistence_opts(&cx, 2, opts).unwrap();
        let transcript = res.transcript.as_ref().unwrap();
        let state = init_state(&cx, transcript, 3).unwrap();
        assert_eq!(state.n_dims(), AGG_DIMS);
        // Channel 0 is the filtration value of each simplex.
        for p in 0..AGG_DIMS {
            for j in 0..state.phi(p).nrows() {
                let g = cx.global_index(p, j);
                assert_eq!(state.phi(p)[(j, 0)], cx.value(g));
                assert_eq!(state.phi(p)[(j, 2)], 0.0);
            }
        }
        // The edge creating the square's cycle carries its persistence
        // (sqrt(2) - 1) in channel 1; so does the destroying triangle.
        let cycle = res.diagrams[1].pairs[0];
        assert!((cycle.0 - 1.0).abs() < 1e-12);
        assert!((cycle.1 - 2f64.sqrt()).abs() < 1e-12);
        let rec = transcript
            .records(1)
            .iter()
            .find(|r| r.destroyer.is_some() && (r.birth - 1.0).abs() < 1e-12 && r.death > r.birth)
            .expect("square cycle pair");
        let creator_local = cx.local_rank(rec.creator);
        let expected = 2f64.sqrt() - 1.0;
        assert!((state.phi(1)[(creator_local, 1)] - expected).abs() < 1e-12);
        let destroyer_local = cx.local_rank(rec.destroyer.unwrap());
        assert!((state.phi(2)[(destroyer_local, 1)] - expected).abs() < 1e-12);
        // Vertices participate only in zero-persistence or essential pairs
        // here, so channel 1 stays 0 for the essential vertex.
        assert!(state.phi(0).column(1).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn init_state_rejects_mismatched_transcript_and_small_channel_count() {
        let cx = unit_square_complex();
        let opts = PersistenceOptions {
            keep_zero_length: false,
            with_transcript: true,
        };
        let res = compute_persistence_opts(&cx, 2, opts).unwrap();
        let transcript = res.transcript.as_ref().unwrap();
        assert!(init_state(&cx, transcript, 1).is_err());
        let small = hollow_triangle();
        match init_state(&small, transcript, 2) {
            Err(Error::InvalidState(_)) => {}
            other => panic!("expected InvalidState, got {other:?}"),
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_symmetric_sparse(&mut rng, 4);
        let phi = randn_matrix(&mut rng, 4, 2, 1.0);
        let mut params = FlowLayerParams::zeros(3); // wrong channel count
        assert!(flow_forward(&phi, &l, &params).is_err());
        params = FlowLayerParams::zeros(2);
        params.step_h = 0.0;
        assert!(flow_forward(&phi, &l, &params).is_err());
        params.step_h = 0.1;
        params.alpha = f64::NAN;
        assert!(flow_forward(&phi, &l, &params).is_err());
        let l5 = random_symmetric_sparse(&mut rng, 5);
        assert!(flow_forward(&phi, &l5, &FlowLayerParams::zeros(2)).is_err());
    }

    /// Scalar probe J = <R, phi_T> used by all finite-difference checks.
    fn probe(
        phi0: &Array2<f64>,
        l: &SparseFieldMatrix,
        layers: &[FlowLayerParams],
        r: &Array2<f64>,
    ) -> f64 {
        let mut phi = phi0.clone();
        for params in layers {
            phi = flow_forward(&phi, l, params).unwrap();
        }
        (&phi * r).sum()
    }

    fn relative_gap(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / fd.abs().max(1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fd_h = 1e-5;
        let tol = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut done = 0;
        let mut attempts = 0;
        while done < 20 {
            attempts += 1;
            assert!(attempts < 200, "too many kink-adjacent draws");
            let n = rng.random_range(3..8);
            let c = rng.random_range(2..4);
            let l = random_symmetric_sparse(&mut rng, n);
            let phi0 = randn_matrix(&mut rng, n, c, 1.0);
            let mut params = FlowLayerParams::new(randn_matrix(&mut rng, c, c, 0.4), 0.3);
            params.steps_t = 4;
            let r = randn_matrix(&mut rng, n, c, 1.0);

            let (_, cache) = flow_forward_cached(&phi0, &l, &params).unwrap();
            // Skip draws whose pre-activations graze the relu kink: the
            // analytic subgradient and the finite difference legitimately
            // disagree there.
            if cache.min_abs_preactivation() < 1e-4 {
                continue;
            }
            let grad = flow_backward(&cache, &l, &params, &r).unwrap();
            let layers = std::slice::from_ref(&params);

            for (gi, gj) in [(0, 0), (c - 1, c - 1), (0, c - 1)] {
                let mut up = params.clone();
                up.weight[(gi, gj)] += fd_h;
                let mut dn = params.clone();
                dn.weight[(gi, gj)] -= fd_h;
                let fd = (probe(&phi0, &l, &[up], &r) - probe(&phi0, &l, &[dn], &r)) / (2.0 * fd_h);
                assert!(
                    relative_gap(grad.d_weight[(gi, gj)], fd) <= tol,
                    "dW[{gi},{gj}] analytic {} vs fd {fd}",
                    grad.d_weight[(gi, gj)]
                );
            }
            {
                let mut up = params.clone();
                up.alpha += fd_h;
                let mut dn = params.clone();
                dn.alpha -= fd_h;
                let fd = (probe(&phi0, &l, &[up], &r) - probe(&phi0, &l, &[dn], &r)) / (2.0 * fd_h);
                assert!(
                    relative_gap(grad.d_alpha, fd) <= tol,
                    "dalpha analytic {} vs fd {fd}",
                    grad.d_alpha
                );
            }
            for (i, j) in [(0, 0), (n - 1, c - 1)] {
                let mut up = phi0.clone();
                up[(i, j)] += fd_h;
                let mut dn = phi0.clone();
                dn[(i, j)] -= fd_h;
                let fd = (probe(&up, &l, layers, &r) - probe(&dn, &l, layers, &r)) / (2.0 * fd_h);
                assert!(
                    relative_gap(grad.d_phi0[(i, j)], fd) <= tol,
                    "dphi0[{i},{j}] analytic {} vs fd {fd}",
                    grad.d_phi0[(i, j)]
                );
            }
            done += 1;
        }
    }

    #[test]
    fn stacked_layers_backpropagate_like_their_composition() {
        let fd_h = 1e-5;
        let tol = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut done = 0;
        let mut attempts = 0;
        while done < 10 {
            attempts += 1;
            assert!(attempts < 100, "too many kink-adjacent draws");
            let n = rng.random_range(3..7);
            let c = 3;
            let l = random_symmetric_sparse(&mut rng, n);
            let phi0 = randn_matrix(&mut rng, n, c, 1.0);
            let mk = |rng: &mut ChaCha8Rng| {
                let mut p = FlowLayerParams::new(randn_matrix(rng, c, c, 0.3), 0.2);
                p.steps_t = 3;
                p
            };
            let layers = vec![mk(&mut rng), mk(&mut rng)];
            let r = randn_matrix(&mut rng, n, c, 1.0);

            let (_, caches) = stack_forward(&phi0, &l, &layers).unwrap();
            if caches
                .iter()
                .any(|cache| cache.min_abs_preactivation() < 1e-4)
            {
                continue;
            }
            let (d_phi0, per_layer) = stack_backward(&caches, &l, &layers, &r).unwrap();

            // Input gradient against finite differences through both layers.
            let mut up = phi0.clone();
            up[(0, 0)] += fd_h;
            let mut dn = phi0.clone();
            dn[(0, 0)] -= fd_h;
            let fd = (probe(&up, &l, &layers, &r) - probe(&dn, &l, &layers, &r)) / (2.0 * fd_h);
            assert!(relative_gap(d_phi0[(0, 0)], fd) <= tol);

            // First-layer weight gradient: perturb only that layer.
            let mut lu = layers.clone();
            lu[0].weight[(1, 2)] += fd_h;
            let mut ld = layers.clone();
            ld[0].weight[(1, 2)] -= fd_h;
            let fd = (probe(&phi0, &l, &lu, &r) - probe(&phi0, &l, &ld, &r)) / (2.0 * fd_h);
            assert!(relative_gap(per_layer[0].0[(1, 2)], fd) <= tol);

            // Second-layer alpha gradient.
            let mut lu = layers.clone();
            lu[1].alpha += fd_h;
            let mut ld = layers.clone();
            ld[1].alpha -= fd_h;
            let fd = (probe(&phi0, &l, &lu, &r) - probe(&phi0, &l, &ld, &r)) / (2.0 * fd_h);
            assert!(relative_gap(per_layer[1].1, fd) <= tol);
            done += 1;
        }
    }

    #[test]
    fn aggregate_concatenates_pooled_state_and_images() {
        let cx = unit_square_complex();
        let opts = PersistenceOptions {
            keep_zero_length: false,
            with_transcript: true,
        };
        let res = compute_persistence_opts(&cx, 2, opts).unwrap();
        let state = init_state(&cx, res.transcript.as_ref().unwrap(), 2).unwrap();
        let truncated: Vec<PersistenceDiagram> = res
            .diagrams
            .iter()
            .map(|d| d.truncated().unwrap())
            .collect();
        let refs: Vec<&PersistenceDiagram> = truncated.iter().collect();
        let params = ImageParams::fit(&refs, 4, 4).unwrap();
        let per_dim = vec![params.clone(), params.clone(), params.clone()];
        let emb = aggregate(&state, &truncated, &per_dim).unwrap();
        assert_eq!(emb.len(), 3 * (2 + 16));
        // First pooled block is the mean over vertices: values 0, pairs 0.
        assert_eq!(emb.z[0], 0.0);
        // Edge block: mean filtration value of the 6 edges (4 sides + 2
        // diagonals).
        let mean_edge = (4.0 + 2.0 * 2f64.sqrt()) / 6.0;
        assert!((emb.z[2 + 16] - mean_edge).abs() < 1e-12);
    }

    #[test]
    fn aggregate_pads_empty_dimensions_with_zero_blocks() {
        let cx = hollow_triangle();
        let opts = PersistenceOptions {
            keep_zero_length: false,
            with_transcript: true,
        };
        let res = compute_persistence_opts(&cx, 1, opts).unwrap();
        let state = init_state(&cx, res.transcript.as_ref().unwrap(), 2).unwrap();
        assert_eq!(state.phi(2).nrows(), 0);
        let mut truncated: Vec<PersistenceDiagram> = res
            .diagrams
            .iter()
            .map(|d| d.truncated().unwrap())
            .collect();
        truncated.push(PersistenceDiagram::empty(2));
        let params = ImageParams::fit(
            &truncated.iter().collect::<Vec<_>>(),
            3,
            3,
        )
        .unwrap();
        let per_dim = vec![params.clone(), params.clone(), params.clone()];
        let emb = aggregate(&state, &truncated, &per_dim).unwrap();
        assert_eq!(emb.len(), 3 * (2 + 9));
        // The p = 2 block is entirely zero.
        for k in 2 * (2 + 9)..3 * (2 + 9) {
            assert_eq!(emb.z[k], 0.0);
        }
    }

    #[test]
    fn aggregate_backward_routes_mean_pooling_exactly() {
        let cx = unit_square_complex();
        let opts = PersistenceOptions {
            keep_zero_length: false,
            with_transcript: true,
        };
        let res = compute_persistence_opts(&cx, 2, opts).unwrap();
        let state = init_state(&cx, res.transcript.as_ref().unwrap(), 2).unwrap();
        let truncated: Vec<PersistenceDiagram> = res
            .diagrams
            .iter()
            .map(|d| d.truncated().unwrap())
            .collect();
        let params = ImageParams::fit(&truncated.iter().collect::<Vec<_>>(), 3, 3).unwrap();
        let per_dim = vec![params.clone(), params.clone(), params.clone()];
        let emb = aggregate(&state, &truncated, &per_dim).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dz = Array1::from_vec(
            (0..emb.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let grads = aggregate_state_backward(&dz, &state, &emb.image_lens).unwrap();
        // The map from state to pooled blocks is linear, so the analytic
        // gradient must match a finite difference to rounding error.
        let p = 1usize;
        let (i, j) = (2usize, 1usize);
        let h = 1e-6;
        let mut sp = state.clone();
        sp.phi_mut(p)[(i, j)] += h;
        let up = aggregate(&sp, &truncated, &per_dim).unwrap();
        let mut sm = state.clone();
        sm.phi_mut(p)[(i, j)] -= h;
        let dn = aggregate(&sm, &truncated, &per_dim).unwrap();
        let fd = ((&up.z - &dn.z).dot(&dz)) / (2.0 * h);
        assert!((grads[p][(i, j)] - fd).abs() <= 1e-9 * fd.abs().max(1.0));
    }
}
