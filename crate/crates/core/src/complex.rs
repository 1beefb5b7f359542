//! Filtered simplicial complexes and their boundary operators.
//!
//! A complex stores simplices in filtration order: ascending value, then
//! ascending dimension, then lexicographic vertex order. That order is a
//! linear extension of the face relation, which the persistence reduction
//! relies on. Orientation is fixed by increasing vertex order; the i-th facet
//! of a simplex carries sign (-1)^i.

use crate::error::{Error, Result};
use crate::sparse::{FieldTag, SparseFieldMatrix};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Hard cap on simplex dimension; clique expansion above this is never built.
pub const MAX_DIM: usize = 3;
/// Hard cap on the number of vertices accepted by the builders.
pub const MAX_VERTICES: usize = 2048;

/// Tolerance for symmetry validation of dissimilarity inputs.
/// Tolerance for symmetry validation of dissimilarity / connectivity input.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// A simplex with at most MAX_DIM + 1 vertices, stored inline and strictly
/// increasing. Unused slots hold u32::MAX so equal-dimension comparison is
/// lexicographic on vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Simplex {
    verts: [u32; MAX_DIM + 1],
    len: u8,
}

impl Simplex {
    pub fn new(vertices: &[usize]) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::invalid("simplex needs at least one vertex"));
        }
        if vertices.len() > MAX_DIM + 1 {
            return Err(Error::InvalidDimension {
                p: vertices.len() - 1,
                reason: format!("maximum supported dimension is {MAX_DIM}"),
            });
        }
        let mut verts = [u32::MAX; MAX_DIM + 1];
        for (i, &v) in vertices.iter().enumerate() {
            if v >= u32::MAX as usize {
                return Err(Error::invalid(format!("vertex id {v} too large")));
            }
            if i > 0 && vertices[i - 1] >= v {
                return Err(Error::invalid(format!(
                    "vertices must be strictly increasing, got {vertices:?}"
                )));
            }
            verts[i] = v as u32;
        }
        Ok(Simplex {
            verts,
            len: vertices.len() as u8,
        })
    }

    /// Vertex count minus one.
    pub fn dim(&self) -> usize {
        self.len as usize - 1
    }

    pub fn vertices(&self) -> &[u32] {
        &self.verts[..self.len as usize]
    }

    pub fn vertex_vec(&self) -> Vec<usize> {
        self.vertices().iter().map(|&v| v as usize).collect()
    }

    /// The facet obtained by deleting the i-th vertex (sign (-1)^i).
    pub fn facet(&self, i: usize) -> Simplex {
        debug_assert!(self.len > 1 && i < self.len as usize);
        let mut verts = [u32::MAX; MAX_DIM + 1];
        let mut k = 0;
        for (j, &v) in self.vertices().iter().enumerate() {
            if j != i {
                verts[k] = v;
                k += 1;
            }
        }
        Simplex {
            verts,
            len: self.len - 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilteredComplex {
    n_vertices: usize,
    max_dim: usize,
    /// All simplices in filtration order.
    simplices: Vec<Simplex>,
    values: Vec<f64>,
    /// Global indices grouped by dimension, each group in filtration order.
    by_dim: Vec<Vec<usize>>,
    /// Rank of each simplex within its dimension group.
    local_rank: Vec<usize>,
    index_of: HashMap<Simplex, usize>,
}

#[derive(Serialize, Deserialize)]
struct SimplexJson {
    v: Vec<usize>,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct ComplexJson {
    max_dim: usize,
    simplices: Vec<SimplexJson>,
}

impl FilteredComplex {
    /// Vietoris-Rips filtration of a dissimilarity matrix: a simplex enters at
    /// the maximum pairwise dissimilarity of its vertices. `max_scale` bounds
    /// the edges included; `None` keeps every edge.
    pub fn build_rips(
        dissimilarity: &Array2<f64>,
        max_dim: usize,
        max_scale: Option<f64>,
    ) -> Result<FilteredComplex> {
        let w = validate_dissimilarity(dissimilarity)?;
        if let Some(s) = max_scale {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::invalid(format!(
                    "max_scale must be finite and non-negative, got {s}"
                )));
            }
        }
        build_clique_complex(w, max_dim, max_scale)
    }

    /// Clique complex of the graph keeping edges with weight <= threshold,
    /// filtered by maximum edge weight. Same validation as `build_rips`.
    pub fn build_from_weights(
        weights: &Array2<f64>,
        max_dim: usize,
        threshold: f64,
    ) -> Result<FilteredComplex> {
        let w = validate_dissimilarity(weights)?;
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(Error::invalid(format!(
                "threshold must be finite and non-negative, got {threshold}"
            )));
        }
        build_clique_complex(w, max_dim, Some(threshold))
    }

    /// Builds from an explicit simplex list; sorts into filtration order and
    /// validates closure under faces and value monotonicity.
    pub fn from_simplices(items: Vec<(Simplex, f64)>, max_dim: usize) -> Result<FilteredComplex> {
        if max_dim > MAX_DIM {
            return Err(Error::InvalidDimension {
                p: max_dim,
                reason: format!("maximum supported dimension is {MAX_DIM}"),
            });
        }
        let mut items = items;
        for (s, v) in &items {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid(format!(
                    "simplex {:?} has invalid filtration value {v}",
                    s.vertex_vec()
                )));
            }
            if s.dim() > max_dim {
                return Err(Error::InvalidDimension {
                    p: s.dim(),
                    reason: format!("simplex exceeds declared max_dim {max_dim}"),
                });
            }
        }
        items.sort_unstable_by(|(sa, va), (sb, vb)| {
            va.total_cmp(vb)
                .then(sa.len.cmp(&sb.len))
                .then(sa.cmp(sb))
        });
        let mut index_of = HashMap::with_capacity(items.len());
        for (i, (s, _)) in items.iter().enumerate() {
            if index_of.insert(*s, i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate simplex {:?}",
                    s.vertex_vec()
                )));
            }
        }
        // Closure and monotonicity: every facet must exist at a value <= ours.
        for (s, v) in &items {
            if s.dim() == 0 {
                continue;
            }
            for i in 0..=s.dim() {
                let f = s.facet(i);
                match index_of.get(&f) {
                    None => {
                        return Err(Error::invalid(format!(
                            "complex not closed: facet {:?} of {:?} missing",
                            f.vertex_vec(),
                            s.vertex_vec()
                        )))
                    }
                    Some(&g) => {
                        if items[g].1 > *v {
                            return Err(Error::invalid(format!(
                                "filtration not monotone: facet {:?} enters at {} after {:?} at {v}",
                                f.vertex_vec(),
                                items[g].1,
                                s.vertex_vec()
                            )));
                        }
                    }
                }
            }
        }
        let n_vertices = items
            .iter()
            .flat_map(|(s, _)| s.vertices())
            .map(|&v| v as usize + 1)
            .max()
            .unwrap_or(0);
        let mut simplices = Vec::with_capacity(items.len());
        let mut values = Vec::with_capacity(items.len());
        for (s, v) in items {
            simplices.push(s);
            values.push(v);
        }
        Ok(Self::assemble(simplices, values, index_of, n_vertices, max_dim))
    }

    fn assemble(
        simplices: Vec<Simplex>,
        values: Vec<f64>,
        index_of: HashMap<Simplex, usize>,
        n_vertices: usize,
        max_dim: usize,
    ) -> FilteredComplex {
        let mut by_dim = vec![Vec::new(); max_dim + 1];
        let mut local_rank = vec![0usize; simplices.len()];
        for (g, s) in simplices.iter().enumerate() {
            let d = s.dim();
            local_rank[g] = by_dim[d].len();
            by_dim[d].push(g);
        }
        FilteredComplex {
            n_vertices,
            max_dim,
            simplices,
            values,
            by_dim,
            local_rank,
            index_of,
        }
    }

    pub fn len(&self) -> usize {
        self.simplices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simplices.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }

    /// Number of p-simplices.
    pub fn count(&self, p: usize) -> usize {
        if p <= self.max_dim {
            self.by_dim[p].len()
        } else {
            0
        }
    }

    pub fn simplex(&self, g: usize) -> &Simplex {
        &self.simplices[g]
    }

    pub fn value(&self, g: usize) -> f64 {
        self.values[g]
    }

    pub fn dim_of(&self, g: usize) -> usize {
        self.simplices[g].dim()
    }

    /// Global index of the j-th p-simplex in filtration order.
    pub fn global_index(&self, p: usize, j: usize) -> usize {
        self.by_dim[p][j]
    }

    /// Global indices of all p-simplices in filtration order.
    pub fn dim_indices(&self, p: usize) -> &[usize] {
        &self.by_dim[p]
    }

    /// Rank of simplex `g` within its dimension group.
    pub fn local_rank(&self, g: usize) -> usize {
        self.local_rank[g]
    }

    pub fn index_of(&self, s: &Simplex) -> Option<usize> {
        self.index_of.get(s).copied()
    }

    /// Largest filtration value present, 0 for an empty complex.
    pub fn filtration_max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Pushes the global indices of the facets of `g`, sorted ascending.
    pub fn facet_indices(&self, g: usize, out: &mut Vec<usize>) {
        out.clear();
        let s = &self.simplices[g];
        if s.dim() == 0 {
            return;
        }
        for i in 0..=s.dim() {
            out.push(self.index_of[&s.facet(i)]);
        }
        out.sort_unstable();
    }

    /// Matrix of the boundary operator on p-chains, shape (count(p-1), count(p)).
    /// Column order is filtration order within each dimension. Over the reals
    /// the i-th facet carries (-1)^i; over Z2 all coefficients are 1.
    pub fn boundary_matrix(&self, p: usize, field: FieldTag) -> Result<SparseFieldMatrix> {
        if p == 0 || p > self.max_dim {
            return Err(Error::InvalidDimension {
                p,
                reason: format!("boundary defined for 1..={}", self.max_dim),
            });
        }
        Ok(self.boundary_matrix_unchecked(p, field))
    }

    fn boundary_matrix_unchecked(&self, p: usize, field: FieldTag) -> SparseFieldMatrix {
        let rows = self.count(p - 1);
        let cols = self.count(p);
        let mut columns = Vec::with_capacity(cols);
        for &g in &self.by_dim[p] {
            let s = &self.simplices[g];
            let mut col: Vec<(usize, f64)> = (0..=s.dim())
                .map(|i| {
                    let r = self.local_rank[self.index_of[&s.facet(i)]];
                    let coeff = match field {
                        FieldTag::Z2 => 1.0,
                        FieldTag::Real => {
                            if i % 2 == 0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
                    (r, coeff)
                })
                .collect();
            col.sort_unstable_by_key(|&(r, _)| r);
            columns.push(col);
        }
        SparseFieldMatrix::from_columns(rows, cols, field, columns)
            .expect("boundary columns satisfy the storage invariant")
    }

    /// Matrix of the coboundary operator on p-cochains, shape
    /// (count(p+1), count(p)): the transpose of boundary_matrix(p+1) with the
    /// same signs.
    pub fn coboundary_matrix(&self, p: usize, field: FieldTag) -> Result<SparseFieldMatrix> {
        if p >= self.max_dim {
            return Err(Error::InvalidDimension {
                p,
                reason: format!("coboundary defined for 0..{}", self.max_dim),
            });
        }
        Ok(self.boundary_matrix_unchecked(p + 1, field).transpose())
    }

    fn coboundary_or_empty(&self, p: usize) -> SparseFieldMatrix {
        if p < self.max_dim {
            self.boundary_matrix_unchecked(p + 1, FieldTag::Real).transpose()
        } else {
            SparseFieldMatrix::zeros(0, self.count(p), FieldTag::Real)
        }
    }

    /// Hodge Laplacian on p-cochains:
    /// L_p = d_{p-1} d_{p-1}^T + d_p^T d_p with d the coboundary operators;
    /// the first term is dropped at p = 0 and the second at p = max_dim.
    pub fn hodge_laplacian(&self, p: usize) -> Result<SparseFieldMatrix> {
        if p > self.max_dim {
            return Err(Error::InvalidDimension {
                p,
                reason: format!("laplacian defined for 0..={}", self.max_dim),
            });
        }
        let n = self.count(p);
        let up = {
            let d_p = self.coboundary_or_empty(p);
            d_p.transpose().matmul(&d_p)
        };
        if p == 0 {
            return Ok(up);
        }
        let d_prev = self.coboundary_or_empty(p - 1);
        let down = d_prev.matmul(&d_prev.transpose());
        debug_assert_eq!(down.rows(), n);
        Ok(down.add(&up))
    }

    /// Rank of the p-th cohomology over Z2:
    /// dim ker d_p - rank d_{p-1} = count(p) - rank d_p - rank d_{p-1}.
    pub fn cohomology_rank(&self, p: usize) -> Result<usize> {
        if p > self.max_dim {
            return Err(Error::InvalidDimension {
                p,
                reason: format!("cohomology defined for 0..={}", self.max_dim),
            });
        }
        let n = self.count(p);
        let rank_up = if p < self.max_dim {
            self.boundary_matrix_unchecked(p + 1, FieldTag::Z2).rank_z2()
        } else {
            0
        };
        let rank_down = if p > 0 {
            self.boundary_matrix_unchecked(p, FieldTag::Z2).rank_z2()
        } else {
            0
        };
        Ok(n - rank_up - rank_down)
    }

    pub fn to_json(&self) -> String {
        let doc = ComplexJson {
            max_dim: self.max_dim,
            simplices: self
                .simplices
                .iter()
                .zip(&self.values)
                .map(|(s, &v)| SimplexJson {
                    v: s.vertex_vec(),
                    value: v,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("complex serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<FilteredComplex> {
        let doc: ComplexJson = serde_json::from_str(text)?;
        let mut items = Vec::with_capacity(doc.simplices.len());
        for s in doc.simplices {
            items.push((Simplex::new(&s.v)?, s.value));
        }
        FilteredComplex::from_simplices(items, doc.max_dim)
    }
}

fn validate_dissimilarity(w: &Array2<f64>) -> Result<&Array2<f64>> {
    let (n, m) = w.dim();
    if n != m {
        return Err(Error::invalid(format!("matrix must be square, got {n}x{m}")));
    }
    if n == 0 {
        return Err(Error::invalid("matrix must have at least one point"));
    }
    if n > MAX_VERTICES {
        return Err(Error::invalid(format!(
            "matrix has {n} points, maximum supported is {MAX_VERTICES}"
        )));
    }
    for i in 0..n {
        if w[[i, i]] != 0.0 {
            return Err(Error::invalid(format!(
                "diagonal entry ({i},{i}) must be zero, got {}",
                w[[i, i]]
            )));
        }
        for j in (i + 1)..n {
            let (a, b) = (w[[i, j]], w[[j, i]]);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid(format!(
                    "entry ({i},{j}) must be finite"
                )));
            }
            if a < 0.0 {
                return Err(Error::invalid(format!(
                    "entry ({i},{j}) must be non-negative, got {a}"
                )));
            }
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::invalid(format!(
                    "matrix not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(w)
}

/// Incremental clique expansion over the thresholded edge set. Simplices are
/// discovered by prepending lower neighbors, so each appears exactly once.
#[allow(clippy::needless_range_loop)]
fn build_clique_complex(
    w: &Array2<f64>,
    max_dim: usize,
    max_scale: Option<f64>,
) -> Result<FilteredComplex> {
    if max_dim > MAX_DIM {
        return Err(Error::InvalidDimension {
            p: max_dim,
            reason: format!("maximum supported dimension is {MAX_DIM}"),
        });
    }
    let n = w.nrows();
    // Upper-triangle weights are authoritative under the symmetry tolerance.
    let weight = |a: usize, b: usize| -> f64 {
        if a < b {
            w[[a, b]]
        } else {
            w[[b, a]]
        }
    };
    let keep = |v: f64| -> bool { max_scale.is_none_or(|s| v <= s) };

    // lower[v] = sorted list of u < v adjacent to v.
    let mut lower: Vec<Vec<u32>> = vec![Vec::new(); n];
    for v in 1..n {
        for u in 0..v {
            if keep(weight(u, v)) {
                lower[v].push(u as u32);
            }
        }
    }

    let mut simplices: Vec<Simplex> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for v in 0..n {
        simplices.push(Simplex::new(&[v]).expect("single vertex is valid"));
        values.push(0.0);
    }
    if max_dim >= 1 {
        // Depth-first expansion: state holds the current simplex (vertices
        // descending as added, stored ascending), its value, and the sorted
        // candidate set of common lower neighbors.
        let mut stack: Vec<(Simplex, f64, Vec<u32>)> = Vec::new();
        for v in (0..n).rev() {
            let s = Simplex::new(&[v]).expect("single vertex is valid");
            stack.push((s, 0.0, lower[v].clone()));
            while let Some((s, val, cands)) = stack.pop() {
                if s.dim() >= max_dim {
                    continue;
                }
                for (ci, &u) in cands.iter().enumerate() {
                    let mut verts = [u32::MAX; MAX_DIM + 1];
                    verts[0] = u;
                    verts[1..=s.dim() + 1].copy_from_slice(s.vertices());
                    let bigger = Simplex {
                        verts,
                        len: s.len + 1,
                    };
                    let mut v2 = val;
                    for &x in s.vertices() {
                        v2 = v2.max(weight(u as usize, x as usize));
                    }
                    simplices.push(bigger);
                    values.push(v2);
                    if bigger.dim() < max_dim {
                        // Candidates for the extension: common lower
                        // neighbors, i.e. cands (before u) intersected with
                        // lower[u].
                        let rest = intersect_sorted(&cands[..ci], &lower[u as usize]);
                        stack.push((bigger, v2, rest));
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..simplices.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(simplices[a].len.cmp(&simplices[b].len))
            .then(simplices[a].cmp(&simplices[b]))
    });
    let sorted_simplices: Vec<Simplex> = order.iter().map(|&i| simplices[i]).collect();
    let sorted_values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut index_of = HashMap::with_capacity(sorted_simplices.len());
    for (g, s) in sorted_simplices.iter().enumerate() {
        index_of.insert(*s, g);
    }
    Ok(FilteredComplex::assemble(
        sorted_simplices,
        sorted_values,
        index_of,
        n,
        max_dim,
    ))
}

fn intersect_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut ia, mut ib) = (0, 0);
    while ia < a.len() && ib < b.len() {
        if a[ia] < b[ib] {
            ia += 1;
        } else if b[ib] < a[ia] {
            ib += 1;
        } else {
            out.push(a[ia]);
            ia += 1;
            ib += 1;
        }
    }
    out
}
