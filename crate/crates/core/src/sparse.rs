//! Column-major sparse matrices over Z2 or the reals.
//!
//! Boundary and coboundary operators are stored in this format: columns hold
//! strictly increasing row indices with nonzero coefficients. Over Z2 the
//! coefficient is always 1.0 and arithmetic is symmetric difference; over the
//! reals the signed coefficients carry the orientation convention.

use crate::error::{Error, Result};
use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldTag {
    Z2,
    Real,
}

#[derive(Debug, Clone)]
pub struct SparseFieldMatrix {
    rows: usize,
    cols: usize,
    field: FieldTag,
    /// columns[j] lists (row, coefficient) with strictly increasing rows.
    columns: Vec<Vec<(usize, f64)>>,
}

impl SparseFieldMatrix {
    pub fn zeros(rows: usize, cols: usize, field: FieldTag) -> Self {
        SparseFieldMatrix {
            rows,
            cols,
            field,
            columns: vec![Vec::new(); cols],
        }
    }

    /// Builds from explicit columns, validating the storage invariant.
    pub fn from_columns(
        rows: usize,
        cols: usize,
        field: FieldTag,
        columns: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if columns.len() != cols {
            return Err(Error::invalid(format!(
                "expected {} columns, got {}",
                cols,
                columns.len()
            )));
        }
        for (j, col) in columns.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &(r, v) in col {
                if r >= rows {
                    return Err(Error::invalid(format!(
                        "column {j} has row index {r} out of bounds ({rows} rows)"
                    )));
                }
                if let Some(p) = prev {
                    if r <= p {
                        return Err(Error::invalid(format!(
                            "column {j} rows not strictly increasing at row {r}"
                        )));
                    }
                }
                if v == 0.0 || !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "column {j} row {r} has invalid coefficient {v}"
                    )));
                }
                if field == FieldTag::Z2 && v != 1.0 {
                    return Err(Error::invalid(format!(
                        "column {j} row {r}: Z2 coefficients must be 1.0, got {v}"
                    )));
                }
                prev = Some(r);
            }
        }
        Ok(SparseFieldMatrix {
            rows,
            cols,
            field,
            columns,
        })
    }

    pub fn from_dense(dense: &Array2<f64>, field: FieldTag) -> Self {
        let (rows, cols) = dense.dim();
        let mut columns = vec![Vec::new(); cols];
        for j in 0..cols {
            for i in 0..rows {
                let v = dense[[i, j]];
                if v != 0.0 {
                    let coeff = if field == FieldTag::Z2 { 1.0 } else { v };
                    columns[j].push((i, coeff));
                }
            }
        }
        SparseFieldMatrix {
            rows,
            cols,
            field,
            columns,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn field(&self) -> FieldTag {
        self.field
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|c| c.len()).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> SparseFieldMatrix {
        let mut columns = vec![Vec::new(); self.rows];
        // Walking columns in order yields sorted rows in the transpose.
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                columns[i].push((j, v));
            }
        }
        SparseFieldMatrix {
            rows: self.cols,
            cols: self.rows,
            field: self.field,
            columns,
        }
    }

    /// Real sparse product self * other. Exact zeros produced by cancellation
    /// are dropped so integer-valued operator products stay sparse.
    pub fn matmul(&self, other: &SparseFieldMatrix) -> SparseFieldMatrix {
        assert_eq!(self.field, FieldTag::Real, "matmul is a real-field operation");
        assert_eq!(other.field, FieldTag::Real, "matmul is a real-field operation");
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut columns = Vec::with_capacity(other.cols);
        let mut scratch = vec![0.0f64; self.rows];
        let mut touched: Vec<usize> = Vec::new();
        for j in 0..other.cols {
            for &(k, v) in &other.columns[j] {
                for &(i, a) in &self.columns[k] {
                    if scratch[i] == 0.0 {
                        touched.push(i);
                    }
                    scratch[i] += a * v;
                }
            }
            touched.sort_unstable();
            let mut col = Vec::with_capacity(touched.len());
            for &i in &touched {
                if scratch[i] != 0.0 {
                    col.push((i, scratch[i]));
                }
                scratch[i] = 0.0;
            }
            touched.clear();
            columns.push(col);
        }
        SparseFieldMatrix {
            rows: self.rows,
            cols: other.cols,
            field: FieldTag::Real,
            columns,
        }
    }

    /// Real sparse sum self + other.
    pub fn add(&self, other: &SparseFieldMatrix) -> SparseFieldMatrix {
        assert_eq!(self.field, FieldTag::Real, "add is a real-field operation");
        assert_eq!(other.field, FieldTag::Real, "add is a real-field operation");
        assert_eq!(self.rows, other.rows, "add shape mismatch");
        assert_eq!(self.cols, other.cols, "add shape mismatch");
        let mut columns = Vec::with_capacity(self.cols);
        for j in 0..self.cols {
            let (a, b) = (&self.columns[j], &other.columns[j]);
            let mut col = Vec::with_capacity(a.len() + b.len());
            let (mut ia, mut ib) = (0, 0);
            while ia < a.len() || ib < b.len() {
                match (a.get(ia), b.get(ib)) {
                    (Some(&(ra, va)), Some(&(rb, vb))) => {
                        if ra < rb {
                            col.push((ra, va));
                            ia += 1;
                        } else if rb < ra {
                            col.push((rb, vb));
                            ib += 1;
                        } else {
                            let s = va + vb;
                            if s != 0.0 {
                                col.push((ra, s));
                            }
                            ia += 1;
                            ib += 1;
                        }
                    }
                    (Some(&(ra, va)), None) => {
                        col.push((ra, va));
                        ia += 1;
                    }
                    (None, Some(&(rb, vb))) => {
                        col.push((rb, vb));
                        ib += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
            columns.push(col);
        }
        SparseFieldMatrix {
            rows: self.rows,
            cols: self.cols,
            field: FieldTag::Real,
            columns,
        }
    }

    /// Dense product self * x for a (cols, c) dense right-hand side.
    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.field, FieldTag::Real, "mul_dense is a real-field operation");
        assert_eq!(self.cols, x.nrows(), "mul_dense shape mismatch");
        let c = x.ncols();
        let mut out = Array2::zeros((self.rows, c));
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                for k in 0..c {
                    out[[i, k]] += v * x[[j, k]];
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let t = self.transpose();
        for j in 0..self.cols {
            let (a, b) = (&self.columns[j], &t.columns[j]);
            if a.len() != b.len() {
                return false;
            }
            for (&(ra, va), &(rb, vb)) in a.iter().zip(b.iter()) {
                if ra != rb || (va - vb).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Rank over Z2 by left-to-right column elimination. Coefficients are
    /// ignored beyond being nonzero, so this also works on real matrices whose
    /// entries are odd integers (boundary operators).
    pub fn rank_z2(&self) -> usize {
        let mut pivot_owner: Vec<Option<usize>> = vec![None; self.rows];
        let mut reduced: Vec<Vec<usize>> = Vec::with_capacity(self.cols);
        let mut rank = 0;
        for j in 0..self.cols {
            let mut col: Vec<usize> = self.columns[j].iter().map(|&(r, _)| r).collect();
            while let Some(&piv) = col.last() {
                match pivot_owner[piv] {
                    Some(owner) => col = xor_rows(&col, &reduced[owner]),
                    None => break,
                }
            }
            if let Some(&piv) = col.last() {
                pivot_owner[piv] = Some(reduced.len());
                rank += 1;
            }
            reduced.push(col);
        }
        rank
    }
}

/// Symmetric difference of two strictly increasing row-index lists.
pub(crate) fn xor_rows(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (0, 0);
    while ia < a.len() || ib < b.len() {
        match (a.get(ia), b.get(ib)) {
            (Some(&ra), Some(&rb)) => {
                if ra < rb {
                    out.push(ra);
                    ia += 1;
                } else if rb < ra {
                    out.push(rb);
                    ib += 1;
                } else {
                    ia += 1;
                    ib += 1;
                }
            }
            (Some(&ra), None) => {
                out.push(ra);
                ia += 1;
            }
            (None, Some(&rb)) => {
                out.push(rb);
                ib += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    out
}
