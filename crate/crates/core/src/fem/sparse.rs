//! Compressed sparse storage shared by all assembled matrices of one mesh.
//!
//! Every matrix of an [`AffineProblem`](super::AffineProblem) lives on the same
//! symmetric P1 sparsity pattern, so affine combinations are plain sums over value
//! arrays. Because the pattern is symmetric, the row-compressed layout doubles as
//! the column-compressed layout handed to the sparse Cholesky.

use std::io::Write;
use std::sync::Arc;

use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::Side;

use crate::error::{Result, SvrbError};

#[derive(Debug)]
pub struct SparsityPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    diag: Vec<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    cholesky: SymbolicLlt<usize>,
}

impl SparsityPattern {
    /// Builds the pattern from per-row neighbour lists (must include the diagonal and be symmetric).
    pub fn from_rows(mut rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut diag = Vec::with_capacity(n);
        row_ptr.push(0);
        for (i, r) in rows.iter_mut().enumerate() {
            r.sort_unstable();
            r.dedup();
            let d = r
                .binary_search(&i)
                .map_err(|_| SvrbError::Config(format!("row {i} lacks a diagonal entry")))?;
            diag.push(col_idx.len() + d);
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let symbolic = SymbolicSparseColMat::new_checked(n, n, row_ptr.clone(), None, col_idx.clone());
        let cholesky = SymbolicLlt::try_new(symbolic.as_ref(), Side::Lower)
            .map_err(|e| SvrbError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            diag,
            symbolic,
            cholesky,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of entry (i, j) in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }
}

/// A symmetric sparse matrix on a shared pattern.
#[derive(Debug, Clone)]
pub struct SymSparse {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SymSparse {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .pattern
            .position(i, j)
            .expect("entry outside sparsity pattern");
        self.values[p] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.pattern.diag.iter().map(|&p| self.values[p]).collect()
    }

    /// `sum_k weights[k] * mats[k]`; all inputs must share one pattern.
    pub fn combine(mats: &[&SymSparse], weights: &[f64]) -> SymSparse {
        assert_eq!(mats.len(), weights.len());
        let pattern = mats[0].pattern.clone();
        let mut values = vec![0.0; pattern.nnz()];
        for (m, &w) in mats.iter().zip(weights) {
            debug_assert!(Arc::ptr_eq(&m.pattern, &pattern));
            if w == 0.0 {
                continue;
            }
            for (acc, &v) in values.iter_mut().zip(&m.values) {
                *acc += w * v;
            }
        }
        SymSparse { pattern, values }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            y[i] = s;
        }
    }

    /// Bilinear form `x^T M y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut total = 0.0;
        for i in 0..p.n {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * y[p.col_idx[k]];
            }
            total += x[i] * s;
        }
        total
    }

    /// Largest `|M_ij - M_ji|` relative to the largest `|M_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.pattern;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col_idx[k];
                scale = scale.max(self.values[k].abs());
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let p = &self.pattern;
        let mut d = nalgebra::DMatrix::zeros(p.n, p.n);
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                d[(i, p.col_idx[k])] = self.values[k];
            }
        }
        d
    }

    /// Numeric Cholesky factorization reusing the pattern's symbolic analysis.
    pub fn cholesky(&self) -> Result<Llt<usize, f64>> {
        let p = &self.pattern;
        let mat = SparseColMatRef::new(p.symbolic.as_ref(), &self.values);
        Llt::try_new_with_symbolic(p.cholesky.clone(), mat, Side::Lower)
            .map_err(|e| SvrbError::Factorization(format!("{e:?}")))
    }

    /// Writes the matrix in MatrixMarket coordinate format (full storage, 1-based).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let p = &self.pattern;
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", p.n, p.n, p.nnz())?;
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                writeln!(w, "{} {} {:e}", i + 1, p.col_idx[k] + 1, self.values[k])?;
            }
        }
        Ok(())
    }
}

/// Solves with a faer LL^T factor, returning a fresh vector.
pub fn llt_solve(llt: &Llt<usize, f64>, rhs: &[f64]) -> Vec<f64> {
    use faer::linalg::solvers::Solve;
    let mut x = rhs.to_vec();
    let n = x.len();
    llt.solve_in_place(faer::MatMut::from_column_major_slice_mut(&mut x, n, 1));
    x
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_laplacian(n: usize) -> SymSparse {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![i];
                if i > 0 {
                    r.push(i - 1);
                }
                if i + 1 < n {
                    r.push(i + 1);
                }
                r
            })
            .collect();
        let pat = Arc::new(SparsityPattern::from_rows(rows).unwrap());
        let mut m = SymSparse::zeros(pat);
        for i in 0..n {
            m.add_at(i, i, 2.0);
            if i + 1 < n {
                m.add_at(i, i + 1, -1.0);
                m.add_at(i + 1, i, -1.0);
            }
        }
        m
    }

    #[test]
    fn cholesky_solves() {
        let m = path_laplacian(6);
        let b = vec![1.0, 0.0, 2.0, -1.0, 0.5, 3.0];
        let x = llt_solve(&m.cholesky().unwrap(), &b);
        let r: Vec<f64> = m.matvec(&x).iter().zip(&b).map(|(a, c)| a - c).collect();
        assert!(norm2(&r) < 1e-13);
        assert_eq!(m.asymmetry(), 0.0);
        assert!((m.bilinear(&b, &x) - dot(&b, &b)).abs() < 1e-12);
    }

    #[test]
    fn matrix_market_header() {
        let m = path_laplacian(3);
        let mut buf = Vec::new();
        m.write_matrix_market(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("%%MatrixMarket"));
        assert_eq!(s.lines().count(), 2 + 7);
    }
}
