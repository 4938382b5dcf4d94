//! Thin wrapper over the sparse LU of `faer`.
//!
//! Assemblies in this crate always emit their entries in the same order for a
//! given mesh, so the sparsity pattern, the value permutation and the symbolic
//! factorization are computed once and reused by every numeric factorization.

use std::sync::OnceLock;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::MatMut;

use crate::error::{Error, Result};

/// Fixed sparsity pattern of a square system, in assembly order.
pub struct Pattern {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: OnceLock<SymbolicLu<usize>>,
}

impl std::fmt::Debug for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pattern")
            .field("n", &self.n)
            .field("entries", &self.rows.len())
            .finish()
    }
}

impl Pattern {
    /// Pattern from `(row, col)` pairs; duplicates are summed on assembly.
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Result<Self> {
        let idx: Vec<Pair<usize, usize>> = entries
            .iter()
            .map(|&(row, col)| Pair { row, col })
            .collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &idx)
            .map_err(|e| Error::Linear(format!("invalid sparsity pattern: {e:?}")))?;
        Ok(Self {
            n,
            rows: entries.iter().map(|e| e.0).collect(),
            cols: entries.iter().map(|e| e.1).collect(),
            symbolic,
            argsort,
            lu: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn matrix(&self, values: &[f64]) -> Result<SparseColMat<usize, f64>> {
        if values.len() != self.rows.len() {
            return Err(Error::SizeMismatch {
                expected: self.rows.len(),
                got: values.len(),
            });
        }
        SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| Error::Linear(format!("{e:?}")))
    }

    /// Numeric LU of the matrix with the given values.
    pub fn factor(&self, values: &[f64]) -> Result<Factorization> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Linear("matrix has non-finite entries".into()));
        }
        let mat = self.matrix(values)?;
        let symbolic = match self.lu.get() {
            Some(s) => s.clone(),
            None => {
                let s = SymbolicLu::try_new(mat.symbolic())
                    .map_err(|e| Error::Linear(format!("symbolic factorization failed: {e:?}")))?;
                self.lu.get_or_init(|| s).clone()
            }
        };
        let lu = Lu::try_new_with_symbolic(symbolic, mat.as_ref())
            .map_err(|e| Error::Linear(format!("singular system: {e:?}")))?;
        Ok(Factorization { lu, n: self.n })
    }

    /// `y = A x`.
    pub fn mul(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(values) {
            y[*r] += v * x[*c];
        }
        y
    }

    /// `y = A^T x`.
    pub fn mul_transpose(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(values) {
            y[*c] += v * x[*r];
        }
        y
    }
}

pub struct Factorization {
    lu: Lu<usize, f64>,
    n: usize,
}

impl Factorization {
    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) -> Result<()> {
        self.run(b, false)
    }

    /// Solve `A^T x = b` in place.
    pub fn solve_transpose(&self, b: &mut [f64]) -> Result<()> {
        self.run(b, true)
    }

    fn run(&self, b: &mut [f64], transpose: bool) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let m = MatMut::from_column_major_slice_mut(b, self.n, 1);
        if transpose {
            self.lu.solve_transpose_in_place(m);
        } else {
            self.lu.solve_in_place(m);
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Linear(
                "solution has non-finite entries (singular system)".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saddle_point_system_with_zero_diagonal() {
        // [2 0 1; 0 3 1; 1 1 0] x = [1 2 3]
        let entries = [(0, 0), (0, 2), (1, 1), (1, 2), (2, 0), (2, 1)];
        let vals = [2.0, 1.0, 3.0, 1.0, 1.0, 1.0];
        let p = Pattern::new(3, &entries).unwrap();
        let f = p.factor(&vals).unwrap();
        let mut x = vec![1.0, 2.0, 3.0];
        f.solve(&mut x).unwrap();
        let r = p.mul(&vals, &x);
        for (a, b) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut y = vec![1.0, -1.0, 0.5];
        f.solve_transpose(&mut y).unwrap();
        let r = p.mul_transpose(&vals, &y);
        for (a, b) in r.iter().zip([1.0, -1.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicates_are_summed_and_pattern_reused() {
        let entries = [(0, 0), (0, 0), (1, 1), (1, 0)];
        let p = Pattern::new(2, &entries).unwrap();
        for scale in [1.0, 2.0] {
            let vals = [scale, scale, 4.0, 1.0];
            let f = p.factor(&vals).unwrap();
            let mut x = vec![2.0 * scale, 5.0];
            f.solve(&mut x).unwrap();
            assert!((x[0] - 1.0).abs() < 1e-14);
            assert!((x[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let entries = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let p = Pattern::new(2, &entries).unwrap();
        let res = p.factor(&[1.0, 1.0, 1.0, 1.0]).and_then(|f| {
            let mut b = vec![1.0, 2.0];
            f.solve(&mut b)
        });
        assert!(res.is_err());
    }
}
