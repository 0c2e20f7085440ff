//! Small dense symmetric solvers.
//!
//! The fitting code only ever solves symmetric positive-definite systems
//! (Gram matrices, normal equations) of modest size, so a plain Cholesky
//! factorization is all that is needed. Singularity is declared
//! deterministically when the smallest pivot falls below `1e-10` times the
//! largest, which gives degenerate designs a reproducible failure mode
//! instead of returning garbage.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Relative pivot threshold below which a matrix is declared singular.
pub const PIVOT_RTOL: f64 = 1e-10;

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    // Lower-triangular factor, row-major.
    l: Array2<f64>,
}

impl Cholesky {
    /// Factor `a` (symmetric, only the lower triangle is read).
    ///
    /// Fails with [`Error::Singular`] if any pivot is non-positive or falls
    /// below [`PIVOT_RTOL`] times the largest pivot seen so far; `context`
    /// is included in the error message.
    pub fn new(a: ArrayView2<f64>, context: &str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "cholesky",
                expected: n,
                found: a.ncols(),
            });
        }
        let mut l = Array2::<f64>::zeros((n, n));
        let mut max_pivot = 0.0_f64;
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            max_pivot = max_pivot.max(d);
            if d.is_nan() || d <= 0.0 || d < PIVOT_RTOL * max_pivot {
                return Err(Error::Singular(format!(
                    "{context}: pivot {d:.3e} at column {j} (largest {max_pivot:.3e})"
                )));
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / dj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "rhs length mismatch");
        let mut x = b.to_owned();
        // Forward: L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        // Backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Quadratic form `b^T A^{-1} b`.
    pub fn inv_quad_form(&self, b: ArrayView1<f64>) -> f64 {
        let n = self.dim();
        assert_eq!(b.len(), n, "rhs length mismatch");
        // b^T A^{-1} b = ||L^{-1} b||^2
        let mut y = b.to_owned();
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            let yi = s / self.l[(i, i)];
            y[i] = yi;
            acc += yi * yi;
        }
        acc
    }
}

/// Solve the SPD system `A x = b` in one call.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>, context: &str) -> Result<Array1<f64>> {
    Ok(Cholesky::new(a, context)?.solve(b))
}
