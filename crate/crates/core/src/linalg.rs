//! Small dense linear algebra on row-major `f64` buffers.

use nalgebra::DMatrix;

use crate::error::{NcgError, Result};

/// `ln det` and inverse of a symmetric positive-definite `d x d` matrix via
/// Cholesky factorization.
pub fn spd_log_det_and_inverse(matrix: &[f64], d: usize) -> Result<(f64, Vec<f64>)> {
    let m = DMatrix::from_row_slice(d, d, matrix);
    let chol = m
        .cholesky()
        .ok_or_else(|| NcgError::invalid("covariance matrix is not positive definite"))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = inv[(r, c)];
        }
    }
    Ok((log_det, out))
}

/// Determinant of a general square matrix via LU with partial pivoting.
pub fn determinant(matrix: &[f64], d: usize) -> f64 {
    DMatrix::from_row_slice(d, d, matrix).lu().determinant()
}

/// Solves `a x = b` for square `a` (row-major), returning `None` when `a`
/// is singular.
pub fn solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    let m = DMatrix::from_row_slice(d, d, a);
    let rhs = nalgebra::DVector::from_column_slice(b);
    m.lu().solve(&rhs).map(|x| x.iter().copied().collect())
}
