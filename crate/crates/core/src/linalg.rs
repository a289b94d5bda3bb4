//! Small dense linear-algebra helpers over `nalgebra` dynamic matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative tolerance for PSD checks: eigenvalues >= -PSD_TOL * (1 + max|eig|).
pub const PSD_TOL: f64 = 1e-9;
/// Relative threshold below which a positive definite matrix is treated as singular.
pub const SINGULAR_REL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix (ascending order not guaranteed).
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// (min, max) eigenvalue of a symmetric matrix; (0, 0) for an empty matrix.
pub fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eigs = sym_eigenvalues(m);
    if eigs.is_empty() {
        return (0.0, 0.0);
    }
    (eigs.min(), eigs.max())
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let eigs = sym_eigenvalues(m);
    if eigs.is_empty() {
        return true;
    }
    let scale = eigs.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
    eigs.min() >= -PSD_TOL * (1.0 + scale)
}

/// Positive definite with min eigenvalue above `SINGULAR_REL` times the max eigenvalue.
pub fn is_pd(m: &DMatrix<f64>) -> bool {
    let (lo, hi) = eig_range(m);
    hi > 0.0 && lo > SINGULAR_REL * hi
}

/// Inverse of a symmetric positive definite matrix, or `None` when it is not PD.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if !is_pd(m) {
        return None;
    }
    let chol = symmetrize(m).cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Submatrix with the given row and column indices.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

pub fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |r, _| v[idx[r]])
}

/// Block diagonal matrix from square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((at, at), (k, k)).copy_from(b);
        at += k;
    }
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}
