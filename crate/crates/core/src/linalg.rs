//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Rank-`r` truncated SVD: left vectors (rows × r), singular values
/// (descending), right vectors (cols × r).
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn truncated_svd(m: &DMatrix<f64>, r: usize) -> Result<TruncatedSvd> {
    let min_dim = m.nrows().min(m.ncols());
    if r > min_dim {
        return Err(Error::RankTooLarge { r, min_dim });
    }
    let svd = to_faer(m).thin_svd().map_err(|_| Error::SvdFailure)?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    Ok(TruncatedSvd {
        u: DMatrix::from_fn(m.nrows(), r, |i, k| u[(i, k)]),
        s: (0..r).map(|k| s[k]).collect(),
        v: DMatrix::from_fn(m.ncols(), r, |j, k| v[(j, k)]),
    })
}

/// All singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    to_faer(m).singular_values().map_err(|_| Error::SvdFailure)
}

/// Ratio of smallest to largest eigenvalue of a symmetric matrix; 0 when
/// the matrix is indefinite or zero.
pub fn reciprocal_condition(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return 1.0;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if max.is_nan() || max <= 0.0 || min <= 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Solve `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn solve_spd_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}
