//! Principal-component factor extraction on a fully observed subsample and
//! factor-based completion of the missing block.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg::{reciprocal_condition, solve_spd, truncated_svd};
use crate::{Error, Result};

/// Below this reciprocal condition number the control loadings of the
/// pre-treatment fit are treated as degenerate.
pub const LOADING_RCOND_MIN: f64 = 1e-12;

/// Factors `F` (periods × r, `FᵀF/T = I`), loadings `Λ` (units × r) and the
/// leading singular values of `Y/√(T·N)` for one subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl FactorEstimate {
    /// `(periods, units, r)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.factors.nrows(), self.loadings.nrows(), self.factors.ncols())
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    /// Common component `F Λᵀ`.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.factors * self.loadings.transpose()
    }
}

/// Rank-`r` principal-component fit of `y`.
///
/// With `P D Qᵀ` the truncated SVD of `y/√(T'N')`, returns `F = √T'·P` and
/// `Λ = √N'·Q·D`, sign-normalized. `F Λᵀ` is the best rank-`r`
/// approximation of `y`.
pub fn pca_factors(y: &DMatrix<f64>, r: usize) -> Result<FactorEstimate> {
    let (t, n) = y.shape();
    if r == 0 {
        return Err(Error::InvalidArgument("number of factors must be at least 1".into()));
    }
    if r > t.min(n) {
        return Err(Error::RankTooLarge { r, min_dim: t.min(n) });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("factor input matrix"));
    }
    let scale = ((t * n) as f64).sqrt();
    let svd = truncated_svd(&(y / scale), r)?;
    let factors = &svd.u * (t as f64).sqrt();
    let mut loadings = svd.v * (n as f64).sqrt();
    for (k, s) in svd.s.iter().enumerate() {
        loadings.column_mut(k).scale_mut(*s);
    }
    Ok(sign_normalize(FactorEstimate { factors, loadings, singular_values: svd.s }))
}

/// Flip each factor column whose largest-magnitude entry is negative,
/// together with its loading column. The first entry wins magnitude ties.
pub fn sign_normalize(mut fit: FactorEstimate) -> FactorEstimate {
    for k in 0..fit.factors.ncols() {
        let col = fit.factors.column(k);
        let mut pivot = 0.0_f64;
        for &v in col.iter() {
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            fit.factors.column_mut(k).neg_mut();
            fit.loadings.column_mut(k).neg_mut();
        }
    }
    fit
}

/// Completed outcome matrix and the pieces it was built from.
#[derive(Debug, Clone)]
pub struct CompletionFit {
    /// Alignment of the control-block loadings, r × r.
    pub h_miss: DMatrix<f64>,
    /// `F_tall · H_miss · Λ_wideᵀ`, periods × units.
    pub completed: DMatrix<f64>,
    pub tall_fit: FactorEstimate,
    pub wide_fit: FactorEstimate,
    /// Covariate slope from the control-block fit, covariate model only.
    pub beta_tall: Option<DVector<f64>>,
}

impl CompletionFit {
    pub fn rank(&self) -> usize {
        self.h_miss.nrows()
    }

    /// Rebuild the completed matrix from its factors.
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.tall_fit.factors * &self.h_miss * self.wide_fit.loadings.transpose()
    }
}

/// Align the control-block fit and the pre-treatment fit through the
/// control loadings and complete the whole outcome matrix.
pub fn complete_matrix(tall: &FactorEstimate, wide: &FactorEstimate, n_control: usize) -> Result<CompletionFit> {
    let r = tall.rank();
    if wide.rank() != r {
        return Err(Error::InvalidArgument(format!("tall fit has {r} factors, wide fit has {}", wide.rank())));
    }
    if tall.loadings.nrows() != n_control || wide.loadings.nrows() <= n_control {
        return Err(Error::InvalidArgument("loading rows do not match the control count".into()));
    }
    let lw0 = wide.loadings.rows(0, n_control);
    let gram = lw0.transpose() * lw0;
    let rcond = reciprocal_condition(&gram);
    if rcond < LOADING_RCOND_MIN {
        return Err(Error::LoadingDegeneracy { rcond });
    }
    // H = Λ_tallᵀ Λ_w0 G⁻¹ with G symmetric, so Hᵀ = G⁻¹ Λ_w0ᵀ Λ_tall.
    let rhs = lw0.transpose() * &tall.loadings;
    let h_t = solve_spd(&gram, &rhs).ok_or(Error::LoadingDegeneracy { rcond })?;
    let h_miss = h_t.transpose();
    let completed = &tall.factors * &h_miss * wide.loadings.transpose();
    Ok(CompletionFit { h_miss, completed, tall_fit: tall.clone(), wide_fit: wide.clone(), beta_tall: None })
}

/// Pure factor completion straight from a periods × units matrix; values in
/// the missing block are never read.
pub fn complete_from_matrix(y: &DMatrix<f64>, n_control: usize, n_pre: usize, r: usize) -> Result<CompletionFit> {
    let (t, n) = y.shape();
    let tall = pca_factors(&y.view((0, 0), (t, n_control)).into_owned(), r)?;
    let wide = pca_factors(&y.view((0, 0), (n_pre, n)).into_owned(), r)?;
    complete_matrix(&tall, &wide, n_control)
}

/// Loadings-alignment diagnostics written alongside fit results.
#[derive(Debug, Clone, Serialize)]
pub struct CompletionSummary {
    pub r: usize,
    pub h_miss: Vec<Vec<f64>>,
    pub tall_singular_values: Vec<f64>,
    pub wide_singular_values: Vec<f64>,
}

impl From<&CompletionFit> for CompletionSummary {
    fn from(fit: &CompletionFit) -> Self {
        Self {
            r: fit.rank(),
            h_miss: fit.h_miss.row_iter().map(|row| row.iter().copied().collect()).collect(),
            tall_singular_values: fit.tall_fit.singular_values.clone(),
            wide_singular_values: fit.wide_fit.singular_values.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one(t: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(t, n, |tt, i| ((tt + 1) * (i + 1)) as f64)
    }

    #[test]
    fn constant_rank_one_closed_form() {
        let y = DMatrix::from_element(2, 2, 2.0);
        let fit = pca_factors(&y, 1).unwrap();
        assert!((fit.factors[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((fit.factors[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((fit.loadings[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((fit.loadings[(1, 0)] - 2.0).abs() < 1e-12);
        assert!((fit.singular_values[0] - 2.0).abs() < 1e-12);
        assert!((fit.common_component() - y).abs().max() < 1e-12);
    }

    #[test]
    fn factors_are_orthonormal() {
        let y = DMatrix::from_fn(7, 5, |t, i| ((t * 13 + i * 7) % 11) as f64 - 5.0);
        for r in 1..=5 {
            let fit = pca_factors(&y, r).unwrap();
            let gram = fit.factors.transpose() * &fit.factors / 7.0;
            assert!((gram - DMatrix::identity(r, r)).abs().max() < 1e-12);
            assert!(fit.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert!(fit.singular_values.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn exact_rank_reconstruction() {
        let f = DMatrix::from_fn(9, 2, |t, k| ((t + 1) as f64).powi(k as i32 + 1).sin());
        let l = DMatrix::from_fn(6, 2, |i, k| ((i + 2 * k) as f64).cos() + 1.0);
        let y = &f * l.transpose();
        let fit = pca_factors(&y, 2).unwrap();
        assert!((fit.common_component() - &y).norm() <= 1e-8 * y.norm());
    }

    #[test]
    fn errors() {
        let y = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(pca_factors(&y, 3), Err(Error::RankTooLarge { .. })));
        assert!(pca_factors(&y, 0).is_err());
        let mut bad = y.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(pca_factors(&bad, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sign_normalize_flips_negative_pivot() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let fit = FactorEstimate {
            factors: DMatrix::from_column_slice(2, 1, &[-s, -s]),
            loadings: DMatrix::from_column_slice(2, 1, &[3.0, -1.0]),
            singular_values: vec![1.0],
        };
        let before = fit.common_component();
        let out = sign_normalize(fit);
        assert_eq!(out.factors.as_slice(), &[s, s]);
        assert_eq!(out.loadings.as_slice(), &[-3.0, 1.0]);
        assert!((out.common_component() - before).abs().max() <= 1e-14);
        let again = sign_normalize(out.clone());
        assert_eq!(again, out);
    }

    #[test]
    fn completes_rank_one_product() {
        let y = rank_one(3, 3);
        let fit = complete_from_matrix(&y, 2, 2, 1).unwrap();
        assert!((fit.completed[(2, 2)] - 9.0).abs() < 1e-8);
        assert!((fit.recompose() - &fit.completed).abs().max() < 1e-12);
    }

    #[test]
    fn h_miss_is_one_when_loadings_agree() {
        let tall = FactorEstimate {
            factors: DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]),
            loadings: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            singular_values: vec![1.0],
        };
        let wide = FactorEstimate {
            factors: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            loadings: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 5.0]),
            singular_values: vec![1.0],
        };
        let fit = complete_matrix(&tall, &wide, 2).unwrap();
        assert!((fit.h_miss[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_loadings_rejected() {
        let tall = FactorEstimate {
            factors: DMatrix::from_element(3, 1, 1.0),
            loadings: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            singular_values: vec![1.0],
        };
        let wide = FactorEstimate {
            factors: DMatrix::from_element(2, 1, 1.0),
            loadings: DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]),
            singular_values: vec![1.0],
        };
        assert!(matches!(complete_matrix(&tall, &wide, 2), Err(Error::LoadingDegeneracy { .. })));
    }
}
