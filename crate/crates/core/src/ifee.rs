//! Interactive fixed effects estimation: alternating least squares between
//! the covariate slope and the principal-component factor space.

use nalgebra::{DMatrix, DVector};

use crate::factor::{self, pca_factors, CompletionFit, FactorEstimate};
use crate::linalg::{reciprocal_condition, solve_spd_vec};
use crate::panel::{tall_view, wide_view, PanelData};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfeeOptions {
    /// Stop once `‖β⁽ᵏ⁾ − β⁽ᵏ⁻¹⁾‖₂` falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IfeeOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct IfeeResult {
    pub beta: DVector<f64>,
    /// Periods × r, `FᵀF/T = I`.
    pub factors: DMatrix<f64>,
    /// Units × r.
    pub loadings: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_step: f64,
    /// Concentrated least-squares objective `‖H⁽ᵏ⁾(Y − Xβ⁽ᵏ⁾)‖²/(NT)` per
    /// iteration.
    pub objective_trace: Vec<f64>,
}

impl IfeeResult {
    pub fn factor_estimate(&self) -> FactorEstimate {
        FactorEstimate {
            factors: self.factors.clone(),
            loadings: self.loadings.clone(),
            singular_values: self.singular_values.clone(),
        }
    }
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_shapes(y: &DMatrix<f64>, x: &[DMatrix<f64>]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::CovariateDimension { expected: 1, found: 0 });
    }
    if x.iter().any(|xk| xk.shape() != y.shape()) {
        return Err(Error::InvalidArgument("covariate shape differs from outcomes".into()));
    }
    if y.iter().chain(x.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("IFEE input"));
    }
    Ok(())
}

/// Solve `Σ_i X_iᵀ M_i β = Σ_i M_iᵀ Y_i` where `M_k` is the (possibly
/// projected) k-th regressor.
fn solve_normal(projected: &[DMatrix<f64>], x: &[DMatrix<f64>], y: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = x.len();
    let gram = DMatrix::from_fn(p, p, |k, l| frob(&projected[k], &x[l]));
    let gram = (&gram + gram.transpose()) * 0.5;
    if reciprocal_condition(&gram) < factor::LOADING_RCOND_MIN {
        return Err(Error::SingularGram);
    }
    let rhs = DVector::from_fn(p, |k, _| frob(&projected[k], y));
    solve_spd_vec(&gram, &rhs).ok_or(Error::SingularGram)
}

/// Pooled least-squares starting value `(Σ XᵢᵀXᵢ)⁻¹ Σ XᵢᵀYᵢ`.
///
/// `x` holds one periods × units matrix per regressor.
pub fn start_beta(y: &DMatrix<f64>, x: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    check_shapes(y, x)?;
    solve_normal(x, x, y)
}

fn residual(y: &DMatrix<f64>, x: &[DMatrix<f64>], beta: &DVector<f64>) -> DMatrix<f64> {
    let mut r = y.clone();
    for (xk, b) in x.iter().zip(beta.iter()) {
        r -= xk * *b;
    }
    r
}

/// `(I − FFᵀ/T) m`.
fn annihilate(f: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let t = f.nrows() as f64;
    m - f * (f.transpose() * m) / t
}

/// Iterate to convergence. `r = 0` reduces to pooled least squares.
pub fn ifee_fit(y: &DMatrix<f64>, x: &[DMatrix<f64>], r: usize, opts: IfeeOptions) -> Result<IfeeResult> {
    let (t, n) = y.shape();
    let beta0 = start_beta(y, x)?;
    if r == 0 {
        let resid = residual(y, x, &beta0);
        return Ok(IfeeResult {
            objective_trace: vec![resid.norm_squared() / (t * n) as f64],
            beta: beta0,
            factors: DMatrix::zeros(t, 0),
            loadings: DMatrix::zeros(n, 0),
            singular_values: vec![],
            iterations: 1,
            converged: true,
            final_step: 0.0,
        });
    }

    let mut beta_prev = beta0;
    let mut trace = Vec::new();
    let mut last_fit: Option<FactorEstimate> = None;
    let mut beta = beta_prev.clone();
    let mut step = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for k in 1..=opts.max_iter.max(1) {
        let fit = pca_factors(&residual(y, x, &beta_prev), r)?;
        let projected: Vec<DMatrix<f64>> = x.iter().map(|xk| annihilate(&fit.factors, xk)).collect();
        beta = solve_normal(&projected, x, y)?;
        let hr = annihilate(&fit.factors, &residual(y, x, &beta));
        trace.push(hr.norm_squared() / (t * n) as f64);
        step = (&beta - &beta_prev).norm();
        iterations = k;
        last_fit = Some(fit);
        if step < opts.tol {
            converged = true;
            break;
        }
        beta_prev = beta.clone();
    }
    let fit = last_fit.expect("at least one iteration");
    Ok(IfeeResult {
        beta,
        factors: fit.factors,
        loadings: fit.loadings,
        singular_values: fit.singular_values,
        iterations,
        converged,
        final_step: step,
        objective_trace: trace,
    })
}

/// IFEE on the control block and on the pre-treatment block, aligned into a
/// completion whose slope is the control-block estimate.
pub fn complete_with_covariates(
    panel: &PanelData,
    r: usize,
    opts: IfeeOptions,
) -> Result<(CompletionFit, IfeeResult, IfeeResult)> {
    if r == 0 {
        return Err(Error::InvalidArgument("number of factors must be at least 1".into()));
    }
    let tall = tall_view(panel);
    let wide = wide_view(panel);
    let (Some(x_tall), Some(x_wide)) = (tall.covariates.as_deref(), wide.covariates.as_deref()) else {
        return Err(Error::InvalidArgument("covariate model requires covariates".into()));
    };
    let tall_res = ifee_fit(&tall.matrix, x_tall, r, opts)?;
    let wide_res = ifee_fit(&wide.matrix, x_wide, r, opts)?;
    let mut fit = factor::complete_matrix(&tall_res.factor_estimate(), &wide_res.factor_estimate(), panel.n_control())?;
    fit.beta_tall = Some(tall_res.beta.clone());
    Ok((fit, tall_res, wide_res))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_matrix(t: usize, n: usize, a: u64) -> DMatrix<f64> {
        // Cheap deterministic pseudo-random fill in (-1, 1).
        DMatrix::from_fn(t, n, |i, j| {
            let mut z = (i as u64 * 7919 + j as u64 * 104_729 + a * 1_000_003).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z ^= z >> 29;
            z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z ^= z >> 32;
            (z as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn start_beta_exact() {
        let x = det_matrix(6, 4, 1);
        let y = &x * 2.0;
        let b = start_beta(&y, std::slice::from_ref(&x)).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn start_beta_singular() {
        let x = DMatrix::zeros(5, 3);
        let y = det_matrix(5, 3, 2);
        assert!(matches!(start_beta(&y, &[x]), Err(Error::SingularGram)));
    }

    #[test]
    fn r_zero_is_pooled_ols() {
        let x = det_matrix(6, 4, 3);
        let y = &x * 2.0;
        let res = ifee_fit(&y, std::slice::from_ref(&x), 0, IfeeOptions::default()).unwrap();
        assert!((res.beta[0] - 2.0).abs() < 1e-12);
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
    }

    #[test]
    fn planted_noise_free_recovery() {
        let (t, n) = (30, 40);
        let f = det_matrix(t, 2, 10) * 2.0;
        let l = det_matrix(n, 2, 11) * 2.0;
        let x = vec![det_matrix(t, n, 12), det_matrix(t, n, 13)];
        let y = &f * l.transpose() + &x[0] * 1.0 - &x[1] * 2.0;
        let res = ifee_fit(&y, &x, 2, IfeeOptions { tol: 1e-10, max_iter: 1000 }).unwrap();
        assert!(res.converged);
        assert!((res.beta[0] - 1.0).abs() < 1e-6 && (res.beta[1] + 2.0).abs() < 1e-6);
        let gram = res.factors.transpose() * &res.factors / t as f64;
        assert!((gram - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-15);
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (t, n) = (20, 25);
        let f = det_matrix(t, 1, 20);
        let l = det_matrix(n, 1, 21);
        let x = vec![det_matrix(t, n, 22)];
        let y = &f * l.transpose() * 3.0 + &x[0] * 0.5 + det_matrix(t, n, 23) * 0.3;
        let res = ifee_fit(&y, &x, 1, IfeeOptions { tol: 0.0, max_iter: 3 }).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 3);
    }
}
