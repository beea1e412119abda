//! Residuals, variance components and point estimates of the treatment
//! effects on the missing block.
//!
//! Block-local matrices (`T1 × N1`, with `T1 = T − T0` post periods and
//! `N1 = N − N0` treated units) are indexed `(t − T0, i − N0)`.

use nalgebra::{DMatrix, DVector};

use crate::factor::{CompletionFit, FactorEstimate};
use crate::ifee::{self, IfeeOptions, IfeeResult};
use crate::linalg::{reciprocal_condition, solve_spd, symmetrize};
use crate::panel::PanelData;
use crate::{factor, Error, Result};

/// Residuals on the observed region; cells in the missing block are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    values: DMatrix<f64>,
    n_control: usize,
    n_pre: usize,
}

impl ResidualMatrix {
    pub fn new(values: DMatrix<f64>, n_control: usize, n_pre: usize) -> Self {
        let mut values = values;
        let (t, n) = values.shape();
        for tt in n_pre..t {
            for i in n_control..n {
                values[(tt, i)] = f64::NAN;
            }
        }
        Self { values, n_control, n_pre }
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        (t < self.n_pre || i < self.n_control).then(|| self.values[(t, i)])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn n_pre(&self) -> usize {
        self.n_pre
    }

    /// Pre-treatment residuals of unit `i`.
    pub fn pre_treatment(&self, i: usize) -> Vec<f64> {
        (0..self.n_pre).map(|t| self.values[(t, i)]).collect()
    }

    /// Residuals of the control units at period `t`.
    pub fn controls_at(&self, t: usize) -> Vec<f64> {
        (0..self.n_control).map(|i| self.values[(t, i)]).collect()
    }

    /// Dense copy with zeros in the missing block.
    pub fn to_dense(&self) -> DMatrix<f64> {
        self.values.map(|v| if v.is_nan() { 0.0 } else { v })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: &self.values * c, ..*self }
    }
}

/// `Σ_k β_k X_k`, periods × units.
pub fn covariate_index(covariates: &[DMatrix<f64>], beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    if covariates.len() != beta.len() || covariates.is_empty() {
        return Err(Error::CovariateDimension { expected: beta.len(), found: covariates.len() });
    }
    let mut out = DMatrix::zeros(covariates[0].nrows(), covariates[0].ncols());
    for (x, b) in covariates.iter().zip(beta.iter()) {
        out += x * *b;
    }
    Ok(out)
}

fn covariate_adjustment(panel: &PanelData, fit: &CompletionFit) -> Result<Option<DMatrix<f64>>> {
    match (&fit.beta_tall, panel.covariates()) {
        (None, _) => Ok(None),
        (Some(beta), Some(xs)) => covariate_index(xs, beta).map(Some),
        (Some(beta), None) => Err(Error::CovariateDimension { expected: beta.len(), found: 0 }),
    }
}

/// `ê = y − ĉ` (or `y − xᵀβ̂ − ĉ` when the fit carries a covariate slope)
/// outside the missing block.
pub fn compute_residuals(panel: &PanelData, fit: &CompletionFit) -> Result<ResidualMatrix> {
    if fit.completed.shape() != panel.outcomes().shape() {
        return Err(Error::InvalidArgument("fit does not match panel dimensions".into()));
    }
    let mut values = panel.outcomes() - &fit.completed;
    if let Some(xb) = covariate_adjustment(panel, fit)? {
        values -= xb;
    }
    Ok(ResidualMatrix::new(values, panel.n_control(), panel.n_pre()))
}

/// Bartlett truncation lag `max(1, ⌊4·(T0/100)^{2/9}⌋)`, capped at `T0 − 1`.
pub fn default_bandwidth(t0: usize) -> usize {
    let k = (4.0 * (t0 as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize;
    k.max(1).min(t0.saturating_sub(1))
}

/// Bartlett weight `1 − k/(K+1)`.
pub fn bartlett_weight(k: usize, bandwidth: usize) -> f64 {
    1.0 - k as f64 / (bandwidth as f64 + 1.0)
}

/// Long-run covariance of `f_s ê_{i,s}` over the pre-treatment periods with
/// Bartlett weights. `f_tall` supplies at least `resid.len()` rows.
pub fn long_run_phi(f_tall: &DMatrix<f64>, resid: &[f64], bandwidth: usize) -> Result<DMatrix<f64>> {
    let t0 = resid.len();
    if bandwidth >= t0 {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be below T0 = {t0}")));
    }
    if f_tall.nrows() < t0 {
        return Err(Error::InvalidArgument("factor rows fewer than residuals".into()));
    }
    let r = f_tall.ncols();
    let scores: Vec<DVector<f64>> = (0..t0).map(|s| f_tall.row(s).transpose() * resid[s]).collect();
    let lag = |k: usize| {
        let mut l = DMatrix::zeros(r, r);
        for s in k..t0 {
            l.ger(1.0, &scores[s], &scores[s - k], 1.0);
        }
        l / t0 as f64
    };
    let mut phi = lag(0);
    for k in 1..=bandwidth {
        let lk = lag(k);
        phi += (&lk + lk.transpose()) * bartlett_weight(k, bandwidth);
    }
    Ok(symmetrize(&phi))
}

/// `(1/N0) Σ_j ê²_{j,t} λ_j λ_jᵀ` over the control units.
pub fn gamma_t(lambda_wide: &DMatrix<f64>, resid_controls: &[f64]) -> DMatrix<f64> {
    let n0 = resid_controls.len();
    let r = lambda_wide.ncols();
    let mut g = DMatrix::zeros(r, r);
    for (j, e) in resid_controls.iter().enumerate() {
        let l = lambda_wide.row(j).transpose();
        g.ger(e * e, &l, &l, 1.0);
    }
    symmetrize(&(g / n0.max(1) as f64))
}

/// Inverses of `F̂ᵀF̂/T` (control-block fit) and `Λ̂ᵀΛ̂/N` (pre-treatment fit).
#[derive(Debug, Clone)]
pub struct SandwichNorms {
    pub factor_inv: DMatrix<f64>,
    pub loading_inv: DMatrix<f64>,
}

impl SandwichNorms {
    pub fn new(tall: &FactorEstimate, wide: &FactorEstimate) -> Result<Self> {
        let invert = |g: DMatrix<f64>| {
            if reciprocal_condition(&g) < factor::LOADING_RCOND_MIN {
                return Err(Error::SingularNormalization);
            }
            let r = g.nrows();
            solve_spd(&g, &DMatrix::identity(r, r)).ok_or(Error::SingularNormalization)
        };
        let t = tall.factors.nrows() as f64;
        let n = wide.loadings.nrows() as f64;
        Ok(Self {
            factor_inv: invert(tall.factors.transpose() * &tall.factors / t)?,
            loading_inv: invert(wide.loadings.transpose() * &wide.loadings / n)?,
        })
    }
}

/// Estimated variance of `ĉ_{i,t}` and whether roundoff forced a clamp at 0.
#[allow(clippy::too_many_arguments)]
pub fn variance_vhat(
    f_t: &DVector<f64>,
    lambda_i: &DVector<f64>,
    norms: &SandwichNorms,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    t0: usize,
    n0: usize,
) -> (f64, bool) {
    let a = &norms.factor_inv * f_t;
    let b = &norms.loading_inv * lambda_i;
    let v = a.dot(&(phi * &a)) / t0 as f64 + b.dot(&(gamma * &b)) / n0 as f64;
    if v < 0.0 {
        (0.0, true)
    } else {
        (v, false)
    }
}

/// Mean of squared pre-treatment residuals, no demeaning.
pub fn sigma2(resid: &[f64]) -> f64 {
    if resid.is_empty() {
        return 0.0;
    }
    resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64
}

#[derive(Debug, Clone)]
pub struct VarianceComponents {
    /// `Γ̂_t` for each post period.
    pub gamma: Vec<DMatrix<f64>>,
    /// `Φ̂_i` for each treated unit.
    pub phi: Vec<DMatrix<f64>>,
    pub bandwidth: usize,
    /// `V̂_{i,t}`, block-local.
    pub v_hat: DMatrix<f64>,
    /// `σ̂²_i` per treated unit.
    pub sigma2: Vec<f64>,
    /// Number of `V̂` values clamped from a tiny negative to 0.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct EffectEstimates {
    pub n_control: usize,
    pub n_pre: usize,
    /// Counterfactual outcome (`ĉ`, plus `xᵀβ̂` in the covariate model), block-local.
    pub counterfactual: DMatrix<f64>,
    /// `Δ̂_{i,t}`, block-local.
    pub delta: DMatrix<f64>,
    /// `√(V̂ + σ̂²)`, block-local.
    pub std_err: DMatrix<f64>,
    pub residuals: ResidualMatrix,
}

impl EffectEstimates {
    /// Block-local index of panel cell `(t, i)`.
    pub fn local(&self, t: usize, i: usize) -> (usize, usize) {
        (t - self.n_pre, i - self.n_control)
    }
}

/// Point estimates and standard errors from an outcome matrix, an optional
/// covariate index `xᵀβ̂` and a completion fit. Shared by the sample fit and
/// the bootstrap refits.
pub fn effects_from_parts(
    outcomes: &DMatrix<f64>,
    covariate_index: Option<&DMatrix<f64>>,
    fit: &CompletionFit,
    n_control: usize,
    n_pre: usize,
    bandwidth: usize,
) -> Result<(EffectEstimates, VarianceComponents)> {
    let (t, n) = outcomes.shape();
    let mut resid = outcomes - &fit.completed;
    if let Some(xb) = covariate_index {
        resid -= xb;
    }
    let residuals = ResidualMatrix::new(resid, n_control, n_pre);
    let (t1, n1) = (t - n_pre, n - n_control);

    let tall = &fit.tall_fit;
    let wide = &fit.wide_fit;
    let norms = SandwichNorms::new(tall, wide)?;
    let gamma: Vec<DMatrix<f64>> = (n_pre..t).map(|tt| gamma_t(&wide.loadings, &residuals.controls_at(tt))).collect();
    let mut phi = Vec::with_capacity(n1);
    let mut s2 = Vec::with_capacity(n1);
    for i in n_control..n {
        let pre = residuals.pre_treatment(i);
        phi.push(long_run_phi(&tall.factors, &pre, bandwidth)?);
        s2.push(sigma2(&pre));
    }

    let mut v_hat = DMatrix::zeros(t1, n1);
    let mut clamped = 0;
    for (ib, i) in (n_control..n).enumerate() {
        let lambda_i = wide.loadings.row(i).transpose();
        for (tb, tt) in (n_pre..t).enumerate() {
            let f_t = tall.factors.row(tt).transpose();
            let (v, c) = variance_vhat(&f_t, &lambda_i, &norms, &phi[ib], &gamma[tb], n_pre, n_control);
            v_hat[(tb, ib)] = v;
            clamped += usize::from(c);
        }
    }

    let mut counterfactual = fit.completed.view((n_pre, n_control), (t1, n1)).into_owned();
    if let Some(xb) = covariate_index {
        counterfactual += xb.view((n_pre, n_control), (t1, n1));
    }
    let delta = outcomes.view((n_pre, n_control), (t1, n1)) - &counterfactual;
    let std_err = DMatrix::from_fn(t1, n1, |tb, ib| (v_hat[(tb, ib)] + s2[ib]).sqrt());

    Ok((
        EffectEstimates { n_control, n_pre, counterfactual, delta, std_err, residuals },
        VarianceComponents { gamma, phi, bandwidth, v_hat, sigma2: s2, clamped },
    ))
}

/// Treatment effects and standard errors on every cell of the missing block.
pub fn estimate_effects(
    panel: &PanelData,
    fit: &CompletionFit,
    bandwidth: usize,
) -> Result<(EffectEstimates, VarianceComponents)> {
    if fit.completed.shape() != panel.outcomes().shape() {
        return Err(Error::InvalidArgument("fit does not match panel dimensions".into()));
    }
    let xb = covariate_adjustment(panel, fit)?;
    effects_from_parts(panel.outcomes(), xb.as_ref(), fit, panel.n_control(), panel.n_pre(), bandwidth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    PureFactor,
    Covariates(IfeeOptions),
}

/// Everything produced by one estimation pass on a panel.
#[derive(Debug, Clone)]
pub struct Estimation {
    pub fit: CompletionFit,
    pub effects: EffectEstimates,
    pub variance: VarianceComponents,
    /// Control-block and pre-treatment IFEE fits, covariate model only.
    pub ifee: Option<(IfeeResult, IfeeResult)>,
}

/// Complete the panel with `r` factors under `model` and estimate effects.
pub fn estimate_panel(panel: &PanelData, r: usize, bandwidth: usize, model: Model) -> Result<Estimation> {
    crate::panel::validate_order_conditions(panel, r).require()?;
    let (fit, fits) = match model {
        Model::PureFactor => {
            (factor::complete_from_matrix(panel.outcomes(), panel.n_control(), panel.n_pre(), r)?, None)
        }
        Model::Covariates(opts) => {
            let (fit, tall, wide) = ifee::complete_with_covariates(panel, r, opts)?;
            (fit, Some((tall, wide)))
        }
    };
    let (effects, variance) = estimate_effects(panel, &fit, bandwidth)?;
    Ok(Estimation { fit, effects, variance, ifee: fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_factor_fit(t: usize, n: usize) -> CompletionFit {
        let y = DMatrix::from_fn(t, n, |tt, i| ((tt + 1) * (i + 2)) as f64);
        factor::complete_from_matrix(&y, n - 1, t - 2, 1).unwrap()
    }

    #[test]
    fn residuals_zero_on_exact_fit_and_shift() {
        let fit = one_factor_fit(5, 4);
        let panel = PanelData::from_block(fit.completed.clone(), 3, 3, None).unwrap();
        let res = compute_residuals(&panel, &fit).unwrap();
        assert_eq!(res.get(4, 3), None);
        for t in 0..5 {
            for i in 0..4 {
                if let Some(e) = res.get(t, i) {
                    assert!(e.abs() < 1e-12);
                }
            }
        }
        let shifted = panel.with_outcomes(fit.completed.add_scalar(1.0)).unwrap();
        let res = compute_residuals(&shifted, &fit).unwrap();
        assert!((res.get(0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((res.get(2, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariate_residuals() {
        let mut fit = one_factor_fit(5, 4);
        fit.beta_tall = Some(DVector::from_vec(vec![2.0]));
        let ones = DMatrix::from_element(5, 4, 1.0);
        let panel = PanelData::from_block(fit.completed.add_scalar(2.0), 3, 3, Some(vec![ones])).unwrap();
        let res = compute_residuals(&panel, &fit).unwrap();
        assert!(res.to_dense().abs().max() < 1e-12);

        let bare = PanelData::from_block(fit.completed.clone(), 3, 3, None).unwrap();
        assert!(matches!(compute_residuals(&bare, &fit), Err(Error::CovariateDimension { .. })));
    }

    #[test]
    fn bandwidth_rule() {
        assert_eq!(default_bandwidth(100), 4);
        assert_eq!(default_bandwidth(20), 2);
        assert_eq!(default_bandwidth(40), 3);
        assert_eq!(default_bandwidth(2), 1);
    }

    #[test]
    fn bartlett_weights() {
        assert_eq!(bartlett_weight(0, 3), 1.0);
        assert_eq!(bartlett_weight(3, 3), 0.25);
        assert!(bartlett_weight(1, 3) > bartlett_weight(2, 3));
    }

    #[test]
    fn phi_hand_example() {
        let f = DMatrix::from_element(4, 1, 1.0);
        let e = [1.0, -1.0, 1.0, -1.0];
        let phi0 = long_run_phi(&f, &e, 0).unwrap();
        assert!((phi0[(0, 0)] - 1.0).abs() < 1e-15);
        let phi1 = long_run_phi(&f, &e, 1).unwrap();
        assert!((phi1[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(long_run_phi(&f, &e, 4).is_err());
    }

    #[test]
    fn phi_k1_matches_lag_formula() {
        let f = DMatrix::from_fn(6, 2, |t, k| ((t * 3 + k * 5) % 7) as f64 - 3.0);
        let e = [0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let t0 = e.len() as f64;
        let mut l0 = DMatrix::zeros(2, 2);
        let mut l1 = DMatrix::zeros(2, 2);
        for s in 0..6 {
            let g = f.row(s).transpose() * e[s];
            l0 += &g * g.transpose() / t0;
            if s >= 1 {
                let h = f.row(s - 1).transpose() * e[s - 1];
                l1 += &g * h.transpose() / t0;
            }
        }
        let expected = &l0 + (&l1 + l1.transpose()) * 0.5;
        let phi = long_run_phi(&f, &e, 1).unwrap();
        assert!((phi - expected).abs().max() < 1e-12);
    }

    #[test]
    fn gamma_examples() {
        let l = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        assert!((gamma_t(&l, &[1.0, 1.0])[(0, 0)] - 2.5).abs() < 1e-15);
        assert_eq!(gamma_t(&l, &[0.0, 0.0])[(0, 0)], 0.0);
        let g1 = gamma_t(&l, &[0.5, -1.5]);
        let g3 = gamma_t(&l, &[1.5, -4.5]);
        assert!((g3 * (1.0 / 9.0) - g1).abs().max() < 1e-14);
    }

    #[test]
    fn vhat_scalar_reduction() {
        let norms = SandwichNorms {
            factor_inv: DMatrix::from_element(1, 1, 1.0),
            loading_inv: DMatrix::from_element(1, 1, 1.0 / 2.0),
        };
        let f = DVector::from_vec(vec![1.5]);
        let l = DVector::from_vec(vec![-0.7]);
        let phi = DMatrix::from_element(1, 1, 0.8);
        let gam = DMatrix::from_element(1, 1, 1.3);
        let (v, clamped) = variance_vhat(&f, &l, &norms, &phi, &gam, 10, 20);
        let expected = 1.5f64.powi(2) * 0.8 / 10.0 + 0.49 * 1.3 / (20.0 * 4.0);
        assert!(!clamped);
        assert!((v - expected).abs() < 1e-15);
        let (v2, _) = variance_vhat(&f, &l, &norms, &phi, &gam, 20, 40);
        assert!((v2 - v / 2.0).abs() < 1e-15);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(variance_vhat(&f, &l, &norms, &zero, &zero, 10, 20).0, 0.0);
    }

    #[test]
    fn sigma2_examples() {
        assert_eq!(sigma2(&[1.0, -1.0, 1.0, -1.0]), 1.0);
        assert_eq!(sigma2(&[0.0; 4]), 0.0);
        assert_eq!(sigma2(&[3.0, 0.0, 0.0, 0.0]), 2.25);
    }

    #[test]
    fn exact_counterfactual_gives_zero_effects() {
        let fit = one_factor_fit(6, 5);
        let mut y = fit.completed.clone();
        y[(0, 0)] += 0.1;
        y[(2, 4)] -= 0.2;
        let panel = PanelData::from_block(y, 4, 4, None).unwrap();
        let (eff, var) = estimate_effects(&panel, &fit, 1).unwrap();
        assert!(eff.delta.abs().max() < 1e-12);
        for tb in 0..2 {
            let se2 = eff.std_err[(tb, 0)].powi(2);
            assert!((se2 - (var.v_hat[(tb, 0)] + var.sigma2[0])).abs() <= 1e-12 * se2.max(1.0));
        }
    }
}
