//! Simulation designs and the warp-speed Monte Carlo coverage study.
//!
//! Designs: three standard-normal factors and loadings, optionally two
//! covariates `x ~ N(0, AAᵀ)` with slope `β ~ N(0, I₂)`, AR(1) idiosyncratic
//! errors with unit-variance innovations, and one treated unit observed for
//! five post-treatment periods with a constant effect.
//!
//! Warp speed: every replication draws one fresh panel and exactly one
//! bootstrap statistic per treated cell. Critical values are empirical
//! quantiles of those statistics pooled across replications, per cell, and
//! each replication's intervals combine them with its own `Δ̂` and standard
//! error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_draw, critical_values, draw_with_retry, interval_from_quantiles};
use crate::effects::{default_bandwidth, estimate_panel, Model};
use crate::ifee::IfeeOptions;
use crate::nfactors::{estimate_panel_factors, FactorCountMethod, DEFAULT_RMAX};
use crate::panel::PanelData;
use crate::rng::{derive_seed, substream, tag, StreamRng};
use crate::{Error, Result};

const BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpModel {
    /// Pure factor model.
    Dgp1,
    /// Factor model with two covariates.
    Dgp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCase {
    /// `ρᵢ = 0`, `σᵢ² = 1`.
    Case1,
    /// `ρᵢ ~ U([−0.8,−0.2] ∪ [0.2,0.8])`, `σᵢ² ~ logNormal(0,1)`.
    Case2,
}

impl ErrorCase {
    /// Multiplier block width used for this error structure.
    pub fn default_block_width(self) -> usize {
        match self {
            ErrorCase::Case1 => 1,
            ErrorCase::Case2 => 4,
        }
    }
}

/// Innovation distribution, standardized to mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Margin {
    /// `(χ²(1) − 1)/√2`.
    Margin1,
    /// `U[−0.5, 0.5]·√12`.
    Margin2,
}

impl Margin {
    pub fn sample(self, rng: &mut StreamRng) -> f64 {
        match self {
            Margin::Margin1 => {
                let chi: f64 = ChiSquared::new(1.0).expect("valid dof").sample(rng);
                (chi - 1.0) / std::f64::consts::SQRT_2
            }
            Margin::Margin2 => (rng.random::<f64>() - 0.5) * 12f64.sqrt(),
        }
    }
}

/// Whether `A`, `β`, `ρᵢ`, `σᵢ²` are redrawn every replication or drawn
/// once from the study seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nuisance {
    Redraw,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub model: DgpModel,
    pub n_control: usize,
    pub n_pre: usize,
    pub n_treated: usize,
    pub n_post: usize,
    pub error_case: ErrorCase,
    pub margin: Margin,
    pub r_true: usize,
    pub delta: f64,
    /// Multiplies every idiosyncratic error.
    pub noise_scale: f64,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(model: DgpModel, error_case: ErrorCase, margin: Margin, n_pre: usize, n_control: usize) -> Self {
        Self {
            model,
            n_control,
            n_pre,
            n_treated: 1,
            n_post: 5,
            error_case,
            margin,
            r_true: 3,
            delta: 1.0,
            noise_scale: 1.0,
            nuisance: Nuisance::Redraw,
            seed: 0,
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_control + self.n_treated
    }

    pub fn n_periods(&self) -> usize {
        self.n_pre + self.n_post
    }

    fn validate(&self) -> Result<()> {
        if self.n_control == 0 || self.n_pre == 0 || self.n_treated == 0 || self.n_post == 0 || self.r_true == 0 {
            return Err(Error::InvalidArgument("simulation dimensions must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument("noise scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// AR(1) errors `e_t = σ·√(1−ρ²)·v_t`, `v_t = ρ v_{t−1} + ε_t`, with a
/// burn-in so the returned path is stationary with variance `σ²`.
pub fn ar1_errors(rho: f64, sigma2: f64, margin: Margin, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(Error::InvalidArgument(format!("AR coefficient {rho} must satisfy |rho| < 1")));
    }
    if sigma2.is_nan() || sigma2 < 0.0 {
        return Err(Error::InvalidArgument("error variance must be non-negative".into()));
    }
    let scale = (sigma2 * (1.0 - rho * rho)).sqrt();
    let mut v = 0.0;
    let mut out = Vec::with_capacity(n);
    for t in 0..BURN_IN + n {
        v = rho * v + margin.sample(rng);
        if t >= BURN_IN {
            out.push(v * scale);
        }
    }
    Ok(out)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    // Row-major fill so the draw order follows rows.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

struct NuisanceDraw {
    a: DMatrix<f64>,
    beta: DVector<f64>,
    rho: Vec<f64>,
    sigma2: Vec<f64>,
}

fn draw_nuisance(cfg: &DgpConfig, rng: &mut StreamRng) -> NuisanceDraw {
    let n = cfg.n_units();
    let a = normal_matrix(2, 2, rng);
    let beta = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
    let (rho, sigma2) = match cfg.error_case {
        ErrorCase::Case1 => (vec![0.0; n], vec![1.0; n]),
        ErrorCase::Case2 => {
            let ln = LogNormal::new(0.0, 1.0).expect("valid lognormal");
            let mut rho = Vec::with_capacity(n);
            let mut s2 = Vec::with_capacity(n);
            for _ in 0..n {
                let mag = rng.random_range(0.2..0.8);
                rho.push(if rng.random::<bool>() { mag } else { -mag });
                s2.push(ln.sample(rng));
            }
            (rho, s2)
        }
    };
    NuisanceDraw { a, beta, rho, sigma2 }
}

/// A simulated panel with its planted quantities.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub panel: PanelData,
    /// True effects on the missing block, block-local.
    pub truth: DMatrix<f64>,
    /// Outcomes without the treatment effect.
    pub latent: DMatrix<f64>,
    /// `F Λᵀ`.
    pub common: DMatrix<f64>,
    pub errors: DMatrix<f64>,
    pub beta: Option<DVector<f64>>,
}

/// Draw one panel. The treated block is the last `n_treated` units over the
/// last `n_post` periods.
pub fn generate_dgp(cfg: &DgpConfig, rng: &mut StreamRng) -> Result<Simulated> {
    cfg.validate()?;
    let (t, n) = (cfg.n_periods(), cfg.n_units());
    let f = normal_matrix(t, cfg.r_true, rng);
    let lambda = normal_matrix(n, cfg.r_true, rng);
    let common = &f * lambda.transpose();
    let nuisance = match cfg.nuisance {
        Nuisance::Redraw => draw_nuisance(cfg, rng),
        Nuisance::Fixed => draw_nuisance(cfg, &mut substream(cfg.seed, &[tag::NUISANCE])),
    };

    let mut latent = common.clone();
    let (covariates, beta) = match cfg.model {
        DgpModel::Dgp1 => (None, None),
        DgpModel::Dgp2 => {
            let mut x1 = DMatrix::zeros(t, n);
            let mut x2 = DMatrix::zeros(t, n);
            for i in 0..n {
                for tt in 0..t {
                    let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = &nuisance.a * z;
                    x1[(tt, i)] = x[0];
                    x2[(tt, i)] = x[1];
                }
            }
            latent += &x1 * nuisance.beta[0] + &x2 * nuisance.beta[1];
            (Some(vec![x1, x2]), Some(nuisance.beta.clone()))
        }
    };

    let mut errors = DMatrix::zeros(t, n);
    for i in 0..n {
        let e = ar1_errors(nuisance.rho[i], nuisance.sigma2[i], cfg.margin, t, rng)?;
        for (tt, v) in e.into_iter().enumerate() {
            errors[(tt, i)] = v * cfg.noise_scale;
        }
    }
    latent += &errors;

    let mut observed = latent.clone();
    for i in cfg.n_control..n {
        for tt in cfg.n_pre..t {
            observed[(tt, i)] += cfg.delta;
        }
    }
    let panel = PanelData::from_block(observed, cfg.n_control, cfg.n_pre, covariates)?;
    let truth = DMatrix::from_element(cfg.n_post, cfg.n_treated, cfg.delta);
    Ok(Simulated { panel, truth, latent, common, errors, beta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMode {
    Known,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Eq,
    Sy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStudy {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub alphas: Vec<f64>,
    pub factor_mode: FactorMode,
    /// Multiplier block width; `None` uses the error case default.
    pub block_width: Option<usize>,
    /// Bartlett lag; `None` uses the default rule.
    pub bandwidth: Option<usize>,
    pub rmax: usize,
}

impl CoverageStudy {
    pub fn new(dgp: DgpConfig, reps: usize, factor_mode: FactorMode) -> Self {
        Self {
            dgp,
            reps,
            alphas: vec![0.10, 0.05],
            factor_mode,
            block_width: None,
            bandwidth: None,
            rmax: DEFAULT_RMAX,
        }
    }

    pub fn block_width(&self) -> usize {
        self.block_width.unwrap_or_else(|| self.dgp.error_case.default_block_width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageCell {
    pub alpha: f64,
    pub family: Family,
    /// Post-treatment period offset, 1-based.
    pub period_offset: usize,
    pub coverage_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageTable {
    pub study: CoverageStudy,
    pub cells: Vec<CoverageCell>,
    /// Successful replications.
    pub completed: usize,
    pub failures: usize,
    /// How often each factor count was used, indexed by `r`.
    pub r_histogram: Vec<usize>,
}

impl CoverageTable {
    pub fn coverage(&self, alpha: f64, family: Family, period_offset: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| (c.alpha - alpha).abs() < 1e-12 && c.family == family && c.period_offset == period_offset)
            .map(|c| c.coverage_pct)
    }
}

struct Replication {
    delta: DMatrix<f64>,
    std_err: DMatrix<f64>,
    stats: DMatrix<f64>,
    truth: DMatrix<f64>,
    r: usize,
}

fn choose_r(study: &CoverageStudy, panel: &PanelData) -> Result<usize> {
    match study.factor_mode {
        FactorMode::Known => Ok(study.dgp.r_true),
        FactorMode::Estimated => {
            Ok(estimate_panel_factors(panel, study.rmax, FactorCountMethod::Baseline)?.r_hat.max(1))
        }
    }
}

fn replicate(study: &CoverageStudy, rep: usize) -> Result<Replication> {
    let dgp = &study.dgp;
    let mut rng = substream(dgp.seed, &[tag::DGP, rep as u64]);
    let sim = generate_dgp(dgp, &mut rng)?;
    let panel = &sim.panel;
    let r = choose_r(study, panel)?;
    let bandwidth = study.bandwidth.unwrap_or_else(|| default_bandwidth(panel.n_pre()));
    let model = match dgp.model {
        DgpModel::Dgp1 => Model::PureFactor,
        DgpModel::Dgp2 => Model::Covariates(IfeeOptions::default()),
    };
    let est = estimate_panel(panel, r, bandwidth, model)?;
    let block_width = study.block_width();
    let boot_seed = derive_seed(dgp.seed, &[tag::BOOTSTRAP]);
    let (stats, _) = draw_with_retry(boot_seed, rep, |rng| {
        bootstrap_draw(&est.fit.completed, &est.effects.residuals, r, bandwidth, block_width, rng)
    })?;
    Ok(Replication { delta: est.effects.delta, std_err: est.effects.std_err, stats, truth: sim.truth, r })
}

/// Run the warp-speed coverage study. Fails when more than 1% of the
/// replications fail.
pub fn run_coverage_study(study: &CoverageStudy) -> Result<CoverageTable> {
    if study.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if study.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::InvalidArgument("alpha levels must lie in (0, 1)".into()));
    }
    let outcomes: Vec<Result<Replication>> = (0..study.reps).into_par_iter().map(|k| replicate(study, k)).collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures * 100 > study.reps {
        return Err(Error::FailureRateExceeded { failures, reps: study.reps });
    }
    let reps: Vec<Replication> = outcomes.into_iter().filter_map(Result::ok).collect();
    if reps.is_empty() {
        return Err(Error::FailureRateExceeded { failures, reps: study.reps });
    }

    let mut r_histogram = vec![0; reps.iter().map(|r| r.r).max().unwrap_or(0) + 1];
    for rep in &reps {
        r_histogram[rep.r] += 1;
    }

    let (t1, n1) = (study.dgp.n_post, study.dgp.n_treated);
    let mut cells = Vec::new();
    for &alpha in &study.alphas {
        for family in [Family::Eq, Family::Sy] {
            for tb in 0..t1 {
                let mut hits = 0usize;
                for ib in 0..n1 {
                    let pooled: Vec<f64> = reps.iter().map(|r| r.stats[(tb, ib)]).collect();
                    let (ql, qu, p) = critical_values(&pooled, alpha)?;
                    for rep in &reps {
                        let ci = interval_from_quantiles(rep.delta[(tb, ib)], rep.std_err[(tb, ib)], ql, qu, p);
                        let truth = rep.truth[(tb, ib)];
                        let hit = match family {
                            Family::Eq => ci.eq_contains(truth),
                            Family::Sy => ci.sy_contains(truth),
                        };
                        hits += usize::from(hit);
                    }
                }
                cells.push(CoverageCell {
                    alpha,
                    family,
                    period_offset: tb + 1,
                    coverage_pct: 100.0 * hits as f64 / (reps.len() * n1) as f64,
                });
            }
        }
    }
    Ok(CoverageTable { study: study.clone(), cells, completed: reps.len(), failures, r_histogram })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_rejects_unit_root() {
        let mut rng = substream(1, &[]);
        assert!(ar1_errors(1.0, 1.0, Margin::Margin1, 10, &mut rng).is_err());
        assert!(ar1_errors(-1.2, 1.0, Margin::Margin1, 10, &mut rng).is_err());
    }

    #[test]
    fn planted_effect_is_exact() {
        let cfg = DgpConfig::new(DgpModel::Dgp2, ErrorCase::Case2, Margin::Margin2, 20, 30);
        let sim = generate_dgp(&cfg, &mut substream(3, &[])).unwrap();
        let y = sim.panel.outcomes();
        for t in 20..25 {
            assert_eq!(y[(t, 30)] - sim.latent[(t, 30)], 1.0);
        }
        assert_eq!(sim.panel.num_covariates(), 2);
        assert_eq!(sim.panel.treated_cells().len(), 5);
    }

    #[test]
    fn fixed_nuisance_shares_beta() {
        let mut cfg = DgpConfig::new(DgpModel::Dgp2, ErrorCase::Case1, Margin::Margin1, 10, 12);
        cfg.nuisance = Nuisance::Fixed;
        let a = generate_dgp(&cfg, &mut substream(1, &[])).unwrap();
        let b = generate_dgp(&cfg, &mut substream(2, &[])).unwrap();
        assert_eq!(a.beta, b.beta);
        cfg.nuisance = Nuisance::Redraw;
        let c = generate_dgp(&cfg, &mut substream(1, &[])).unwrap();
        let d = generate_dgp(&cfg, &mut substream(2, &[])).unwrap();
        assert_ne!(c.beta, d.beta);
    }

    #[test]
    fn single_replication_is_all_or_nothing() {
        let cfg = DgpConfig::new(DgpModel::Dgp1, ErrorCase::Case1, Margin::Margin1, 20, 30);
        let table = run_coverage_study(&CoverageStudy::new(cfg, 1, FactorMode::Known)).unwrap();
        assert!(table.cells.iter().all(|c| c.coverage_pct == 0.0 || c.coverage_pct == 100.0));
        assert_eq!(table.cells.len(), 2 * 2 * 5);
    }
}
