//! Residual bootstrap for the treatment-effect confidence intervals.
//!
//! Each draw rebuilds a full outcome matrix `y* = ĉ + e*`: on the observed
//! region `e* = u·ê` with standard-normal (optionally block-constant)
//! multipliers `u`; on the missing block `e*` is drawn uniformly from the
//! treated unit's demeaned pre-treatment residuals. The pure factor
//! estimator is rerun on `y*` and the studentized statistic
//! `s* = (ĉ* − y*) / √(V̂* + σ̂*²)` is recorded on every missing-block cell.
//! The covariate model bootstraps the same way around its factor component;
//! the slope is never re-estimated here.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::effects::{effects_from_parts, EffectEstimates, ResidualMatrix};
use crate::factor::{complete_from_matrix, CompletionFit};
use crate::rng::{substream, tag, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    /// Number of bootstrap draws `B`.
    pub n_draws: usize,
    /// Nominal non-coverage `α`.
    pub alpha: f64,
    /// Multiplier block width; 1 is the ordinary wild bootstrap.
    pub block_width: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_draws: 399, alpha: 0.05, block_width: 1, seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::InvalidArgument("number of bootstrap draws must be positive".into()));
        }
        check_alpha(self.alpha)?;
        if self.block_width == 0 {
            return Err(Error::InvalidArgument("block width must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in (0, 1)")))
    }
}

/// Multipliers on the observed region, zero on the missing block.
///
/// Unit `i` is observed for `T` periods (controls) or `T0` periods (treated).
/// With `block_width = b > 1` one normal draw is shared by each run of `b`
/// consecutive periods, tiled from the first period; the last block may be
/// short. Draws are consumed unit by unit.
pub fn draw_multipliers(
    n_periods: usize,
    n_units: usize,
    n_control: usize,
    n_pre: usize,
    block_width: usize,
    rng: &mut StreamRng,
) -> DMatrix<f64> {
    let b = block_width.max(1);
    let mut u = DMatrix::zeros(n_periods, n_units);
    for i in 0..n_units {
        let len = if i < n_control { n_periods } else { n_pre };
        let mut t = 0;
        while t < len {
            let z: f64 = rng.sample(StandardNormal);
            for s in t..(t + b).min(len) {
                u[(s, i)] = z;
            }
            t += b;
        }
    }
    u
}

/// Bootstrap errors on the whole panel.
pub fn resample_errors(residuals: &ResidualMatrix, multipliers: &DMatrix<f64>, rng: &mut StreamRng) -> DMatrix<f64> {
    let (t, n) = residuals.shape();
    let (n0, t0) = (residuals.n_control(), residuals.n_pre());
    let mut e = residuals.to_dense().component_mul(multipliers);
    for i in n0..n {
        let pre = residuals.pre_treatment(i);
        let mean = pre.iter().sum::<f64>() / pre.len() as f64;
        let donors: Vec<f64> = pre.iter().map(|v| v - mean).collect();
        for tt in t0..t {
            e[(tt, i)] = donors[rng.random_range(0..donors.len())];
        }
    }
    e
}

/// One bootstrap replicate of the studentized statistics, block-local.
pub fn bootstrap_draw(
    completed: &DMatrix<f64>,
    residuals: &ResidualMatrix,
    r: usize,
    bandwidth: usize,
    block_width: usize,
    rng: &mut StreamRng,
) -> Result<DMatrix<f64>> {
    let (t, n) = completed.shape();
    let (n0, t0) = (residuals.n_control(), residuals.n_pre());
    let u = draw_multipliers(t, n, n0, t0, block_width, rng);
    let e_star = resample_errors(residuals, &u, rng);
    let y_star = completed + e_star;
    let fit = complete_from_matrix(&y_star, n0, t0, r)?;
    let (eff, _) = effects_from_parts(&y_star, None, &fit, n0, t0, bandwidth)?;
    // ĉ* − y* = −Δ̂* on the block.
    let stats = DMatrix::from_fn(eff.delta.nrows(), eff.delta.ncols(), |a, b| -eff.delta[(a, b)] / eff.std_err[(a, b)]);
    if stats.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("bootstrap statistic"));
    }
    Ok(stats)
}

fn is_degenerate(err: &Error) -> bool {
    matches!(
        err,
        Error::LoadingDegeneracy { .. } | Error::SingularNormalization | Error::SvdFailure | Error::NonFinite(_)
    )
}

/// Run draw `index` with a single redraw on degeneracy. Returns the
/// statistics and whether a redraw was needed.
pub fn draw_with_retry(
    seed: u64,
    index: usize,
    mut run: impl FnMut(&mut StreamRng) -> Result<DMatrix<f64>>,
) -> Result<(DMatrix<f64>, bool)> {
    for attempt in 0..2u64 {
        let mut rng = substream(seed, &[tag::BOOTSTRAP, index as u64, attempt]);
        match run(&mut rng) {
            Ok(s) => return Ok((s, attempt > 0)),
            Err(e) if is_degenerate(&e) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::BootstrapDegeneracy { draw: index })
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapDiagnostics {
    pub draws: usize,
    /// Draws that degenerated once and were redrawn.
    pub redrawn: usize,
}

#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    n_post: usize,
    /// Per block cell (column-major over post periods × treated units),
    /// the `B` statistics in draw order.
    stats: Vec<Vec<f64>>,
    pub diagnostics: BootstrapDiagnostics,
}

impl BootstrapDraws {
    pub fn from_replicates(replicates: &[DMatrix<f64>], redrawn: usize) -> Self {
        let (t1, n1) = replicates.first().map_or((0, 0), |m| m.shape());
        let mut stats = vec![Vec::with_capacity(replicates.len()); t1 * n1];
        for m in replicates {
            for (k, v) in m.iter().enumerate() {
                stats[k].push(*v);
            }
        }
        Self { n_post: t1, stats, diagnostics: BootstrapDiagnostics { draws: replicates.len(), redrawn } }
    }

    /// Statistics for block cell `(t − T0, i − N0)`.
    pub fn cell(&self, tb: usize, ib: usize) -> &[f64] {
        &self.stats[ib * self.n_post + tb]
    }

    pub fn n_draws(&self) -> usize {
        self.diagnostics.draws
    }
}

/// `B` bootstrap draws of `s*` for every cell in the missing block.
pub fn bootstrap_statistics(
    fit: &CompletionFit,
    effects: &EffectEstimates,
    cfg: &BootstrapConfig,
    bandwidth: usize,
) -> Result<BootstrapDraws> {
    cfg.validate()?;
    let r = fit.rank();
    let results: Vec<Result<(DMatrix<f64>, bool)>> = (0..cfg.n_draws)
        .into_par_iter()
        .map(|b| {
            draw_with_retry(cfg.seed, b, |rng| {
                bootstrap_draw(&fit.completed, &effects.residuals, r, bandwidth, cfg.block_width, rng)
            })
        })
        .collect();
    let mut replicates = Vec::with_capacity(cfg.n_draws);
    let mut redrawn = 0;
    for res in results {
        let (s, again) = res?;
        redrawn += usize::from(again);
        replicates.push(s);
    }
    Ok(BootstrapDraws::from_replicates(&replicates, redrawn))
}

/// The `⌈λB⌉`-th smallest value (1-based), with `λB` rounded to absorb
/// floating-point noise in the product.
pub fn empirical_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empirical quantile of an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {level} must lie in (0, 1)")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let rank = ((level * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellInterval {
    pub eq_lower: f64,
    pub eq_upper: f64,
    pub sy_lower: f64,
    pub sy_upper: f64,
    /// `q_{α/2}`.
    pub q_lower: f64,
    /// `q_{1−α/2}`.
    pub q_upper: f64,
    /// `p_{1−α}` from `|s*|`.
    pub p_sym: f64,
}

impl CellInterval {
    pub fn eq_contains(&self, v: f64) -> bool {
        self.eq_lower <= v && v <= self.eq_upper
    }
    pub fn sy_contains(&self, v: f64) -> bool {
        self.sy_lower <= v && v <= self.sy_upper
    }
}

/// Interval from precomputed critical values.
pub fn interval_from_quantiles(delta: f64, se: f64, q_lower: f64, q_upper: f64, p_sym: f64) -> CellInterval {
    CellInterval {
        eq_lower: delta + q_lower * se,
        eq_upper: delta + q_upper * se,
        sy_lower: delta - p_sym * se,
        sy_upper: delta + p_sym * se,
        q_lower,
        q_upper,
        p_sym,
    }
}

/// Critical values `(q_{α/2}, q_{1−α/2}, p_{1−α})` of a bootstrap sample.
pub fn critical_values(stats: &[f64], alpha: f64) -> Result<(f64, f64, f64)> {
    check_alpha(alpha)?;
    let abs: Vec<f64> = stats.iter().map(|s| s.abs()).collect();
    Ok((
        empirical_quantile(stats, alpha / 2.0)?,
        empirical_quantile(stats, 1.0 - alpha / 2.0)?,
        empirical_quantile(&abs, 1.0 - alpha)?,
    ))
}

#[derive(Debug, Clone)]
pub struct IntervalSet {
    pub alpha: f64,
    n_post: usize,
    cells: Vec<CellInterval>,
}

impl IntervalSet {
    pub fn cell(&self, tb: usize, ib: usize) -> &CellInterval {
        &self.cells[ib * self.n_post + tb]
    }
}

/// Equal-tailed and symmetric `1 − α` intervals on every block cell.
pub fn build_intervals(effects: &EffectEstimates, draws: &BootstrapDraws, alpha: f64) -> Result<IntervalSet> {
    let (t1, n1) = effects.delta.shape();
    let mut cells = Vec::with_capacity(t1 * n1);
    for ib in 0..n1 {
        for tb in 0..t1 {
            let (ql, qu, p) = critical_values(draws.cell(tb, ib), alpha)?;
            cells.push(interval_from_quantiles(effects.delta[(tb, ib)], effects.std_err[(tb, ib)], ql, qu, p));
        }
    }
    Ok(IntervalSet { alpha, n_post: t1, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn block_tiling() {
        let mut rng = substream(1, &[]);
        let u = draw_multipliers(8, 3, 2, 5, 2, &mut rng);
        let i = 2;
        assert_eq!(u[(0, i)], u[(1, i)]);
        assert_eq!(u[(2, i)], u[(3, i)]);
        assert_ne!(u[(3, i)], u[(4, i)]);
        assert_ne!(u[(1, i)], u[(2, i)]);
        for t in 5..8 {
            assert_eq!(u[(t, i)], 0.0);
        }
        // Controls are tiled over all periods.
        assert_eq!(u[(6, 0)], u[(7, 0)]);
    }

    #[test]
    fn multipliers_deterministic() {
        let a = draw_multipliers(10, 4, 3, 6, 1, &mut substream(9, &[2]));
        let b = draw_multipliers(10, 4, 3, 6, 1, &mut substream(9, &[2]));
        assert_eq!(a, b);
    }

    #[test]
    fn donor_support() {
        // Unit 1 is treated with pre residuals (1, 2, 3).
        let values = DMatrix::from_row_slice(5, 2, &[0.5, 1.0, -0.5, 2.0, 0.3, 3.0, 0.1, 0.0, 0.2, 0.0]);
        let res = ResidualMatrix::new(values, 1, 3);
        let u = DMatrix::from_element(5, 2, 1.0);
        for s in 0..50 {
            let e = resample_errors(&res, &u, &mut substream(s, &[]));
            for t in 3..5 {
                assert!([-1.0, 0.0, 1.0].contains(&e[(t, 1)]));
            }
            assert_eq!(e[(0, 0)], 0.5);
        }
    }

    #[test]
    fn quantile_convention() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(empirical_quantile(&v, 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&v, 0.975).unwrap(), 4.0);
        assert_eq!(empirical_quantile(&[5.0; 7], 0.3).unwrap(), 5.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(empirical_quantile(&twenty, 0.95).unwrap(), 19.0);
    }

    #[test]
    fn interval_substitution() {
        let c = interval_from_quantiles(1.0, 0.5, -1.8, 1.7, 1.6);
        assert!((c.eq_lower - 0.10).abs() < 1e-12 && (c.eq_upper - 1.85).abs() < 1e-12);
        assert!((c.sy_lower - 0.20).abs() < 1e-12 && (c.sy_upper - 1.80).abs() < 1e-12);
        let z = interval_from_quantiles(1.0, 0.5, 0.0, 0.0, 0.0);
        assert_eq!((z.eq_lower, z.eq_upper, z.sy_lower, z.sy_upper), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn resampling_never_refits_covariates() {
        let src = include_str!("bootstrap.rs");
        let needle = concat!("crate::", "ifee");
        assert!(!src.contains(needle));
    }
}
