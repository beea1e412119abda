#![allow(dead_code)]

use ife::bootstrap::{bootstrap_draw, critical_values, draw_multipliers, empirical_quantile, interval_from_quantiles};
use ife::effects::{bartlett_weight, default_bandwidth, estimate_panel, Model};
use ife::factor::{complete_matrix, pca_factors, FactorEstimate};
use ife::panel::{tall_view, wide_view};
use ife::rng::{substream, StreamRng};
use ife::sim::{generate_dgp, DgpConfig, DgpModel, ErrorCase, Margin};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

pub fn normal_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `F Λᵀ` with standard-normal factors and loadings.
pub fn low_rank(rng: &mut StreamRng, t: usize, n: usize, r: usize) -> DMatrix<f64> {
    normal_matrix(rng, t, r) * normal_matrix(rng, n, r).transpose()
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn quantile_monotone(values: &[f64], a: f64, b: f64) -> Check {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let (qa, qb) = (empirical_quantile(values, lo).unwrap(), empirical_quantile(values, hi).unwrap());
    ensure(qa <= qb, || format!("q({lo}) = {qa} > q({hi}) = {qb}"))
}

/// SY is centred on Δ̂ and contains it, EQ contains Δ̂ when its quantiles
/// straddle zero, and the 95% intervals contain the 90% ones.
pub fn interval_shape(stats: &[f64], delta: f64, se: f64) -> Check {
    let (ql, qu, p) = critical_values(stats, 0.10).unwrap();
    let narrow = interval_from_quantiles(delta, se, ql, qu, p);
    let (ql5, qu5, p5) = critical_values(stats, 0.05).unwrap();
    let wide = interval_from_quantiles(delta, se, ql5, qu5, p5);
    let tol = 1e-12 * (1.0 + delta.abs() + se * p5.abs());
    ensure(narrow.sy_contains(delta) && wide.sy_contains(delta), || "SY misses delta".into())?;
    ensure(((narrow.sy_lower + narrow.sy_upper) / 2.0 - delta).abs() <= tol, || "SY not centred".into())?;
    if ql <= 0.0 && 0.0 <= qu {
        ensure(narrow.eq_contains(delta), || "EQ misses delta with straddling quantiles".into())?;
    }
    ensure(wide.eq_lower <= narrow.eq_lower && narrow.eq_upper <= wide.eq_upper, || "EQ not nested".into())?;
    ensure(wide.sy_lower <= narrow.sy_lower && narrow.sy_upper <= wide.sy_upper, || "SY not nested".into())
}

fn flip(fit: &FactorEstimate, mask: u32) -> FactorEstimate {
    let mut out = fit.clone();
    for k in 0..fit.rank() {
        if mask >> k & 1 == 1 {
            out.factors.column_mut(k).neg_mut();
            out.loadings.column_mut(k).neg_mut();
        }
    }
    out
}

/// Flipping factor/loading column pairs of either subsample fit leaves the
/// completed matrix unchanged.
pub fn sign_flip_invariance(seed: u64, tall_mask: u32, wide_mask: u32) -> Check {
    let mut rng = substream(seed, &[]);
    let (t, n, t0, n0, r) = (
        rng.random_range(10..30),
        rng.random_range(10..30),
        rng.random_range(6..9),
        rng.random_range(6..9),
        rng.random_range(1..4),
    );
    let y = low_rank(&mut rng, t, n, r) + normal_matrix(&mut rng, t, n) * 0.3;
    let tall = pca_factors(&y.columns(0, n0).into_owned(), r).unwrap();
    let wide = pca_factors(&y.rows(0, t0).into_owned(), r).unwrap();
    let base = complete_matrix(&tall, &wide, n0).unwrap().completed;
    let flipped = complete_matrix(&flip(&tall, tall_mask), &flip(&wide, wide_mask), n0).unwrap().completed;
    let scale = base.amax().max(1.0);
    let err = (&base - &flipped).amax();
    ensure(err <= 1e-12 * scale, || format!("completion moved by {err:e} under sign flips"))
}

pub fn bartlett_identities(k: usize) -> Check {
    ensure(bartlett_weight(0, k) == 1.0, || "w0 != 1".into())?;
    for j in 1..=k {
        ensure(bartlett_weight(j, k) < bartlett_weight(j - 1, k), || format!("weights not decreasing at {j}"))?;
    }
    let last = bartlett_weight(k, k);
    ensure((last - 1.0 / (k as f64 + 1.0)).abs() < 1e-15 && last > 0.0, || format!("w_K = {last}"))
}

/// Scaling the completed matrix and residuals by `c` leaves every
/// bootstrap statistic unchanged for the same random stream.
pub fn s_star_scale_invariance(seed: u64, c: f64, block_width: usize) -> Check {
    let mut cfg = DgpConfig::new(DgpModel::Dgp1, ErrorCase::Case1, Margin::Margin1, 12, 15);
    cfg.n_post = 3;
    let sim = generate_dgp(&cfg, &mut substream(seed, &[1])).unwrap();
    let k = default_bandwidth(cfg.n_pre);
    let est = estimate_panel(&sim.panel, 3, k, Model::PureFactor).map_err(|e| e.to_string())?;
    let base =
        bootstrap_draw(&est.fit.completed, &est.effects.residuals, 3, k, block_width, &mut substream(seed, &[2]));
    let scaled = bootstrap_draw(
        &(&est.fit.completed * c),
        &est.effects.residuals.scaled(c),
        3,
        k,
        block_width,
        &mut substream(seed, &[2]),
    );
    match (base, scaled) {
        (Ok(a), Ok(b)) => {
            let err = (&a - &b).amax();
            ensure(err <= 1e-10 * (1.0 + a.amax()), || format!("s* moved by {err:e} under scaling by {c}"))
        }
        (Err(_), Err(_)) => Ok(()),
        _ => Err("scaling changed whether the draw degenerates".into()),
    }
}

/// Multipliers are constant within each block of `b` periods, tiled from
/// the first period, and zero on the missing block.
pub fn block_multipliers(seed: u64, t: usize, n: usize, n0: usize, t0: usize, b: usize) -> Check {
    let u = draw_multipliers(t, n, n0, t0, b, &mut substream(seed, &[]));
    for i in 0..n {
        let len = if i < n0 { t } else { t0 };
        for s in 0..t {
            if s >= len {
                ensure(u[(s, i)] == 0.0, || format!("nonzero multiplier at ({s},{i}) in the missing block"))?;
            } else if s % b != 0 {
                ensure(u[(s, i)] == u[(s - 1, i)], || format!("block broken at ({s},{i})"))?;
            } else if s > 0 {
                ensure(u[(s, i)] != u[(s - 1, i)], || format!("no fresh draw at block start ({s},{i})"))?;
            }
        }
    }
    Ok(())
}

/// The overlap of the two views is the same block of the outcome matrix.
pub fn views_agree(seed: u64) -> Check {
    let mut rng = substream(seed, &[]);
    let mut cfg = DgpConfig::new(
        DgpModel::Dgp2,
        ErrorCase::Case2,
        Margin::Margin2,
        rng.random_range(2..10),
        rng.random_range(2..10),
    );
    cfg.n_treated = rng.random_range(1..4);
    cfg.n_post = rng.random_range(1..4);
    let sim = generate_dgp(&cfg, &mut rng).unwrap();
    let (tall, wide) = (tall_view(&sim.panel), wide_view(&sim.panel));
    let (t0, n0) = (cfg.n_pre, cfg.n_control);
    ensure(tall.matrix.rows(0, t0) == wide.matrix.columns(0, n0), || "outcome overlap differs".into())?;
    let (xt, xw) = (tall.covariates.unwrap(), wide.covariates.unwrap());
    for (a, b) in xt.iter().zip(&xw) {
        ensure(a.rows(0, t0) == b.columns(0, n0), || "covariate overlap differs".into())?;
    }
    Ok(())
}
