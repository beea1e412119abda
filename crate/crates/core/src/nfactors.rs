//! Selection of the number of factors by an information criterion.
//!
//! Baseline criterion, for `k = 0..=rmax`:
//!
//! ```text
//! IC(k) = ln V(k) + c · k · ((N + T) / (N T)) · ln(min(N, T))
//! ```
//!
//! where `V(k)` is the mean squared residual after removing the first `k`
//! principal components and `c = 1`. The calibrated variant sweeps `c` over a
//! grid, recomputes the selection on nested random subsamples, and uses the
//! first non-trivial range of `c` over which every subsample agrees.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::Serialize;

use crate::effects::covariate_index;
use crate::ifee::start_beta;
use crate::linalg::singular_values;
use crate::panel::{tall_view, PanelData};
use crate::rng::{substream, tag};
use crate::{Error, Result};

pub const DEFAULT_RMAX: usize = 8;

const SUBSAMPLES: usize = 30;
const MIN_FRACTION: f64 = 0.7;
const PENALTY_GRID_STEP: f64 = 0.01;
const PENALTY_GRID_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FactorCountMethod {
    Baseline,
    Calibrated { seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorCountEstimate {
    pub r_hat: usize,
    /// `IC(k)` for `k = 0..=rmax`.
    pub criterion_values: Vec<f64>,
    pub method: FactorCountMethod,
    /// Penalty multiplier `c` the criterion values were computed with.
    pub penalty_scale: f64,
}

/// Mean squared residuals `V(0..=rmax)` from the singular values of an
/// `t × n` matrix.
fn residual_variances(sv: &[f64], t: usize, n: usize, rmax: usize) -> Vec<f64> {
    let nt = (t * n) as f64;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut out = Vec::with_capacity(rmax + 1);
    let mut removed = 0.0;
    for k in 0..=rmax {
        if k > 0 {
            removed += sv.get(k - 1).map_or(0.0, |s| s * s);
        }
        out.push(((total - removed) / nt).max(0.0));
    }
    out
}

fn penalty(t: usize, n: usize) -> f64 {
    let (tf, nf) = (t as f64, n as f64);
    (nf + tf) / (nf * tf) * tf.min(nf).ln()
}

fn criterion(v: &[f64], pen: f64, scale: f64) -> Vec<f64> {
    v.iter().enumerate().map(|(k, vk)| vk.ln() + scale * k as f64 * pen).collect()
}

fn argmin(values: &[f64]) -> usize {
    values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k)
}

struct Spectrum {
    v: Vec<f64>,
    pen: f64,
}

impl Spectrum {
    fn of(y: &DMatrix<f64>, rmax: usize) -> Result<Self> {
        let (t, n) = y.shape();
        let sv = singular_values(y)?;
        Ok(Self { v: residual_variances(&sv, t, n, rmax), pen: penalty(t, n) })
    }

    fn select(&self, scale: f64) -> usize {
        argmin(&criterion(&self.v, self.pen, scale))
    }
}

pub fn estimate_num_factors(y: &DMatrix<f64>, rmax: usize, method: FactorCountMethod) -> Result<FactorCountEstimate> {
    let (t, n) = y.shape();
    if t < 2 || n < 2 || rmax + 1 > t.min(n) {
        return Err(Error::InvalidArgument(format!("rmax = {rmax} out of range for a {t} x {n} matrix")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("factor-count input"));
    }
    let full = Spectrum::of(y, rmax)?;
    let scale = match method {
        FactorCountMethod::Baseline => 1.0,
        FactorCountMethod::Calibrated { seed } => calibrate_penalty(y, rmax, &full, seed)?,
    };
    let criterion_values = criterion(&full.v, full.pen, scale);
    Ok(FactorCountEstimate { r_hat: argmin(&criterion_values), criterion_values, method, penalty_scale: scale })
}

/// Factor count for a panel, read off the control block. With covariates
/// the pooled least-squares fit is removed first. `rmax` is capped by the
/// control block's dimensions.
pub fn estimate_panel_factors(
    panel: &PanelData,
    rmax: usize,
    method: FactorCountMethod,
) -> Result<FactorCountEstimate> {
    let tall = tall_view(panel);
    let y = match tall.covariates.as_deref() {
        Some(xs) => &tall.matrix - covariate_index(xs, &start_beta(&tall.matrix, xs)?)?,
        None => tall.matrix,
    };
    let cap = y.nrows().min(y.ncols()).saturating_sub(1);
    estimate_num_factors(&y, rmax.min(cap), method)
}

fn calibrate_penalty(y: &DMatrix<f64>, rmax: usize, full: &Spectrum, seed: u64) -> Result<f64> {
    let (t, n) = y.shape();
    let mut rng = substream(seed, &[tag::NFACTORS]);
    let min_dim = rmax + 2;
    let mut subsamples = Vec::with_capacity(SUBSAMPLES);
    for j in 0..SUBSAMPLES {
        let frac = MIN_FRACTION + (1.0 - MIN_FRACTION) * j as f64 / (SUBSAMPLES - 1) as f64;
        let tj = ((t as f64 * frac).round() as usize).clamp(min_dim.min(t), t);
        let nj = ((n as f64 * frac).round() as usize).clamp(min_dim.min(n), n);
        let mut cols = sample(&mut rng, n, nj).into_vec();
        cols.sort_unstable();
        let sub = DMatrix::from_fn(tj, nj, |r, c| y[(r, cols[c])]);
        subsamples.push(Spectrum::of(&sub, rmax.min(tj.min(nj) - 1))?);
    }

    let steps = (PENALTY_GRID_MAX / PENALTY_GRID_STEP).round() as usize;
    let grid: Vec<f64> = (1..=steps).map(|s| s as f64 * PENALTY_GRID_STEP).collect();
    let stable: Vec<Option<usize>> = grid
        .iter()
        .map(|&c| {
            let r0 = full.select(c);
            subsamples.iter().all(|s| s.select(c) == r0).then_some(r0)
        })
        .collect();

    // First run of at least two consecutive stable grid points whose
    // selection is below rmax; its midpoint is the calibrated scale.
    let mut idx = 0;
    while idx < grid.len() {
        match stable[idx] {
            Some(r0) if r0 < rmax => {
                let mut end = idx;
                while end + 1 < grid.len() && stable[end + 1] == Some(r0) {
                    end += 1;
                }
                if end > idx {
                    return Ok(grid[(idx + end) / 2]);
                }
                idx = end + 1;
            }
            _ => idx += 1,
        }
    }
    Ok(1.0)
}
