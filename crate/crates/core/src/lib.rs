//! Counterfactual treatment-effect estimation for panels with interactive
//! fixed effects.
//!
//! The outcome panel is split into a fully observed control block (all
//! periods, never-treated units) and a pre-treatment block (all units, periods
//! before the earliest intervention). Principal-component factor fits on the
//! two blocks are aligned through the shared control loadings to complete the
//! missing treated/post-treatment block. Residual-based wild or block-wild
//! bootstrap draws then calibrate equal-tailed and symmetric confidence
//! intervals for every treated cell.
//!
//! Module map:
//! - [`panel`]: panel layout, subsample views, order conditions.
//! - [`factor`]: principal-component factors and factor-based completion.
//! - [`effects`]: residuals, variance components, point estimates.
//! - [`ifee`]: iterative interactive fixed effects estimation with covariates.
//! - [`nfactors`]: information-criterion selection of the factor count.
//! - [`bootstrap`]: resampling, studentized statistics, intervals.
//! - [`sim`]: simulation designs and the warp-speed coverage study.
//! - [`cli`]: CSV/JSON ingestion, result files, SVG plots.

pub mod bootstrap;
pub mod cli;
pub mod effects;
mod error;
pub mod factor;
pub mod ifee;
pub mod linalg;
pub mod nfactors;
pub mod panel;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
