//! Panel layout: the outcome matrix with its treated block, the control
//! ("tall") and pre-treatment ("wide") subsamples, and the order conditions
//! the factor estimator needs.
//!
//! Matrices are indexed `(t, i)`: row = period, column = unit, zero-based.
//! Control units occupy columns `0..n_control` and pre-treatment periods rows
//! `0..n_pre`; the missing block is rows `n_pre..T` × columns `n_control..N`.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::{Error, Result};

/// One long-format observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub unit: String,
    pub time: String,
    pub y: f64,
    pub treated: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    /// Outside the missing block; outcome observed without treatment.
    Observed,
    /// Inside the missing block and treated.
    Treated,
    /// Inside the missing block but the unit's own intervention has not
    /// started yet. A counterfactual is produced, the cell is not an effect.
    PreInterventionInBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    outcomes: DMatrix<f64>,
    treated: DMatrix<bool>,
    n_control: usize,
    n_pre: usize,
    covariates: Option<Vec<DMatrix<f64>>>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl PanelData {
    /// Assemble and validate a panel whose columns are already ordered with
    /// controls first.
    pub fn new(
        outcomes: DMatrix<f64>,
        treated: DMatrix<bool>,
        n_control: usize,
        n_pre: usize,
        covariates: Option<Vec<DMatrix<f64>>>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = outcomes.shape();
        if treated.shape() != (t, n) {
            return Err(Error::InvalidPanel("treated mask shape differs from outcomes".into()));
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(Error::InvalidPanel("label count differs from matrix shape".into()));
        }
        if n_control == 0 {
            return Err(Error::NoControlUnits);
        }
        if n_pre == 0 {
            return Err(Error::NoPreTreatmentPeriod);
        }
        if n_control >= n {
            return Err(Error::NoTreatedUnits);
        }
        if n_pre >= t {
            return Err(Error::InvalidPanel("no post-treatment period".into()));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcomes"));
        }
        for tt in 0..t {
            for i in 0..n {
                if treated[(tt, i)] && (tt < n_pre || i < n_control) {
                    return Err(Error::InvalidPanel(format!(
                        "treated cell (unit {}, time {}) outside the missing block",
                        unit_labels[i], time_labels[tt]
                    )));
                }
            }
        }
        if !(n_control..n).any(|i| treated[(n_pre, i)]) {
            return Err(Error::InvalidPanel("missing block starts before the earliest intervention".into()));
        }
        for i in n_control..n {
            if !(n_pre..t).any(|tt| treated[(tt, i)]) {
                return Err(Error::InvalidPanel(format!(
                    "unit {} in the treated block is never treated",
                    unit_labels[i]
                )));
            }
        }
        if let Some(xs) = &covariates {
            if xs.is_empty() {
                return Err(Error::CovariateDimension { expected: 1, found: 0 });
            }
            for x in xs {
                if x.shape() != (t, n) {
                    return Err(Error::InvalidPanel("covariate shape differs from outcomes".into()));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("covariates"));
                }
            }
        }
        Ok(Self { outcomes, treated, n_control, n_pre, covariates, unit_labels, time_labels })
    }

    /// Panel whose whole missing block is treated, with numeric labels
    /// `1..=N` and `1..=T`.
    pub fn from_block(
        outcomes: DMatrix<f64>,
        n_control: usize,
        n_pre: usize,
        covariates: Option<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let (t, n) = outcomes.shape();
        let treated = DMatrix::from_fn(t, n, |tt, i| tt >= n_pre && i >= n_control);
        let units = (1..=n).map(|i| i.to_string()).collect();
        let times = (1..=t).map(|i| i.to_string()).collect();
        Self::new(outcomes, treated, n_control, n_pre, covariates, units, times)
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }
    pub fn treated_mask(&self) -> &DMatrix<bool> {
        &self.treated
    }
    pub fn covariates(&self) -> Option<&[DMatrix<f64>]> {
        self.covariates.as_deref()
    }
    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }
    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }
    pub fn n_units(&self) -> usize {
        self.outcomes.ncols()
    }
    pub fn n_periods(&self) -> usize {
        self.outcomes.nrows()
    }
    pub fn n_control(&self) -> usize {
        self.n_control
    }
    pub fn n_pre(&self) -> usize {
        self.n_pre
    }
    pub fn n_treated(&self) -> usize {
        self.n_units() - self.n_control
    }
    pub fn n_post(&self) -> usize {
        self.n_periods() - self.n_pre
    }
    pub fn num_covariates(&self) -> usize {
        self.covariates.as_ref().map_or(0, Vec::len)
    }

    pub fn in_missing_block(&self, t: usize, i: usize) -> bool {
        t >= self.n_pre && i >= self.n_control
    }

    pub fn cell_status(&self, t: usize, i: usize) -> CellStatus {
        match (self.in_missing_block(t, i), self.treated[(t, i)]) {
            (false, _) => CellStatus::Observed,
            (true, true) => CellStatus::Treated,
            (true, false) => CellStatus::PreInterventionInBlock,
        }
    }

    /// Covariate vector `x_{i,t}`, if the panel carries covariates.
    pub fn covariate(&self, t: usize, i: usize) -> Option<DVector<f64>> {
        self.covariates.as_ref().map(|xs| DVector::from_iterator(xs.len(), xs.iter().map(|x| x[(t, i)])))
    }

    /// Cells `(t, i)` with an active treatment, ordered unit-major.
    pub fn treated_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in self.n_control..self.n_units() {
            for t in self.n_pre..self.n_periods() {
                if self.treated[(t, i)] {
                    out.push((t, i));
                }
            }
        }
        out
    }

    /// Same geometry and labels, new outcome values.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        if outcomes.shape() != self.outcomes.shape() {
            return Err(Error::InvalidPanel("outcome shape mismatch".into()));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcomes"));
        }
        Ok(Self { outcomes, ..self.clone() })
    }

    /// Flatten back to long format, in column (unit) then period order.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(self.outcomes.len());
        for i in 0..self.n_units() {
            for t in 0..self.n_periods() {
                out.push(Record {
                    unit: self.unit_labels[i].clone(),
                    time: self.time_labels[t].clone(),
                    y: self.outcomes[(t, i)],
                    treated: self.treated[(t, i)],
                    covariates: self
                        .covariates
                        .as_ref()
                        .map(|xs| xs.iter().map(|x| x[(t, i)]).collect())
                        .unwrap_or_default(),
                });
            }
        }
        out
    }
}

fn sort_times(times: &mut [String]) {
    let numeric: Option<Vec<f64>> = times.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => times.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.total_cmp(&y)
        }),
        None => times.sort(),
    }
}

/// Build a panel from long-format records.
///
/// Units keep their order of first appearance, with never-treated units moved
/// in front of treated ones. Times sort numerically when every token parses
/// as a number, lexicographically otherwise. The pre-treatment length is the
/// number of periods before the earliest intervention.
pub fn build_panel(records: &[Record]) -> Result<PanelData> {
    if records.is_empty() {
        return Err(Error::InvalidPanel("no records".into()));
    }
    let p = records[0].covariates.len();
    let mut units: Vec<String> = Vec::new();
    let mut unit_seen: HashSet<&str> = HashSet::new();
    let mut times: Vec<String> = Vec::new();
    let mut time_seen: HashSet<&str> = HashSet::new();
    let mut cells: HashMap<(&str, &str), &Record> = HashMap::with_capacity(records.len());
    for rec in records {
        if rec.covariates.len() != p {
            return Err(Error::CovariateDimension { expected: p, found: rec.covariates.len() });
        }
        if unit_seen.insert(&rec.unit) {
            units.push(rec.unit.clone());
        }
        if time_seen.insert(&rec.time) {
            times.push(rec.time.clone());
        }
        if cells.insert((&rec.unit, &rec.time), rec).is_some() {
            return Err(Error::DuplicateObservation { unit: rec.unit.clone(), time: rec.time.clone() });
        }
    }
    sort_times(&mut times);
    for u in &units {
        for t in &times {
            if !cells.contains_key(&(u.as_str(), t.as_str())) {
                return Err(Error::IncompleteGrid { unit: u.clone(), time: t.clone() });
            }
        }
    }

    let is_treated = |u: &str| times.iter().any(|t| cells[&(u, t.as_str())].treated);
    let (treated_units, control_units): (Vec<String>, Vec<String>) = units.iter().cloned().partition(|u| is_treated(u));
    if treated_units.is_empty() {
        return Err(Error::NoTreatedUnits);
    }
    if control_units.is_empty() {
        return Err(Error::NoControlUnits);
    }
    let earliest = times
        .iter()
        .position(|t| treated_units.iter().any(|u| cells[&(u.as_str(), t.as_str())].treated))
        .expect("treated unit has a treated period");
    if earliest == 0 {
        return Err(Error::NoPreTreatmentPeriod);
    }

    let n_control = control_units.len();
    let ordered: Vec<String> = control_units.into_iter().chain(treated_units).collect();
    let (nt, nn) = (times.len(), ordered.len());
    let cell = |t: usize, i: usize| cells[&(ordered[i].as_str(), times[t].as_str())];
    let outcomes = DMatrix::from_fn(nt, nn, |t, i| cell(t, i).y);
    let treated = DMatrix::from_fn(nt, nn, |t, i| cell(t, i).treated);
    let covariates =
        (p > 0).then(|| (0..p).map(|k| DMatrix::from_fn(nt, nn, |t, i| cell(t, i).covariates[k])).collect());
    PanelData::new(outcomes, treated, n_control, earliest, covariates, ordered, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    /// All periods × control units.
    Tall,
    /// Pre-treatment periods × all units.
    Wide,
}

#[derive(Debug, Clone)]
pub struct SubsampleView {
    pub kind: ViewKind,
    pub matrix: DMatrix<f64>,
    pub covariates: Option<Vec<DMatrix<f64>>>,
}

impl SubsampleView {
    /// `(rows, cols, p)` of the covariate slice.
    pub fn covariate_shape(&self) -> Option<(usize, usize, usize)> {
        self.covariates.as_ref().map(|xs| (self.matrix.nrows(), self.matrix.ncols(), xs.len()))
    }
}

pub fn tall_view(panel: &PanelData) -> SubsampleView {
    let (t, n0) = (panel.n_periods(), panel.n_control());
    SubsampleView {
        kind: ViewKind::Tall,
        matrix: panel.outcomes().columns(0, n0).into_owned(),
        covariates: panel.covariates().map(|xs| xs.iter().map(|x| x.view((0, 0), (t, n0)).into_owned()).collect()),
    }
}

pub fn wide_view(panel: &PanelData) -> SubsampleView {
    let (t0, n) = (panel.n_pre(), panel.n_units());
    SubsampleView {
        kind: ViewKind::Wide,
        matrix: panel.outcomes().rows(0, t0).into_owned(),
        covariates: panel.covariates().map(|xs| xs.iter().map(|x| x.view((0, 0), (t0, n)).into_owned()).collect()),
    }
}

/// Whether `T·N0 > r(T+N0)` and `T0·N > r(T0+N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderConditionReport {
    pub r: usize,
    pub tall_lhs: usize,
    pub tall_rhs: usize,
    pub wide_lhs: usize,
    pub wide_rhs: usize,
}

impl OrderConditionReport {
    pub fn tall_ok(&self) -> bool {
        self.tall_lhs > self.tall_rhs || self.r == 0
    }
    pub fn wide_ok(&self) -> bool {
        self.wide_lhs > self.wide_rhs || self.r == 0
    }
    pub fn passed(&self) -> bool {
        self.tall_ok() && self.wide_ok()
    }

    /// Escalate a failing report into an error.
    pub fn require(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        Err(Error::OrderCondition {
            r: self.r,
            detail: format!(
                "T*N0 = {} vs r(T+N0) = {}; T0*N = {} vs r(T0+N) = {}",
                self.tall_lhs, self.tall_rhs, self.wide_lhs, self.wide_rhs
            ),
        })
    }
}

pub fn validate_order_conditions(panel: &PanelData, r: usize) -> OrderConditionReport {
    order_conditions(panel.n_periods(), panel.n_units(), panel.n_pre(), panel.n_control(), r)
}

pub fn order_conditions(t: usize, n: usize, t0: usize, n0: usize, r: usize) -> OrderConditionReport {
    OrderConditionReport { r, tall_lhs: t * n0, tall_rhs: r * (t + n0), wide_lhs: t0 * n, wide_rhs: r * (t0 + n) }
}
