//! The `ife` command line: panel estimation from CSV and coverage studies
//! from a JSON study file.
//!
//! Values from `--config` are read first and any flag given on the command
//! line replaces the corresponding field.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bootstrap::{bootstrap_statistics, build_intervals, BootstrapConfig, IntervalSet};
use crate::effects::{default_bandwidth, estimate_panel, Estimation, Model};
use crate::factor::CompletionSummary;
use crate::ifee::IfeeOptions;
use crate::nfactors::{estimate_panel_factors, FactorCountEstimate, FactorCountMethod, DEFAULT_RMAX};
use crate::panel::{build_panel, validate_order_conditions, CellStatus, PanelData, Record};
use crate::sim::{
    run_coverage_study, CoverageStudy, CoverageTable, DgpConfig, DgpModel, ErrorCase, FactorMode, Margin, Nuisance,
};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ife", version, about = "Counterfactual inference for panels with interactive fixed effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate treatment effects and bootstrap intervals from a panel CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo coverage study.
    Simulate(SimulateArgs),
}

/// `auto` or a fixed non-negative integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ChoiceRepr", into = "ChoiceRepr")]
pub enum Choice {
    Auto,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ChoiceRepr {
    Int(usize),
    Str(String),
}

impl TryFrom<ChoiceRepr> for Choice {
    type Error = String;
    fn try_from(v: ChoiceRepr) -> std::result::Result<Self, String> {
        match v {
            ChoiceRepr::Int(k) => Ok(Choice::Fixed(k)),
            ChoiceRepr::Str(s) => s.parse(),
        }
    }
}

impl From<Choice> for ChoiceRepr {
    fn from(c: Choice) -> Self {
        match c {
            Choice::Auto => ChoiceRepr::Str("auto".into()),
            Choice::Fixed(k) => ChoiceRepr::Int(k),
        }
    }
}

impl FromStr for Choice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Choice::Auto);
        }
        s.parse().map(Choice::Fixed).map_err(|_| format!("expected `auto` or an integer, got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlotFamily {
    Eq,
    Sy,
    None,
}

#[derive(Debug, clap::Args)]
pub struct EstimateArgs {
    /// JSON file with any of the fields below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Number of factors, or `auto`.
    #[arg(long)]
    pub r: Option<Choice>,
    /// Bartlett lag for the long-run variance, or `auto`.
    #[arg(long = "K")]
    pub bandwidth: Option<Choice>,
    /// Bootstrap draws.
    #[arg(long = "B")]
    pub draws: Option<usize>,
    /// Comma-separated non-coverage levels.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub block_width: Option<usize>,
    /// Comma-separated covariate column names.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest factor count considered by `--r auto`.
    #[arg(long)]
    pub rmax: Option<usize>,
    /// Interval family drawn as the band in effects.svg.
    #[arg(long, value_enum)]
    pub plot_family: Option<PlotFamily>,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub r: Choice,
    #[serde(rename = "K")]
    pub bandwidth: Choice,
    #[serde(rename = "B")]
    pub draws: usize,
    pub alpha: Vec<f64>,
    pub block_width: usize,
    pub covariates: Vec<String>,
    pub seed: u64,
    pub rmax: usize,
    pub plot_family: PlotFamily,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            r: Choice::Auto,
            bandwidth: Choice::Auto,
            draws: 399,
            alpha: vec![0.05],
            block_width: 1,
            covariates: vec![],
            seed: 0,
            rmax: DEFAULT_RMAX,
            plot_family: PlotFamily::Eq,
        }
    }
}

impl EstimateConfig {
    pub fn merge(mut self, args: &EstimateArgs) -> Self {
        if let Some(v) = &args.input {
            self.input = Some(v.clone());
        }
        if let Some(v) = &args.output {
            self.output = Some(v.clone());
        }
        if let Some(v) = args.r {
            self.r = v;
        }
        if let Some(v) = args.bandwidth {
            self.bandwidth = v;
        }
        if let Some(v) = args.draws {
            self.draws = v;
        }
        if let Some(v) = &args.alpha {
            self.alpha = v.clone();
        }
        if let Some(v) = args.block_width {
            self.block_width = v;
        }
        if let Some(v) = &args.covariates {
            self.covariates = v.clone();
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.rmax {
            self.rmax = v;
        }
        if let Some(v) = args.plot_family {
            self.plot_family = v;
        }
        self
    }

    fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::InvalidArgument("at least one alpha level is required".into()));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidArgument(format!("alpha = {a} must lie in (0, 1)")));
        }
        if self.draws == 0 {
            return Err(Error::InvalidArgument("B must be positive".into()));
        }
        if self.block_width == 0 {
            return Err(Error::InvalidArgument("block width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Study file for `ife simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpModel,
    pub case: ErrorCase,
    pub margin: Margin,
    #[serde(rename = "T0")]
    pub t0: usize,
    #[serde(rename = "N0")]
    pub n0: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alphas")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_modes")]
    pub factor_modes: Vec<FactorMode>,
    #[serde(default)]
    pub block_width: Option<usize>,
    #[serde(default, rename = "K")]
    pub bandwidth: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rmax")]
    pub rmax: usize,
    #[serde(default = "one")]
    pub n_treated: usize,
    #[serde(default = "five")]
    pub n_post: usize,
    #[serde(default = "three")]
    pub r_true: usize,
    #[serde(default = "unit")]
    pub delta: f64,
    #[serde(default = "unit")]
    pub noise_scale: f64,
    #[serde(default = "redraw")]
    pub nuisance: Nuisance,
}

fn default_reps() -> usize {
    2000
}
fn default_alphas() -> Vec<f64> {
    vec![0.10, 0.05]
}
fn default_modes() -> Vec<FactorMode> {
    vec![FactorMode::Known]
}
fn default_rmax() -> usize {
    DEFAULT_RMAX
}
fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn three() -> usize {
    3
}
fn unit() -> f64 {
    1.0
}
fn redraw() -> Nuisance {
    Nuisance::Redraw
}

impl StudyConfig {
    pub fn studies(&self) -> Vec<CoverageStudy> {
        let mut dgp = DgpConfig::new(self.dgp, self.case, self.margin, self.t0, self.n0);
        dgp.n_treated = self.n_treated;
        dgp.n_post = self.n_post;
        dgp.r_true = self.r_true;
        dgp.delta = self.delta;
        dgp.noise_scale = self.noise_scale;
        dgp.nuisance = self.nuisance;
        dgp.seed = self.seed;
        self.factor_modes
            .iter()
            .map(|&mode| {
                let mut s = CoverageStudy::new(dgp, self.reps, mode);
                s.alphas = self.alpha.clone();
                s.block_width = self.block_width;
                s.bandwidth = self.bandwidth;
                s.rmax = self.rmax;
                s
            })
            .collect()
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_treated(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Read long-format records from CSV text. Required columns are
/// `unit,time,y,treated`; `covariates` names extra numeric columns to read.
pub fn read_records<R: std::io::Read>(reader: R, covariates: &[String]) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let (cu, ct, cy, cd) = (column("unit")?, column("time")?, column("y")?, column("treated")?);
    let cx: Vec<usize> = covariates.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let number = |s: &str, col: &str, line: u64| {
        s.parse::<f64>().map_err(|_| Error::Schema(format!("line {line}: {col} = {s:?} is not a number")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| row.get(k).unwrap_or("");
        let treated = parse_treated(field(cd))
            .ok_or_else(|| Error::Schema(format!("line {line}: treated = {:?} is not 0/1", field(cd))))?;
        out.push(Record {
            unit: field(cu).to_string(),
            time: field(ct).to_string(),
            y: number(field(cy), "y", line)?,
            treated,
            covariates: cx
                .iter()
                .zip(covariates)
                .map(|(&k, name)| number(field(k), name, line))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Panel CSV text in the input format.
pub fn write_panel_csv(panel: &PanelData, covariate_names: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    let mut header = vec!["unit".to_string(), "time".into(), "y".into(), "treated".into()];
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for rec in panel.to_records() {
        let mut row = vec![rec.unit, rec.time, rec.y.to_string(), u8::from(rec.treated).to_string()];
        row.extend(rec.covariates.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Everything `ife estimate` reports.
pub struct EstimateOutput {
    pub panel: PanelData,
    pub r: usize,
    pub factor_count: Option<FactorCountEstimate>,
    pub bandwidth: usize,
    pub estimation: Estimation,
    pub intervals: Vec<IntervalSet>,
    pub redrawn: usize,
}

pub fn run_estimate(panel: PanelData, cfg: &EstimateConfig) -> Result<EstimateOutput> {
    cfg.validate()?;
    if cfg.draws < 100 {
        warn!("B = {} bootstrap draws is small; interval endpoints will be noisy", cfg.draws);
    }
    let (r, factor_count) = match cfg.r {
        Choice::Fixed(r) => (r, None),
        Choice::Auto => {
            let est = estimate_panel_factors(&panel, cfg.rmax, FactorCountMethod::Baseline)?;
            if est.r_hat == 0 {
                return Err(Error::InvalidArgument(
                    "factor-count selection found no factors; pass --r explicitly".into(),
                ));
            }
            (est.r_hat, Some(est))
        }
    };
    let bandwidth = match cfg.bandwidth {
        Choice::Fixed(k) => k,
        Choice::Auto => default_bandwidth(panel.n_pre()),
    };
    let model =
        if panel.covariates().is_some() { Model::Covariates(IfeeOptions::default()) } else { Model::PureFactor };
    let estimation = estimate_panel(&panel, r, bandwidth, model)?;
    let boot =
        BootstrapConfig { n_draws: cfg.draws, alpha: cfg.alpha[0], block_width: cfg.block_width, seed: cfg.seed };
    let draws = bootstrap_statistics(&estimation.fit, &estimation.effects, &boot, bandwidth)?;
    let intervals =
        cfg.alpha.iter().map(|&a| build_intervals(&estimation.effects, &draws, a)).collect::<Result<Vec<_>>>()?;
    Ok(EstimateOutput { panel, r, factor_count, bandwidth, estimation, intervals, redrawn: draws.diagnostics.redrawn })
}

fn alpha_label(a: f64) -> String {
    format!("{a}")
}

/// `effects.csv`: one row per treated cell.
pub fn effects_csv(out: &EstimateOutput) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    let mut header: Vec<String> = ["unit", "time", "delta_hat", "std_err"].map(String::from).to_vec();
    for set in &out.intervals {
        let a = alpha_label(set.alpha);
        for col in ["eq_lo", "eq_hi", "sy_lo", "sy_hi"] {
            header.push(format!("{col}_{a}"));
        }
    }
    w.write_record(&header)?;
    let eff = &out.estimation.effects;
    for (t, i) in out.panel.treated_cells() {
        let (tb, ib) = eff.local(t, i);
        let mut row = vec![
            out.panel.unit_labels()[i].clone(),
            out.panel.time_labels()[t].clone(),
            eff.delta[(tb, ib)].to_string(),
            eff.std_err[(tb, ib)].to_string(),
        ];
        for set in &out.intervals {
            let c = set.cell(tb, ib);
            row.extend([c.eq_lower, c.eq_upper, c.sy_lower, c.sy_upper].map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `counterfactuals.csv`: every cell of the missing block.
pub fn counterfactuals_csv(out: &EstimateOutput) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    w.write_record(["unit", "time", "status", "y", "counterfactual"])?;
    let eff = &out.estimation.effects;
    let panel = &out.panel;
    for i in panel.n_control()..panel.n_units() {
        for t in panel.n_pre()..panel.n_periods() {
            let (tb, ib) = eff.local(t, i);
            let status = match panel.cell_status(t, i) {
                CellStatus::Treated => "treated",
                _ => "untreated",
            };
            w.write_record([
                panel.unit_labels()[i].clone(),
                panel.time_labels()[t].clone(),
                status.to_string(),
                panel.outcomes()[(t, i)].to_string(),
                eff.counterfactual[(tb, ib)].to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn fit_json(out: &EstimateOutput, cfg: &EstimateConfig) -> serde_json::Value {
    let est = &out.estimation;
    let panel = &out.panel;
    let ifee = est.ifee.as_ref().map(|(tall, wide)| {
        let diag = |f: &crate::ifee::IfeeResult| {
            json!({
                "beta": f.beta.iter().collect::<Vec<_>>(),
                "iterations": f.iterations,
                "converged": f.converged,
                "final_step": f.final_step,
            })
        };
        json!({ "tall": diag(tall), "wide": diag(wide) })
    });
    let factor_count = out.factor_count.as_ref().map(|fc| {
        json!({
            "r_hat": fc.r_hat,
            "method": fc.method,
            "criterion_values": fc.criterion_values,
            "penalty_scale": fc.penalty_scale,
        })
    });
    json!({
        "r": out.r,
        "K": out.bandwidth,
        "B": cfg.draws,
        "alpha": cfg.alpha,
        "block_width": cfg.block_width,
        "seed": cfg.seed,
        "covariates": cfg.covariates,
        "dimensions": {
            "T": panel.n_periods(),
            "N": panel.n_units(),
            "T0": panel.n_pre(),
            "N0": panel.n_control(),
        },
        "order_conditions": validate_order_conditions(panel, out.r),
        "completion": CompletionSummary::from(&est.fit),
        "beta": est.fit.beta_tall.as_ref().map(|b| b.iter().collect::<Vec<_>>()),
        "factor_count": factor_count,
        "ifee": ifee,
        "diagnostics": {
            "variance_clamped": est.variance.clamped,
            "bootstrap_redrawn": out.redrawn,
        },
    })
}

fn svg_num(v: f64) -> String {
    format!("{v:.2}")
}

/// Standalone SVG with one panel per treated unit: the effect path, the
/// chosen interval band and a zero line.
pub fn emit_plot(out: &EstimateOutput, family: PlotFamily) -> String {
    let (width, height, pad) = (480.0, 240.0, 36.0);
    let panel = &out.panel;
    let eff = &out.estimation.effects;
    let band = out.intervals.first().filter(|_| family != PlotFamily::None);
    if band.is_none() {
        warn!("no interval family to draw; plotting the effect path only");
    }
    let units: Vec<usize> = (panel.n_control()..panel.n_units())
        .filter(|&i| (0..panel.n_periods()).any(|t| panel.treated_mask()[(t, i)]))
        .collect();
    let mut svg = String::new();
    let total_h = height * units.len() as f64;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" viewBox="0 0 {width} {total_h}">"#
    );
    for (k, &i) in units.iter().enumerate() {
        let cells: Vec<(usize, f64, f64, f64)> = (panel.n_pre()..panel.n_periods())
            .filter(|&t| panel.treated_mask()[(t, i)])
            .map(|t| {
                let (tb, ib) = eff.local(t, i);
                let d = eff.delta[(tb, ib)];
                let (lo, hi) = match (band, family) {
                    (Some(set), PlotFamily::Sy) => (set.cell(tb, ib).sy_lower, set.cell(tb, ib).sy_upper),
                    (Some(set), _) => (set.cell(tb, ib).eq_lower, set.cell(tb, ib).eq_upper),
                    (None, _) => (d, d),
                };
                (t, d, lo.min(hi), hi.max(lo))
            })
            .collect();
        let y_min = cells.iter().map(|c| c.2).fold(0.0f64, f64::min);
        let y_max = cells.iter().map(|c| c.3).fold(0.0f64, f64::max);
        let span = if y_max > y_min { y_max - y_min } else { 1.0 };
        let t_lo = cells.first().map_or(0, |c| c.0) as f64;
        let t_hi = cells.last().map_or(0, |c| c.0) as f64;
        let t_span = if t_hi > t_lo { t_hi - t_lo } else { 1.0 };
        let off = k as f64 * height;
        let x = |t: usize| pad + (t as f64 - t_lo) / t_span * (width - 2.0 * pad);
        let y = |v: f64| off + height - pad - (v - y_min) / span * (height - 2.0 * pad);

        let _ = writeln!(svg, r#"<g class="unit">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            svg_num(pad),
            svg_num(off + pad / 2.0),
            xml_escape(&panel.unit_labels()[i])
        );
        if band.is_some() {
            let upper = cells.iter().map(|c| format!("{},{}", svg_num(x(c.0)), svg_num(y(c.3))));
            let lower = cells.iter().rev().map(|c| format!("{},{}", svg_num(x(c.0)), svg_num(y(c.2))));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.5"/>"##,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            r##"<line class="zero" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#555" stroke-dasharray="4 3"/>"##,
            svg_num(pad),
            svg_num(y(0.0)),
            svg_num(width - pad),
            svg_num(y(0.0))
        );
        let d: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(j, c)| format!("{}{},{}", if j == 0 { "M" } else { "L" }, svg_num(x(c.0)), svg_num(y(c.1))))
            .collect();
        let _ = writeln!(
            svg,
            r##"<path class="effect" d="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
            d.join(" ")
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => EstimateConfig::default(),
    };
    let cfg = base.merge(args);
    let input = cfg.input.clone().ok_or_else(|| Error::InvalidArgument("--input is required".into()))?;
    let output = cfg.output.clone().ok_or_else(|| Error::InvalidArgument("--output is required".into()))?;
    let records = read_records(fs::File::open(&input)?, &cfg.covariates)?;
    let panel = build_panel(&records)?;
    let out = run_estimate(panel, &cfg)?;
    fs::create_dir_all(&output)?;
    write_atomic(&output.join("effects.csv"), &effects_csv(&out)?)?;
    write_atomic(&output.join("counterfactuals.csv"), &counterfactuals_csv(&out)?)?;
    let mut fit = serde_json::to_vec_pretty(&fit_json(&out, &cfg))?;
    fit.push(b'\n');
    write_atomic(&output.join("fit.json"), &fit)?;
    write_atomic(&output.join("effects.svg"), emit_plot(&out, cfg.plot_family).as_bytes())?;
    Ok(())
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// `coverage.csv` rows for one or more study tables.
pub fn coverage_csv(tables: &[CoverageTable]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    w.write_record([
        "dgp",
        "case",
        "margin",
        "T0",
        "N0",
        "factor_mode",
        "alpha",
        "family",
        "period_offset",
        "coverage_pct",
        "reps",
        "failures",
    ])?;
    for table in tables {
        let s = &table.study;
        for c in &table.cells {
            w.write_record([
                label(&s.dgp.model),
                label(&s.dgp.error_case),
                label(&s.dgp.margin),
                s.dgp.n_pre.to_string(),
                s.dgp.n_control.to_string(),
                label(&s.factor_mode),
                alpha_label(c.alpha),
                label(&c.family),
                c.period_offset.to_string(),
                format!("{:.2}", c.coverage_pct),
                s.reps.to_string(),
                table.failures.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: StudyConfig = serde_json::from_str(&fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let tables = cfg.studies().iter().map(run_coverage_study).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.output)?;
    write_atomic(&args.output.join("coverage.csv"), &coverage_csv(&tables)?)?;
    let meta: Vec<_> = tables
        .iter()
        .map(|t| {
            json!({
                "factor_mode": t.study.factor_mode,
                "completed": t.completed,
                "failures": t.failures,
                "r_histogram": t.r_histogram,
                "block_width": t.study.block_width(),
            })
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&json!({ "config": cfg, "runs": meta }))?;
    bytes.push(b'\n');
    write_atomic(&args.output.join("study.json"), &bytes)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

/// Machine-readable error record printed on failure.
pub fn error_record(err: &Error) -> serde_json::Value {
    json!({ "error": { "code": err.code(), "message": err.to_string() } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn choice_parsing() {
        assert_eq!("auto".parse::<Choice>().unwrap(), Choice::Auto);
        assert_eq!("3".parse::<Choice>().unwrap(), Choice::Fixed(3));
        assert!("x".parse::<Choice>().is_err());
        let c: EstimateConfig = serde_json::from_str(r#"{"r": 2, "K": "auto"}"#).unwrap();
        assert_eq!((c.r, c.bandwidth), (Choice::Fixed(2), Choice::Auto));
    }

    #[test]
    fn missing_treated_column_is_schema_error() {
        let err = read_records("unit,time,y\na,1,0.5\n".as_bytes(), &[]).unwrap_err();
        assert_eq!(err.code(), "schema");
    }

    #[test]
    fn missing_covariate_column_is_schema_error() {
        let err = read_records("unit,time,y,treated\na,1,0.5,0\n".as_bytes(), &["x1".into()]).unwrap_err();
        assert_eq!(err.code(), "schema");
    }

    #[test]
    fn flags_override_config() {
        let args = EstimateArgs {
            config: None,
            input: None,
            output: None,
            r: Some(Choice::Fixed(4)),
            bandwidth: None,
            draws: None,
            alpha: Some(vec![0.1]),
            block_width: None,
            covariates: None,
            seed: None,
            rmax: None,
            plot_family: None,
        };
        let base = EstimateConfig { r: Choice::Fixed(2), draws: 199, ..EstimateConfig::default() };
        let cfg = base.merge(&args);
        assert_eq!(cfg.r, Choice::Fixed(4));
        assert_eq!(cfg.draws, 199);
        assert_eq!(cfg.alpha, vec![0.1]);
    }
}
