//! Monte-Carlo replication harness: coefficient-function error (Bias², Var,
//! MISE) and prediction error (MSE) for the six fitting methods over a sweep
//! of basis counts.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{self, ExtractionConfig, ExtractionResult};
use crate::fgrid::{BasisMethod, FunctionalSample, Grid, InnerProduct};
use crate::model::{self, PointRule};
use crate::qsolve::CheckLossSpec;
use crate::simgen::{self, ErrorLaw, Sim2Case, Sim2Setup, Sim2Source};

/// Reported cells above this value render as `>100`.
pub const OVERFLOW: f64 = 100.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("design setup failed: {0}")]
    Design(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fPC", alias = "fpc")]
    Fpc,
    #[serde(rename = "QRfPC", alias = "qrfpc")]
    QrFpc,
    #[serde(rename = "CQRfPC", alias = "cqrfpc")]
    CqrFpc,
    #[serde(rename = "PLS", alias = "pls")]
    Pls,
    #[serde(rename = "PQR", alias = "pqr")]
    Pqr,
    #[serde(rename = "PCQR", alias = "pcqr")]
    Pcqr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fpc,
        Method::QrFpc,
        Method::CqrFpc,
        Method::Pls,
        Method::Pqr,
        Method::Pcqr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Fpc => "fPC",
            Method::QrFpc => "QRfPC",
            Method::CqrFpc => "CQRfPC",
            Method::Pls => "PLS",
            Method::Pqr => "PQR",
            Method::Pcqr => "PCQR",
        }
    }

    pub fn basis(self) -> BasisMethod {
        match self {
            Method::Fpc | Method::QrFpc | Method::CqrFpc => BasisMethod::Fpc,
            Method::Pls => BasisMethod::Pls,
            Method::Pqr => BasisMethod::Pqr,
            Method::Pcqr => BasisMethod::Pcqr,
        }
    }

    /// Loss of the final fit (and of the covariances for PQR/PCQR).
    pub fn loss(self, tau: f64, cqr_levels: usize) -> std::result::Result<CheckLossSpec, String> {
        let r = match self {
            Method::Fpc | Method::Pls => Ok(CheckLossSpec::LeastSquares),
            Method::QrFpc | Method::Pqr => CheckLossSpec::quantile(tau),
            Method::CqrFpc | Method::Pcqr => CheckLossSpec::composite_uniform(cqr_levels),
        };
        r.map_err(|e| e.to_string())
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Error measure used for Bias², Var and MISE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiseScale {
    /// Grid sums weighted by the grid spacing (integrated squared error).
    #[default]
    Integrated,
    /// Plain grid sums.
    GridSum,
}

impl MiseScale {
    fn weight(self, grid: &Grid) -> f64 {
        match self {
            MiseScale::Integrated => grid.weight(InnerProduct::L2Weighted),
            MiseScale::GridSum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseMode {
    InSample,
    OutOfSample,
    #[default]
    Both,
}

impl MseMode {
    fn in_sample(self) -> bool {
        matches!(self, MseMode::InSample | MseMode::Both)
    }
    fn out_of_sample(self) -> bool {
        matches!(self, MseMode::OutOfSample | MseMode::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignSpec {
    Sim1 {
        n: usize,
        #[serde(default)]
        error: ErrorLaw,
        #[serde(default = "one")]
        noise_scale: f64,
    },
    Sim2 {
        source: Sim2Source,
        case: Sim2Case,
        #[serde(default)]
        error: ErrorLaw,
        #[serde(default = "one")]
        noise_multiplier: f64,
    },
    /// Observed data without a known coefficient function: each replication
    /// splits the rows at random into a training and a test part.
    Csv {
        curves: PathBuf,
        responses: PathBuf,
        #[serde(default)]
        response_column: Option<String>,
        #[serde(default = "half")]
        test_fraction: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl DesignSpec {
    pub fn label(&self) -> String {
        match self {
            DesignSpec::Sim1 { n, error, noise_scale } => {
                let mut s = format!("sim1/n={n}/{error}");
                if *noise_scale != 1.0 {
                    let _ = write!(s, "/noise={noise_scale}");
                }
                s
            }
            DesignSpec::Sim2 {
                case,
                error,
                noise_multiplier,
                ..
            } => {
                let mut s = format!("sim2/case={case}/{error}");
                if *noise_multiplier != 1.0 {
                    let _ = write!(s, "/noise={noise_multiplier}");
                }
                s
            }
            DesignSpec::Csv { curves, .. } => format!(
                "csv/{}",
                curves
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub designs: Vec<DesignSpec>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub k_values: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_cqr_levels")]
    pub cqr_levels: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub mse: MseMode,
    #[serde(default)]
    pub point_rule: PointRule,
    #[serde(default)]
    pub mise_scale: MiseScale,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_replications() -> usize {
    100
}
fn default_tau() -> f64 {
    0.5
}
fn default_cqr_levels() -> usize {
    9
}

impl BenchmarkConfig {
    pub fn new(designs: Vec<DesignSpec>, methods: Vec<Method>, k_values: Vec<usize>, replications: usize) -> Self {
        Self {
            designs,
            methods,
            k_values,
            replications,
            tau: default_tau(),
            cqr_levels: default_cqr_levels(),
            master_seed: 0,
            threads: None,
            mse: MseMode::Both,
            point_rule: PointRule::MedianLevel,
            mise_scale: MiseScale::Integrated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(BenchError::InvalidConfig(s.to_string()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if self.designs.is_empty() {
            return bad("no designs");
        }
        if self.methods.is_empty() {
            return bad("no methods");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return bad("k_values must be nonempty and positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        for m in &self.methods {
            m.loss(self.tau, self.cqr_levels).map_err(BenchError::InvalidConfig)?;
        }
        for d in &self.designs {
            if let DesignSpec::Csv { test_fraction, .. } = d {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return bad("test_fraction must lie in (0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// Bias², Var and MISE of `S` estimates (rows of `gamma_hats`) against the
/// truth, each a grid sum multiplied by `weight`.
pub fn mise_decomposition(gamma_hats: &DMatrix<f64>, gamma_true: &[f64], weight: f64) -> (f64, f64, f64) {
    let s = gamma_hats.nrows() as f64;
    let mut bias2 = 0.0;
    let mut var = 0.0;
    let mut mise = 0.0;
    for (j, truth) in gamma_true.iter().enumerate() {
        let col = gamma_hats.column(j);
        let mean = col.sum() / s;
        bias2 += (mean - truth).powi(2);
        var += col.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / s;
        mise += col.iter().map(|g| (g - truth).powi(2)).sum::<f64>() / s;
    }
    (bias2 * weight, var * weight, mise * weight)
}

/// One (design, method, K) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub design: String,
    pub n: usize,
    pub method: Method,
    pub k: usize,
    pub bias2: Option<f64>,
    pub var: Option<f64>,
    pub mise: Option<f64>,
    pub mse_in: Option<f64>,
    pub mse_out: Option<f64>,
    /// Largest `|<t_k, t_l>| / n` over distinct score columns and fits.
    pub score_inner: Option<f64>,
    /// Replications that produced a fit.
    pub fits: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignTiming {
    pub design: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<Cell>,
    /// Wall clock per design; not part of the deterministic outputs.
    pub timings: Vec<DesignTiming>,
}

impl EvalReport {
    pub fn cell(&self, design: &str, method: Method, k: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.design == design && c.method == method && c.k == k)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().map(|c| c.failures).sum()
    }

    pub fn designs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.design) {
                out.push(c.design.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c).expect("in-memory write");
        }
        if self.cells.is_empty() {
            w.write_record(CSV_HEADER).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let cells = r.deserialize().collect::<std::result::Result<Vec<Cell>, _>>()?;
        Ok(Self {
            cells,
            timings: Vec::new(),
        })
    }

    /// Plain-text tables, one per design.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in self.designs() {
            let _ = writeln!(out, "{d}");
            let _ = writeln!(
                out,
                "{:<8} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}",
                "method", "K", "Bias2", "Var", "MISE", "MSE-in", "MSE-out", "fail"
            );
            for c in self.cells.iter().filter(|c| c.design == d) {
                let _ = writeln!(
                    out,
                    "{:<8} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6}",
                    c.method.label(),
                    c.k,
                    render(c.bias2),
                    render(c.var),
                    render(c.mise),
                    render(c.mse_in),
                    render(c.mse_out),
                    c.failures
                );
            }
            out.push('\n');
        }
        out
    }

    /// One SVG line plot of `metric` against K per design, a series per
    /// method. Values above the overflow cap are clipped to it.
    pub fn to_svg(&self, design: &str, metric: Metric) -> String {
        let cells: Vec<&Cell> = self.cells.iter().filter(|c| c.design == design).collect();
        let mut methods: Vec<Method> = Vec::new();
        for c in &cells {
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
        }
        let ks: Vec<usize> = {
            let mut v: Vec<usize> = cells.iter().map(|c| c.k).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let vals: Vec<f64> = cells
            .iter()
            .filter_map(|c| metric.get(c))
            .map(|v| v.min(OVERFLOW))
            .collect();
        let ymax = vals.iter().copied().fold(0.0f64, f64::max);
        let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
        let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 120.0, 30.0, 40.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let kmin = *ks.first().unwrap_or(&1) as f64;
        let kmax = *ks.last().unwrap_or(&1) as f64;
        let xs = |k: usize| {
            if kmax > kmin {
                left + pw * (k as f64 - kmin) / (kmax - kmin)
            } else {
                left + pw / 2.0
            }
        };
        let ys = |v: f64| top + ph * (1.0 - v.min(OVERFLOW) / ymax);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="18">{} {}</text>"#,
            escape(design),
            metric.label()
        );
        let _ = writeln!(
            s,
            r#"<path d="M{left},{top} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
            top + ph,
            left + pw
        );
        for k in &ks {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#,
                xs(*k),
                top + ph + 16.0
            );
        }
        for i in 0..=4 {
            let v = ymax * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                left - 6.0,
                ys(v) + 4.0
            );
        }
        for (mi, m) in methods.iter().enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let mut pts: Vec<(usize, f64)> = cells
                .iter()
                .filter(|c| c.method == *m)
                .filter_map(|c| metric.get(c).map(|v| (c.k, v)))
                .collect();
            pts.sort_by_key(|p| p.0);
            if !pts.is_empty() {
                let d: Vec<String> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, (k, v))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, xs(*k), ys(*v)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    d.join(" ")
                );
            }
            let ly = top + 16.0 * mi as f64 + 8.0;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                left + pw + 10.0,
                left + pw + 30.0,
                left + pw + 36.0,
                ly + 4.0,
                m.label()
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

const CSV_HEADER: [&str; 12] = [
    "design",
    "n",
    "method",
    "k",
    "bias2",
    "var",
    "mise",
    "mse_in",
    "mse_out",
    "score_inner",
    "fits",
    "failures",
];

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two-decimal rendering with the overflow cap; `-` for missing values.
pub fn render(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x.is_nan() => "NaN".into(),
        Some(x) if x > OVERFLOW => ">100".into(),
        Some(x) => format!("{x:.2}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mise,
    MseIn,
    MseOut,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Mise => "MISE",
            Metric::MseIn => "MSE (in-sample)",
            Metric::MseOut => "MSE (out-of-sample)",
        }
    }

    pub fn file_tag(self) -> &'static str {
        match self {
            Metric::Mise => "mise",
            Metric::MseIn => "mse_in",
            Metric::MseOut => "mse_out",
        }
    }

    pub fn get(self, c: &Cell) -> Option<f64> {
        match self {
            Metric::Mise => c.mise,
            Metric::MseIn => c.mse_in,
            Metric::MseOut => c.mse_out,
        }
    }
}

/// Training and test data for one replication.
struct Replicate {
    train: FunctionalSample,
    test: Option<FunctionalSample>,
}

enum Prepared {
    Sim1 {
        n: usize,
        error: ErrorLaw,
        noise_scale: f64,
    },
    Sim2(Box<Sim2Setup>),
    Csv {
        sample: FunctionalSample,
        test_fraction: f64,
    },
}

impl Prepared {
    fn new(spec: &DesignSpec) -> Result<Self> {
        let err = |e: String| BenchError::Design(e);
        Ok(match spec {
            DesignSpec::Sim1 { n, error, noise_scale } => Prepared::Sim1 {
                n: *n,
                error: *error,
                noise_scale: *noise_scale,
            },
            DesignSpec::Sim2 {
                source,
                case,
                error,
                noise_multiplier,
            } => {
                let design = simgen::Sim2Design {
                    source: source.clone(),
                    case: *case,
                    error: *error,
                    noise_multiplier: *noise_multiplier,
                };
                Prepared::Sim2(Box::new(
                    Sim2Setup::from_design(&design).map_err(|e| err(e.to_string()))?,
                ))
            }
            DesignSpec::Csv {
                curves,
                responses,
                response_column,
                test_fraction,
            } => {
                let c = crate::io::read_curve_csv(curves).map_err(|e| err(e.to_string()))?;
                let r = crate::io::read_table(responses).map_err(|e| err(e.to_string()))?;
                let y = match response_column {
                    Some(name) => r.column(name).map_err(|e| err(e.to_string()))?,
                    None => r.curves.column(0).iter().copied().collect(),
                };
                let grid = Grid::uniform(c.curves.ncols()).map_err(|e| err(e.to_string()))?;
                let sample = FunctionalSample::new(grid, c.curves)
                    .and_then(|s| s.with_responses(y))
                    .map_err(|e| err(e.to_string()))?;
                Prepared::Csv {
                    sample,
                    test_fraction: *test_fraction,
                }
            }
        })
    }

    fn truth(&self) -> Option<Vec<f64>> {
        match self {
            Prepared::Sim1 { .. } => Some(simgen::sim1_gamma()),
            Prepared::Sim2(s) => Some(s.gamma.clone()),
            Prepared::Csv { .. } => None,
        }
    }

    fn n(&self) -> usize {
        match self {
            Prepared::Sim1 { n, .. } => *n,
            Prepared::Sim2(s) => s.curves.n(),
            Prepared::Csv { sample, test_fraction } => sample.n() - split_point(sample.n(), *test_fraction),
        }
    }

    fn replicate(&self, seed: u64, with_test: bool) -> std::result::Result<Replicate, String> {
        let train_seed = simgen::derive_seed(seed, &[0]);
        let test_seed = simgen::derive_seed(seed, &[1]);
        match self {
            Prepared::Sim1 { n, error, noise_scale } => {
                let gen = |s: u64| {
                    let mut d = simgen::Sim1Design::new(*n, *error, s);
                    d.noise_scale = *noise_scale;
                    simgen::gen_sim1(&d).map_err(|e| e.to_string())
                };
                let train = gen(train_seed)?;
                let test = if with_test { Some(gen(test_seed)?.sample) } else { None };
                Ok(Replicate {
                    train: train.sample,
                    test,
                })
            }
            Prepared::Sim2(setup) => {
                let train = setup.draw(train_seed).map_err(|e| e.to_string())?;
                let test = if with_test {
                    Some(setup.draw(test_seed).map_err(|e| e.to_string())?.sample)
                } else {
                    None
                };
                Ok(Replicate {
                    train: train.sample,
                    test,
                })
            }
            Prepared::Csv { sample, test_fraction } => {
                let mut idx: Vec<usize> = (0..sample.n()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(train_seed));
                let cut = split_point(sample.n(), *test_fraction);
                let mut test_idx = idx[..cut].to_vec();
                let mut train_idx = idx[cut..].to_vec();
                test_idx.sort_unstable();
                train_idx.sort_unstable();
                Ok(Replicate {
                    train: sample.subset(&train_idx),
                    test: Some(sample.subset(&test_idx)),
                })
            }
        }
    }
}

fn split_point(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(2).max(1))
}

/// Outcome of one (method, K) fit in one replication.
#[derive(Clone, Debug)]
struct CellDraw {
    gamma_hat: Vec<f64>,
    mse_in: Option<f64>,
    mse_out: Option<f64>,
    score_inner: f64,
}

fn max_score_inner(scores: &DMatrix<f64>) -> f64 {
    let n = scores.nrows() as f64;
    let k = scores.ncols();
    let mut worst = 0.0f64;
    for a in 0..k {
        for b in a + 1..k {
            worst = worst.max(scores.column(a).dot(&scores.column(b)).abs() / n);
        }
    }
    worst
}

fn mse(point: &[f64], y: &[f64]) -> f64 {
    point.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / y.len() as f64
}

/// Fits every (method, K) of the config on one replication. Failed fits are
/// `None`.
fn run_replicate(config: &BenchmarkConfig, rep: &Replicate) -> Vec<Vec<Option<CellDraw>>> {
    let k_max = *config.k_values.iter().max().expect("validated");
    config
        .methods
        .iter()
        .map(|&method| {
            let loss = method.loss(config.tau, config.cqr_levels).expect("validated");
            let ecfg = ExtractionConfig::fixed(method.basis(), loss.clone(), k_max.min(rep.train.n() - 1));
            let extraction: Option<ExtractionResult> = extract::extract_k(&rep.train, &ecfg, ecfg.k_max).ok();
            config
                .k_values
                .iter()
                .map(|&k| {
                    let ex = extraction.as_ref()?.truncate(k);
                    let mut fit = model::fit_model(&rep.train, &ex, &loss).ok()?;
                    fit.point_rule = config.point_rule;
                    let y = rep.train.responses()?;
                    let mse_in = if config.mse.in_sample() {
                        Some(mse(&model::predict(&fit, &rep.train).ok()?.point, y))
                    } else {
                        None
                    };
                    let mse_out = match (&rep.test, config.mse.out_of_sample()) {
                        (Some(test), true) => Some(mse(&model::predict(&fit, test).ok()?.point, test.responses()?)),
                        _ => None,
                    };
                    if !fit.gamma_hat.iter().all(|g| g.is_finite()) {
                        return None;
                    }
                    Some(CellDraw {
                        gamma_hat: fit.gamma_hat,
                        mse_in,
                        mse_out,
                        score_inner: max_score_inner(&ex.scores.values),
                    })
                })
                .collect()
        })
        .collect()
}

/// Runs every design, replication, method and K of `config`.
///
/// Replications run in parallel; each owns the seed
/// `derive_seed(master_seed, &[design, replication])` and results are
/// folded in replication order, so the report does not depend on the
/// thread count.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<EvalReport> {
    config.validate()?;
    let pool = match config.threads {
        Some(t) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| BenchError::InvalidConfig(e.to_string()))?,
        ),
        None => None,
    };
    let run = || run_designs(config);
    match pool {
        Some(p) => p.install(run),
        None => run(),
    }
}

fn run_designs(config: &BenchmarkConfig) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (di, spec) in config.designs.iter().enumerate() {
        let start = Instant::now();
        let prepared = Prepared::new(spec)?;
        let label = spec.label();
        let with_test = config.mse.out_of_sample();
        let draws: Vec<std::result::Result<Vec<Vec<Option<CellDraw>>>, String>> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                let seed = simgen::derive_seed(config.master_seed, &[di as u64, r as u64]);
                let rep = prepared.replicate(seed, with_test)?;
                Ok(run_replicate(config, &rep))
            })
            .collect();
        let mut draws_ok = Vec::with_capacity(draws.len());
        for d in draws {
            draws_ok.push(d.map_err(BenchError::Design)?);
        }
        let truth = prepared.truth();
        let n = prepared.n();
        for (mi, &method) in config.methods.iter().enumerate() {
            for (ki, &k) in config.k_values.iter().enumerate() {
                let ok: Vec<&CellDraw> = draws_ok.iter().filter_map(|d| d[mi][ki].as_ref()).collect();
                let fits = ok.len();
                let failures = config.replications - fits;
                let (bias2, var, mise) = match (&truth, fits) {
                    (Some(g), f) if f > 0 => {
                        let m = g.len();
                        let hats = DMatrix::from_fn(f, m, |s, j| ok[s].gamma_hat[j]);
                        let weight = config.mise_scale.weight(&Grid::uniform(m).expect("m >= 2"));
                        let (b, v, e) = mise_decomposition(&hats, g, weight);
                        (Some(b), Some(v), Some(e))
                    }
                    _ => (None, None, None),
                };
                let avg = |f: fn(&CellDraw) -> Option<f64>| -> Option<f64> {
                    let v: Vec<f64> = ok.iter().filter_map(|c| f(c)).collect();
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.iter().sum::<f64>() / v.len() as f64)
                    }
                };
                report.cells.push(Cell {
                    design: label.clone(),
                    n,
                    method,
                    k,
                    bias2,
                    var,
                    mise,
                    mse_in: avg(|c| c.mse_in),
                    mse_out: avg(|c| c.mse_out),
                    score_inner: ok.iter().map(|c| c.score_inner).reduce(f64::max),
                    fits,
                    failures,
                });
            }
        }
        report.timings.push(DesignTiming {
            design: label,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_of_exact_and_offset_estimates() {
        let truth = vec![1.0, -2.0, 0.5, 3.0];
        let exact = DMatrix::from_fn(5, 4, |_, j| truth[j]);
        assert_eq!(mise_decomposition(&exact, &truth, 1.0), (0.0, 0.0, 0.0));
        let delta = 0.3;
        let shifted = DMatrix::from_fn(5, 4, |_, j| truth[j] + delta);
        let (b, v, e) = mise_decomposition(&shifted, &truth, 1.0);
        assert!((b - 4.0 * delta * delta).abs() < 1e-12);
        assert!(v.abs() < 1e-12);
        assert!((e - 4.0 * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn decomposition_identity_on_scattered_estimates() {
        let truth = vec![0.0, 1.0, 2.0];
        let hats = DMatrix::from_fn(7, 3, |s, j| ((s * 5 + j * 3) % 7) as f64 * 0.4 - 1.0);
        let (b, v, e) = mise_decomposition(&hats, &truth, 0.5);
        assert!((b + v - e).abs() < 1e-12 * e.max(1.0));
    }

    #[test]
    fn overflow_rendering() {
        assert_eq!(render(Some(100.5)), ">100");
        assert_eq!(render(Some(3.634)), "3.63");
        assert_eq!(render(None), "-");
    }

    #[test]
    fn config_validation() {
        let d = DesignSpec::Sim1 {
            n: 20,
            error: ErrorLaw::Gaussian,
            noise_scale: 1.0,
        };
        let mut c = BenchmarkConfig::new(vec![d], vec![Method::Pls], vec![1], 1);
        assert!(c.validate().is_ok());
        c.k_values.clear();
        assert!(c.validate().is_err());
        c.k_values = vec![1];
        c.replications = 0;
        assert!(c.validate().is_err());
        c.replications = 1;
        c.tau = 1.5;
        c.methods = vec![Method::Pqr];
        assert!(c.validate().is_err());
    }

    #[test]
    fn realizable_noise_free_design_is_recovered() {
        let d = DesignSpec::Sim2 {
            source: Sim2Source::Synthetic(simgen::SyntheticSource::new(80, 9)),
            case: Sim2Case::I,
            error: ErrorLaw::Gaussian,
            noise_multiplier: 0.0,
        };
        let report = run_benchmark(&BenchmarkConfig::new(vec![d], vec![Method::Fpc], vec![5], 1)).unwrap();
        let c = &report.cells[0];
        assert_eq!(c.failures, 0);
        assert!(c.mise.unwrap() < 1e-6, "{:?}", c.mise);
        assert!(c.mse_in.unwrap() < 1e-10 && c.mse_out.unwrap() < 1e-10, "{c:?}");
    }

    #[test]
    fn method_labels_round_trip_through_serde() {
        for m in Method::ALL {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.label()));
            assert_eq!(serde_json::from_str::<Method>(&s).unwrap(), m);
        }
    }
}
