//! Sequential basis extraction (SIMPQR / SIMPCQR / SIMPLS) and fPC bases in a
//! common representation.
//!
//! A sequential extraction standardizes every grid column, then repeats:
//! direction from column-wise covariances with the response, projection onto
//! the direction, and deflation of every column by a simple regression on the
//! projection. The directions live in standardized, deflated coordinates; the
//! reported basis is the equivalent set of weight functions acting on the
//! original curves.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgrid::{
    self, column_mean_var, BasisMethod, BasisSet, ColumnTransform, DegeneratePolicy, FgridError, FunctionalSample,
    InnerProduct, ScoreMatrix, DEGENERATE_VARIANCE,
};
use crate::model::{self, ModelError};
use crate::qcov::{CovError, CovarianceProbe};
use crate::qsolve::{check_loss, CheckLossSpec};

/// Column covariances below this magnitude count as zero.
pub const ZERO_DIRECTION: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("every column covariance is below 1e-12")]
    AllZeroDirection,
    #[error("score column has variance below 1e-12")]
    DegenerateScore,
    #[error("sample has no responses")]
    MissingResponses,
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] FgridError),
    #[error(transparent)]
    Covariance(#[from] CovError),
    #[error("model fit during basis-count selection failed: {0}")]
    Model(String),
}

impl From<ModelError> for ExtractError {
    fn from(e: ModelError) -> Self {
        ExtractError::Model(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ExtractError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StopRule {
    #[default]
    FixedK,
    CrossValidation {
        folds: usize,
    },
    Bic,
}

/// How scalar covariates take part in extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjusterPolicy {
    /// Scalars enter every covariance fit as adjusters.
    #[default]
    Joint,
    /// Scalars are ignored during extraction (still used by the final fit).
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub method: BasisMethod,
    /// Covariance loss. Ignored for PLS (least squares) and fPC.
    pub loss: CheckLossSpec,
    pub k_max: usize,
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default)]
    pub adjusters: AdjusterPolicy,
    #[serde(default)]
    pub degenerate_columns: DegeneratePolicy,
    #[serde(default)]
    pub seed: u64,
}

impl ExtractionConfig {
    pub fn fixed(method: BasisMethod, loss: CheckLossSpec, k: usize) -> Self {
        Self {
            method,
            loss,
            k_max: k,
            stop_rule: StopRule::FixedK,
            adjusters: AdjusterPolicy::Joint,
            degenerate_columns: DegeneratePolicy::Error,
            seed: 0,
        }
    }

    /// Loss actually used for the column covariances.
    pub fn covariance_loss(&self) -> CheckLossSpec {
        match self.method {
            BasisMethod::Pls | BasisMethod::Fpc => CheckLossSpec::LeastSquares,
            _ => self.loss.clone(),
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let bad = |s: String| Err(ExtractError::InvalidConfig(s));
        let cap = n.saturating_sub(1).min(m);
        if self.k_max > cap {
            return bad(format!("k_max = {} exceeds min(n - 1, m) = {cap}", self.k_max));
        }
        if let StopRule::CrossValidation { folds } = self.stop_rule {
            if folds < 2 {
                return bad(format!("cross validation needs at least 2 folds, got {folds}"));
            }
            if folds > n {
                return bad(format!("{folds} folds for {n} observations"));
            }
        }
        match (self.method, &self.loss) {
            (BasisMethod::Pqr, CheckLossSpec::Quantile { .. }) => {}
            (BasisMethod::Pcqr, CheckLossSpec::Composite { .. }) => {}
            (BasisMethod::Pls | BasisMethod::Fpc, _) => {}
            (m, l) => return bad(format!("{m} basis cannot use a {} covariance", l.label())),
        }
        self.loss
            .validate()
            .map_err(|e| ExtractError::InvalidConfig(e.to_string()))
    }
}

/// A unit-norm direction computed from column covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
    /// Weighted norm of the covariance vector before rescaling.
    pub raw_norm: f64,
    /// Columns skipped because their variance vanished.
    pub degenerate_columns: usize,
}

/// Column-wise covariances of the response with each grid column, rescaled
/// to unit weighted norm.
pub fn extract_one(
    sample: &FunctionalSample,
    loss: &CheckLossSpec,
    adjusters: Option<&DMatrix<f64>>,
) -> Result<Direction> {
    let y = sample.responses().ok_or(ExtractError::MissingResponses)?;
    // Validate once up front so per-column failures are only solver failures.
    CovarianceProbe::new(y, adjusters, loss)?;
    let curves = sample.curves();
    let cov: Vec<std::result::Result<Option<f64>, CovError>> = (0..sample.m())
        .into_par_iter()
        .map_init(
            || CovarianceProbe::new(y, adjusters, loss).expect("validated above"),
            |probe, j| match probe.covariance(curves.column(j).as_slice()) {
                Ok(v) => Ok(Some(v)),
                Err(CovError::DegenerateProbe) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect();
    let mut values = Vec::with_capacity(sample.m());
    let mut degenerate_columns = 0;
    for c in cov {
        match c? {
            Some(v) => values.push(v),
            None => {
                degenerate_columns += 1;
                values.push(0.0);
            }
        }
    }
    if values.iter().all(|v| v.abs() < ZERO_DIRECTION) {
        return Err(ExtractError::AllZeroDirection);
    }
    let grid = sample.grid();
    let raw_norm = fgrid::norm(grid, &values, InnerProduct::L2Weighted)?;
    values.iter_mut().for_each(|v| *v /= raw_norm);
    Ok(Direction {
        values,
        raw_norm,
        degenerate_columns,
    })
}

/// Simple-regression coefficients used to deflate each grid column on a
/// score: `z_j <- z_j - intercept_j - slope_j * score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeflationStep {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
}

/// Replaces each grid column by its residual from an intercept + slope
/// least-squares regression on `score`.
pub fn deflate(sample: &FunctionalSample, score: &[f64]) -> Result<(FunctionalSample, DeflationStep)> {
    if score.len() != sample.n() {
        return Err(FgridError::DimensionMismatch(format!(
            "score has {} entries for {} curves",
            score.len(),
            sample.n()
        ))
        .into());
    }
    let (smean, svar) = column_mean_var(score);
    if !(svar >= DEGENERATE_VARIANCE) {
        return Err(ExtractError::DegenerateScore);
    }
    let n = sample.n();
    let sxx = svar * (n - 1) as f64;
    let mut curves = sample.curves().clone();
    let mut intercepts = Vec::with_capacity(sample.m());
    let mut slopes = Vec::with_capacity(sample.m());
    for mut col in curves.column_iter_mut() {
        let cmean = col.iter().sum::<f64>() / n as f64;
        let sxy: f64 = col.iter().zip(score).map(|(z, s)| (z - cmean) * (s - smean)).sum();
        let slope = sxy / sxx;
        let intercept = cmean - slope * smean;
        for (z, s) in col.iter_mut().zip(score) {
            *z -= intercept + slope * s;
        }
        intercepts.push(intercept);
        slopes.push(slope);
    }
    Ok((sample.with_curves(curves)?, DeflationStep { intercepts, slopes }))
}

/// Everything needed to map new curves to scores exactly as in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub transform: ColumnTransform,
    /// Score-defining directions (one per step) in transformed coordinates.
    pub directions: Vec<Vec<f64>>,
    /// Deflation after each step; `None` for a plain projection (fPC).
    pub deflation: Option<Vec<DeflationStep>>,
}

impl Replay {
    pub fn k(&self) -> usize {
        self.directions.len()
    }

    /// `n x K` scores of `curves` (raw, untransformed).
    pub fn scores(&self, curves: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.transform.means.len();
        let dt = fgrid::Grid::uniform(m)?.spacing();
        let mut work = self.transform.apply(curves)?;
        let n = work.nrows();
        let mut scores = DMatrix::zeros(n, self.k());
        for (k, dir) in self.directions.iter().enumerate() {
            let b = nalgebra::DVector::from_column_slice(dir);
            let t = (&work * b) * dt;
            scores.set_column(k, &t);
            if let Some(steps) = &self.deflation {
                let step = &steps[k];
                for (j, mut col) in work.column_iter_mut().enumerate() {
                    let (a, p) = (step.intercepts[j], step.slopes[j]);
                    for (z, s) in col.iter_mut().zip(t.iter()) {
                        *z -= a + p * s;
                    }
                }
            }
        }
        Ok(scores)
    }

    pub fn truncate(&self, k: usize) -> Self {
        let k = k.min(self.k());
        Self {
            transform: self.transform.clone(),
            directions: self.directions[..k].to_vec(),
            deflation: self.deflation.as_ref().map(|s| s[..k].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractionFlag {
    /// Extraction stopped before `k_max` because no direction remained.
    AllZeroDirection {
        step: usize,
    },
    DegenerateScore {
        step: usize,
    },
    DegenerateColumns {
        step: usize,
        count: usize,
    },
    FpcTruncated {
        requested: usize,
        available: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ExtractionResult {
    pub method: BasisMethod,
    /// Reported basis in original curve coordinates, unit weighted norm.
    pub basis: BasisSet,
    /// Step scores used by the downstream fit; column `k` equals
    /// `score_scales[k] * <z - mean, basis_k>`.
    pub scores: ScoreMatrix,
    pub score_scales: Vec<f64>,
    pub replay: Replay,
    /// Frobenius norm of the working curve matrix after each deflation.
    pub residual_norms: Vec<f64>,
    pub flags: Vec<ExtractionFlag>,
}

impl ExtractionResult {
    pub fn k(&self) -> usize {
        self.basis.k()
    }

    /// The first `k` components (extraction is greedy, so this equals a run
    /// with `k_max = k`).
    pub fn truncate(&self, k: usize) -> Self {
        let k = k.min(self.k());
        Self {
            method: self.method,
            basis: self.basis.truncate(k),
            scores: ScoreMatrix {
                values: self.scores.values.columns(0, k).into_owned(),
                method: self.scores.method,
                convention: self.scores.convention,
            },
            score_scales: self.score_scales[..k].to_vec(),
            replay: self.replay.truncate(k),
            residual_norms: self.residual_norms[..k.min(self.residual_norms.len())].to_vec(),
            flags: self.flags.clone(),
        }
    }
}

/// Runs the configured extraction, choosing `K` by the stop rule.
pub fn run_extraction(sample: &FunctionalSample, config: &ExtractionConfig) -> Result<ExtractionResult> {
    config.validate(sample.n(), sample.m())?;
    match config.stop_rule {
        StopRule::FixedK => extract_k(sample, config, config.k_max),
        StopRule::CrossValidation { .. } | StopRule::Bic => {
            let k = select_k(sample, config)?;
            Ok(extract_k(sample, config, config.k_max)?.truncate(k))
        }
    }
}

/// Extraction with exactly `k_max` requested components.
pub fn extract_k(sample: &FunctionalSample, config: &ExtractionConfig, k_max: usize) -> Result<ExtractionResult> {
    match config.method {
        BasisMethod::Fpc => fpc_extraction(sample, k_max),
        _ => sequential_extraction(sample, config, k_max),
    }
}

fn fpc_extraction(sample: &FunctionalSample, k: usize) -> Result<ExtractionResult> {
    let out = fgrid::fpc_basis(sample, k)?;
    let mut flags = Vec::new();
    if out.is_truncated() {
        flags.push(ExtractionFlag::FpcTruncated {
            requested: k,
            available: out.basis.k(),
        });
    }
    let replay = Replay {
        transform: out.transform.clone(),
        directions: (0..out.basis.k()).map(|r| out.basis.function(r)).collect(),
        deflation: None,
    };
    let values = replay.scores(sample.curves())?;
    let kk = out.basis.k();
    Ok(ExtractionResult {
        method: BasisMethod::Fpc,
        basis: out.basis,
        scores: ScoreMatrix {
            values,
            method: BasisMethod::Fpc,
            convention: InnerProduct::L2Weighted,
        },
        score_scales: vec![1.0; kk],
        replay,
        residual_norms: Vec::new(),
        flags,
    })
}

fn sequential_extraction(
    sample: &FunctionalSample,
    config: &ExtractionConfig,
    k_max: usize,
) -> Result<ExtractionResult> {
    sample.responses().ok_or(ExtractError::MissingResponses)?;
    let loss = config.covariance_loss();
    let adjusters = match config.adjusters {
        AdjusterPolicy::Joint => sample.scalars(),
        AdjusterPolicy::Ignore => None,
    };
    let (mut work, transform) = fgrid::standardize_columns_with(sample, config.degenerate_columns)?;
    let grid = *sample.grid();
    let dt = grid.spacing();
    let n = sample.n();
    let m = sample.m();

    let mut directions: Vec<Vec<f64>> = Vec::new();
    let mut steps: Vec<DeflationStep> = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    let mut residual_norms = Vec::new();
    let mut flags = Vec::new();
    for step in 0..k_max {
        let dir = match extract_one(&work, &loss, adjusters) {
            Ok(d) => d,
            Err(ExtractError::AllZeroDirection) => {
                flags.push(ExtractionFlag::AllZeroDirection { step });
                break;
            }
            Err(e) => return Err(e),
        };
        if dir.degenerate_columns > 0 {
            flags.push(ExtractionFlag::DegenerateColumns {
                step,
                count: dir.degenerate_columns,
            });
        }
        let b = nalgebra::DVector::from_column_slice(&dir.values);
        let t: Vec<f64> = ((work.curves() * b) * dt).iter().copied().collect();
        let (next, defl) = match deflate(&work, &t) {
            Ok(v) => v,
            Err(ExtractError::DegenerateScore) => {
                flags.push(ExtractionFlag::DegenerateScore { step });
                break;
            }
            Err(e) => return Err(e),
        };
        residual_norms.push(next.curves().norm());
        work = next;
        directions.push(dir.values);
        steps.push(defl);
        scores.push(t);
    }

    // Weight functions on standardized curves: w_k = b_k - sum_j (dt p_j.b_k) w_j,
    // then r_k = w_k / scale acts on centered raw curves.
    let k = directions.len();
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(k);
    for kk in 0..k {
        let mut w = directions[kk].clone();
        for j in 0..kk {
            let c = dt * dot(&steps[j].slopes, &directions[kk]);
            for (wi, wj) in w.iter_mut().zip(&weights[j]) {
                *wi -= c * wj;
            }
        }
        weights.push(w);
    }
    let mut functions = DMatrix::zeros(k, m);
    let mut score_scales = Vec::with_capacity(k);
    for (kk, w) in weights.iter().enumerate() {
        let r: Vec<f64> = w.iter().zip(&transform.scales).map(|(a, s)| a / s).collect();
        let nrm = fgrid::norm(&grid, &r, InnerProduct::L2Weighted)?;
        score_scales.push(nrm);
        for j in 0..m {
            functions[(kk, j)] = r[j] / nrm;
        }
    }
    let basis = BasisSet::new(grid, functions, config.method, InnerProduct::L2Weighted)?;
    let values = DMatrix::from_fn(n, k, |i, kk| scores[kk][i]);
    Ok(ExtractionResult {
        method: config.method,
        basis,
        scores: ScoreMatrix {
            values,
            method: config.method,
            convention: InnerProduct::L2Weighted,
        },
        score_scales,
        replay: Replay {
            transform,
            directions,
            deflation: Some(steps),
        },
        residual_norms,
        flags,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Final-fit loss paired with a basis method (PLS and fPC fit by least
/// squares unless the caller overrides it).
pub fn default_fit_loss(config: &ExtractionConfig) -> CheckLossSpec {
    match config.method {
        BasisMethod::Pls => CheckLossSpec::LeastSquares,
        _ => config.loss.clone(),
    }
}

/// Mean loss of `pred` against `y` under `loss` (squared error for LS,
/// level-averaged check loss for composite fits).
pub(crate) fn mean_loss(loss: &CheckLossSpec, y: &[f64], pred: &model::Prediction) -> f64 {
    let n = y.len() as f64;
    match loss {
        CheckLossSpec::LeastSquares => y.iter().zip(&pred.values).map(|(v, p)| (v - p[0]).powi(2)).sum::<f64>() / n,
        _ => {
            let levels = loss.levels();
            let mut total = 0.0;
            for (v, p) in y.iter().zip(&pred.values) {
                for (tau, q) in levels.iter().zip(p) {
                    total += check_loss(v - q, *tau);
                }
            }
            total / (n * levels.len() as f64)
        }
    }
}

/// Chooses `K` in `1..=k_max` by cross validation or BIC. Ties go to the
/// smaller `K`.
pub fn select_k(sample: &FunctionalSample, config: &ExtractionConfig) -> Result<usize> {
    config.validate(sample.n(), sample.m())?;
    let y = sample.responses().ok_or(ExtractError::MissingResponses)?;
    let loss = default_fit_loss(config);
    let k_max = config.k_max;
    if k_max <= 1 {
        return Ok(k_max);
    }
    let criteria: Vec<f64> = match config.stop_rule {
        StopRule::FixedK => return Ok(k_max),
        StopRule::Bic => {
            let full = extract_k(sample, config, k_max)?;
            let n = sample.n() as f64;
            (1..=k_max)
                .map(|k| {
                    if k > full.k() {
                        return Ok(f64::INFINITY);
                    }
                    let fit = model::fit_model(sample, &full.truncate(k), &loss)?;
                    let pred = model::predict(&fit, sample)?;
                    let train = mean_loss(&loss, y, &pred).max(f64::MIN_POSITIVE);
                    Ok(n * train.ln() + k as f64 * n.ln())
                })
                .collect::<Result<Vec<_>>>()?
        }
        StopRule::CrossValidation { folds } => {
            let mut idx: Vec<usize> = (0..sample.n()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
            let mut totals = vec![0.0; k_max];
            let mut counts = vec![0usize; k_max];
            for f in 0..folds {
                let test: Vec<usize> = idx.iter().copied().skip(f).step_by(folds).collect();
                let mut train: Vec<usize> = idx
                    .iter()
                    .enumerate()
                    .filter(|(pos, _)| pos % folds != f)
                    .map(|(_, &i)| i)
                    .collect();
                train.sort_unstable();
                let train_s = sample.subset(&train);
                let test_s = sample.subset(&test);
                let kf = k_max.min(train.len().saturating_sub(1));
                let full = extract_k(&train_s, config, kf)?;
                let yt = test_s.responses().expect("subset keeps responses");
                for k in 1..=k_max {
                    if k > full.k() {
                        totals[k - 1] = f64::INFINITY;
                        continue;
                    }
                    let fit = model::fit_model(&train_s, &full.truncate(k), &loss)?;
                    let pred = model::predict(&fit, &test_s)?;
                    totals[k - 1] += mean_loss(&loss, yt, &pred) * yt.len() as f64;
                    counts[k - 1] += yt.len();
                }
            }
            totals
                .iter()
                .zip(&counts)
                .map(|(t, c)| if *c == 0 { f64::INFINITY } else { t / *c as f64 })
                .collect()
        }
    };
    let mut best = 0;
    for (k, v) in criteria.iter().enumerate() {
        if *v < criteria[best] {
            best = k;
        }
    }
    Ok(best + 1)
}
