//! Final linear fits on extracted scores, coefficient functions and
//! prediction for new curves.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{ExtractError, ExtractionResult, Replay};
use crate::fgrid::{self, BasisMethod, FgridError, FunctionalSample, Grid, InnerProduct};
use crate::qsolve::{self, CheckLossSpec, SolveError, SolverDiagnostics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sample has no responses")]
    MissingResponses,
    #[error("model uses {expected} scalar covariates, sample has {got}")]
    ScalarMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] FgridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("score replay failed: {0}")]
    Replay(String),
}

impl From<ExtractError> for ModelError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Grid(g) => ModelError::Grid(g),
            other => ModelError::Replay(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How a composite fit collapses its per-level predictions to one value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointRule {
    /// The level closest to 0.5.
    #[default]
    MedianLevel,
    /// Average over all levels.
    LevelMean,
}

/// A fitted partial functional linear model.
///
/// The linear predictor at level `l` is
/// `intercepts[l] + scalars . scalar_coefs + sum_k score_coefs[k] t_k`, where
/// `t_k` are the replayed step scores. Equivalently
/// `raw_intercepts()[l] + scalars . scalar_coefs + <x, gamma_hat>` with the
/// weighted inner product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub method: BasisMethod,
    pub loss: CheckLossSpec,
    /// One per level (one for LS and single-quantile fits).
    pub intercepts: Vec<f64>,
    pub scalar_coefs: Vec<f64>,
    /// Coefficients on the step scores.
    pub score_coefs: Vec<f64>,
    /// Coefficients on the unit-norm reported basis functions.
    pub basis_coefs: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub gamma_hat: Vec<f64>,
    pub m: usize,
    pub replay: Replay,
    pub diagnostics: SolverDiagnostics,
    #[serde(default)]
    pub point_rule: PointRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Levels of the per-observation values (empty for least squares).
    pub levels: Vec<f64>,
    /// `values[i][l]`: prediction for observation `i` at level `l`.
    pub values: Vec<Vec<f64>>,
    pub point: Vec<f64>,
}

impl ModelFit {
    pub fn k(&self) -> usize {
        self.score_coefs.len()
    }

    pub fn grid(&self) -> Grid {
        Grid::uniform(self.m).expect("validated at fit time")
    }

    /// Intercepts for raw (uncentered) curves paired with `gamma_hat`.
    pub fn raw_intercepts(&self) -> Vec<f64> {
        let grid = self.grid();
        let shift = fgrid::inner_product(
            &grid,
            &self.replay.transform.means,
            &self.gamma_hat,
            InnerProduct::L2Weighted,
        )
        .expect("lengths fixed at fit time");
        self.intercepts.iter().map(|a| a - shift).collect()
    }
}

/// Fits `loss` on `[scalars | scores]` of a training sample.
pub fn fit_model(sample: &FunctionalSample, extraction: &ExtractionResult, loss: &CheckLossSpec) -> Result<ModelFit> {
    let y = sample.responses().ok_or(ModelError::MissingResponses)?;
    loss.validate()?;
    let scores = &extraction.scores.values;
    let k = scores.ncols();
    let p = sample.scalar_count();
    let design = design_matrix(
        sample.scalars(),
        scores,
        !matches!(loss, CheckLossSpec::Composite { .. }),
    );
    let fit = match loss {
        CheckLossSpec::LeastSquares => qsolve::fit_ls(&design, y)?,
        CheckLossSpec::Quantile { tau } => qsolve::fit_qr(&design, y, *tau)?,
        CheckLossSpec::Composite { levels } => qsolve::fit_cqr(&design, y, levels)?,
    };
    let (intercepts, rest) = match loss {
        CheckLossSpec::Composite { .. } => (fit.intercepts.clone(), &fit.slopes[..]),
        _ => (vec![fit.slopes[0]], &fit.slopes[1..]),
    };
    let scalar_coefs = rest[..p].to_vec();
    let score_coefs = rest[p..p + k].to_vec();
    let basis_coefs: Vec<f64> = score_coefs
        .iter()
        .zip(&extraction.score_scales)
        .map(|(g, s)| g * s)
        .collect();
    let m = sample.m();
    let mut gamma_hat = vec![0.0; m];
    let mut basis = Vec::with_capacity(k);
    for (kk, c) in basis_coefs.iter().enumerate() {
        let f = extraction.basis.function(kk);
        for (g, b) in gamma_hat.iter_mut().zip(&f) {
            *g += c * b;
        }
        basis.push(f);
    }
    Ok(ModelFit {
        method: extraction.method,
        loss: loss.clone(),
        intercepts,
        scalar_coefs,
        score_coefs,
        basis_coefs,
        basis,
        gamma_hat,
        m,
        replay: extraction.replay.clone(),
        diagnostics: fit.diagnostics,
        point_rule: PointRule::default(),
    })
}

fn design_matrix(scalars: Option<&DMatrix<f64>>, scores: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    let n = scores.nrows();
    let lead = usize::from(intercept);
    let p = scalars.map_or(0, |s| s.ncols());
    let k = scores.ncols();
    DMatrix::from_fn(n, lead + p + k, |i, j| {
        if j < lead {
            1.0
        } else if j < lead + p {
            scalars.expect("p > 0")[(i, j - lead)]
        } else {
            scores[(i, j - lead - p)]
        }
    })
}

/// Predicts new observations by replaying the training standardization,
/// projections and deflations on their curves.
pub fn predict(fit: &ModelFit, sample: &FunctionalSample) -> Result<Prediction> {
    if sample.m() != fit.m {
        return Err(FgridError::GridMismatch {
            expected: fit.m,
            actual: sample.m(),
        }
        .into());
    }
    if sample.scalar_count() != fit.scalar_coefs.len() {
        return Err(ModelError::ScalarMismatch {
            expected: fit.scalar_coefs.len(),
            got: sample.scalar_count(),
        });
    }
    let scores = fit.replay.scores(sample.curves())?;
    let n = sample.n();
    let levels = fit.loss.levels();
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut eta = 0.0;
        if let Some(x) = sample.scalars() {
            for (j, b) in fit.scalar_coefs.iter().enumerate() {
                eta += x[(i, j)] * b;
            }
        }
        for (k, g) in fit.score_coefs.iter().enumerate() {
            eta += scores[(i, k)] * g;
        }
        values.push(fit.intercepts.iter().map(|a| a + eta).collect::<Vec<_>>());
    }
    let pick = median_level(&levels);
    let point = values
        .iter()
        .map(|v: &Vec<f64>| match fit.point_rule {
            PointRule::MedianLevel => v[pick],
            PointRule::LevelMean => v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    Ok(Prediction { levels, values, point })
}

fn median_level(levels: &[f64]) -> usize {
    let mut best = 0;
    for (i, t) in levels.iter().enumerate() {
        if (t - 0.5).abs() < (levels[best] - 0.5).abs() - 1e-12 {
            best = i;
        }
    }
    best
}
