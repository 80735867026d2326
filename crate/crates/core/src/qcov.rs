//! Quantile, composite quantile and least-squares (partial) covariances.
//!
//! Each covariance is the coefficient of a standardized probe variable in a
//! joint fit of the response on `(intercept, adjusters, probe)` under the
//! requested loss. The response is never standardized.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::fgrid::{column_mean_var, DEGENERATE_VARIANCE};
use crate::qsolve::{self, CheckLossSpec, SolveError, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("probe variance is below 1e-12")]
    DegenerateProbe,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("expected a {expected} loss, got {got}")]
    WrongLoss { expected: &'static str, got: String },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

pub type Result<T> = std::result::Result<T, CovError>;

#[derive(Clone, Copy, Debug)]
pub struct CovarianceRequest<'a> {
    pub response: &'a [f64],
    pub probe: &'a [f64],
    /// Scalar covariates entering the same fit (`n x p`).
    pub adjusters: Option<&'a DMatrix<f64>>,
    pub loss: &'a CheckLossSpec,
}

/// (Partial) quantile covariance; `loss` must be a single quantile level.
pub fn quantile_cov(req: CovarianceRequest<'_>) -> Result<f64> {
    if !matches!(req.loss, CheckLossSpec::Quantile { .. }) {
        return Err(CovError::WrongLoss {
            expected: "quantile",
            got: req.loss.label(),
        });
    }
    covariance(req)
}

/// (Partial) composite quantile covariance; `loss` must be composite.
pub fn composite_quantile_cov(req: CovarianceRequest<'_>) -> Result<f64> {
    if !matches!(req.loss, CheckLossSpec::Composite { .. }) {
        return Err(CovError::WrongLoss {
            expected: "composite",
            got: req.loss.label(),
        });
    }
    covariance(req)
}

/// Least-squares (partial) covariance; `loss` must be least squares.
pub fn partial_cov(req: CovarianceRequest<'_>) -> Result<f64> {
    if !matches!(req.loss, CheckLossSpec::LeastSquares) {
        return Err(CovError::WrongLoss {
            expected: "least-squares",
            got: req.loss.label(),
        });
    }
    covariance(req)
}

/// Dispatches on the request's loss.
pub fn covariance(req: CovarianceRequest<'_>) -> Result<f64> {
    let mut probe = CovarianceProbe::new(req.response, req.adjusters, req.loss)?;
    probe.covariance(req.probe)
}

/// Reusable state for evaluating many probes against one response.
///
/// The design buffer is laid out row-major as
/// `[1 (unless composite), adjusters..., probe]`.
pub(crate) struct CovarianceProbe<'a> {
    response: &'a [f64],
    loss: &'a CheckLossSpec,
    levels: Vec<f64>,
    width: usize,
    rows: Vec<f64>,
    opts: SolverOptions,
}

impl<'a> CovarianceProbe<'a> {
    pub(crate) fn new(response: &'a [f64], adjusters: Option<&DMatrix<f64>>, loss: &'a CheckLossSpec) -> Result<Self> {
        loss.validate()?;
        let n = response.len();
        let p = adjusters.map_or(0, |a| a.ncols());
        if let Some(a) = adjusters {
            if a.nrows() != n {
                return Err(CovError::DimensionMismatch(format!(
                    "{} adjuster rows for {n} responses",
                    a.nrows()
                )));
            }
        }
        let lead = usize::from(!matches!(loss, CheckLossSpec::Composite { .. }));
        let width = lead + p + 1;
        let mut rows = vec![0.0; n * width];
        for i in 0..n {
            let row = &mut rows[i * width..(i + 1) * width];
            if lead == 1 {
                row[0] = 1.0;
            }
            if let Some(a) = adjusters {
                for k in 0..p {
                    row[lead + k] = a[(i, k)];
                }
            }
        }
        Ok(Self {
            response,
            loss,
            levels: loss.levels(),
            width,
            rows,
            opts: SolverOptions::default(),
        })
    }

    pub(crate) fn covariance(&mut self, probe: &[f64]) -> Result<f64> {
        let n = self.response.len();
        if probe.len() != n {
            return Err(CovError::DimensionMismatch(format!(
                "probe has {} entries for {n} responses",
                probe.len()
            )));
        }
        let (mean, var) = column_mean_var(probe);
        if !(var >= DEGENERATE_VARIANCE) {
            return Err(CovError::DegenerateProbe);
        }
        let sd = var.sqrt();
        let w = self.width;
        for (i, v) in probe.iter().enumerate() {
            self.rows[i * w + w - 1] = (v - mean) / sd;
        }
        let fit = match self.loss {
            CheckLossSpec::LeastSquares => {
                let design = DMatrix::from_row_slice(n, w, &self.rows);
                qsolve::fit_ls(&design, self.response)?
            }
            CheckLossSpec::Quantile { .. } => {
                qsolve::solve_rows(&self.rows, n, w, self.response, &self.levels, false, &self.opts)?
            }
            CheckLossSpec::Composite { .. } => {
                qsolve::solve_rows(&self.rows, n, w, self.response, &self.levels, true, &self.opts)?
            }
        };
        Ok(*fit.slopes.last().expect("probe column present"))
    }
}
