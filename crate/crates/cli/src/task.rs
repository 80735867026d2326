//! Single-fit task files and CSV ingestion.

use std::path::{Path, PathBuf};

use pfqr_core::evalbench::Method;
use pfqr_core::extract::{AdjusterPolicy, ExtractionConfig, StopRule};
use pfqr_core::fgrid::{DegeneratePolicy, FunctionalSample, Grid};
use pfqr_core::io::{self, Table};
use pfqr_core::model::PointRule;
use pfqr_core::qsolve::CheckLossSpec;
use serde::Deserialize;

use crate::error::CliError;

/// A fit described in JSON. Relative paths resolve against the task file's
/// directory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitTask {
    pub curves: PathBuf,
    #[serde(default)]
    pub scalars: Option<PathBuf>,
    pub responses: PathBuf,
    /// Column of the responses file; may be omitted when the file has one
    /// column or a column named `y`.
    #[serde(default)]
    pub response_column: Option<String>,
    pub method: Method,
    /// Number of basis functions, or the largest candidate under a selection rule.
    pub k: usize,
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Explicit composite levels; otherwise `cqr_levels` equally spaced ones.
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default = "default_cqr_levels")]
    pub cqr_levels: usize,
    #[serde(default)]
    pub point_rule: PointRule,
    #[serde(default)]
    pub degenerate_columns: DegeneratePolicy,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> f64 {
    0.5
}
fn default_cqr_levels() -> usize {
    9
}

impl FitTask {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let mut task: FitTask =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        task.curves = base.join(&task.curves);
        task.responses = base.join(&task.responses);
        task.scalars = task.scalars.map(|p| base.join(p));
        Ok(task)
    }

    pub fn loss(&self) -> Result<CheckLossSpec, CliError> {
        let loss = match (&self.levels, self.method) {
            (Some(levels), Method::CqrFpc | Method::Pcqr) => CheckLossSpec::Composite { levels: levels.clone() },
            (Some(_), _) => {
                return Err(CliError::Config(format!(
                    "levels only apply to composite methods, not {}",
                    self.method
                )))
            }
            _ => self.method.loss(self.tau, self.cqr_levels).map_err(CliError::Config)?,
        };
        loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(loss)
    }

    pub fn extraction(&self, loss: &CheckLossSpec) -> ExtractionConfig {
        ExtractionConfig {
            method: self.method.basis(),
            loss: loss.clone(),
            k_max: self.k,
            stop_rule: self.stop_rule,
            adjusters: AdjusterPolicy::Joint,
            degenerate_columns: self.degenerate_columns,
            seed: self.seed,
        }
    }

    pub fn sample(&self) -> Result<FunctionalSample, CliError> {
        let mut sample = load_curves(&self.curves, self.scalars.as_deref())?;
        let table = io::read_table(&self.responses)?;
        let y = response_column(&table, self.response_column.as_deref(), &self.responses)?;
        if y.len() != sample.n() {
            return Err(CliError::Mismatch(format!(
                "{} has {} rows, {} has {}",
                self.curves.display(),
                sample.n(),
                self.responses.display(),
                y.len()
            )));
        }
        sample = sample.with_responses(y)?;
        Ok(sample)
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Curves on the uniform grid over [0, 1] with one subject per row, plus
/// optional scalar covariates with matching rows.
pub fn load_curves(curves: &Path, scalars: Option<&Path>) -> Result<FunctionalSample, CliError> {
    let table = io::read_curve_csv(curves)?;
    let grid = Grid::uniform(table.curves.ncols())?;
    let mut sample = FunctionalSample::new(grid, table.curves)?;
    if let Some(p) = scalars {
        let x = io::read_table(p)?;
        if x.curves.nrows() != sample.n() {
            return Err(CliError::Mismatch(format!(
                "{} has {} rows, {} has {}",
                curves.display(),
                sample.n(),
                p.display(),
                x.curves.nrows()
            )));
        }
        sample = sample.with_scalars(x.curves)?;
    }
    Ok(sample)
}

fn response_column(table: &Table, name: Option<&str>, path: &Path) -> Result<Vec<f64>, CliError> {
    match name {
        Some(n) => Ok(table.column(n)?),
        None if table.header.len() == 1 => Ok(table.curves.column(0).iter().copied().collect()),
        None => table.column("y").map_err(|_| {
            CliError::Config(format!(
                "{} has {} columns; set response_column",
                path.display(),
                table.header.len()
            ))
        }),
    }
}
