//! Grid-based functional numerics.
//!
//! Curves are stored as an `n x m` matrix whose row `i` holds `z_i(t_j)` on a
//! uniform grid over `[0, 1]`. Two inner products are available: a plain grid
//! sum and the `dt`-weighted Riemann sum that approximates the `L2[0, 1]`
//! integral. Every basis family in this crate is normalized and projected with
//! the weighted convention so that reconstructed coefficient functions live on
//! the scale of the integral model.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variance below which a grid column is treated as constant.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Relative eigenvalue threshold used to decide numeric rank in [`fpc_basis`].
const EIGEN_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FgridError {
    #[error("a grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid points must be uniformly spaced from 0 to 1")]
    NonUniform,
    #[error("grid mismatch: expected {expected} points, got {actual}")]
    GridMismatch { expected: usize, actual: usize },
    #[error("{} grid column(s) have variance below 1e-12 (first: column {})", .columns.len(), .columns.first().copied().unwrap_or(0))]
    DegenerateColumn { columns: Vec<usize> },
    #[error("need at least {needed} curves, got {got}")]
    TooFewCurves { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, FgridError>;

/// A uniform grid `t_j = (j - 1) / (m - 1)`, `j = 1..m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    m: usize,
}

impl Grid {
    pub fn uniform(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(FgridError::TooFewPoints(m));
        }
        Ok(Self { m })
    }

    /// Accepts explicit grid points, rejecting anything that is not the
    /// uniform grid from 0 to 1.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        let grid = Self::uniform(points.len())?;
        let dt = grid.spacing();
        let tol = 1e-9 * dt.max(1e-3);
        for (j, &t) in points.iter().enumerate() {
            if !t.is_finite() || (t - j as f64 * dt).abs() > tol {
                return Err(FgridError::NonUniform);
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.m - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        j as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.point(j)).collect()
    }

    /// Multiplier applied to a raw grid sum under `convention`.
    pub fn weight(&self, convention: InnerProduct) -> f64 {
        match convention {
            InnerProduct::GridSum => 1.0,
            InnerProduct::L2Weighted => self.spacing(),
        }
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.m {
            return Err(FgridError::GridMismatch {
                expected: self.m,
                actual: len,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerProduct {
    /// `sum_j f(t_j) g(t_j)`
    GridSum,
    /// `dt * sum_j f(t_j) g(t_j)`
    L2Weighted,
}

pub fn inner_product(grid: &Grid, f: &[f64], g: &[f64], convention: InnerProduct) -> Result<f64> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    let raw: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok(grid.weight(convention) * raw)
}

pub fn norm(grid: &Grid, f: &[f64], convention: InnerProduct) -> Result<f64> {
    inner_product(grid, f, f, convention).map(f64::sqrt)
}

/// Curves on a shared grid, with optional scalar covariates and responses.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalSample {
    grid: Grid,
    curves: DMatrix<f64>,
    scalars: Option<DMatrix<f64>>,
    responses: Option<Vec<f64>>,
}

impl FunctionalSample {
    pub fn new(grid: Grid, curves: DMatrix<f64>) -> Result<Self> {
        grid.check_len(curves.ncols())?;
        if curves.nrows() == 0 {
            return Err(FgridError::TooFewCurves { needed: 1, got: 0 });
        }
        if curves.iter().any(|v| !v.is_finite()) {
            return Err(FgridError::NonFinite("curves"));
        }
        Ok(Self {
            grid,
            curves,
            scalars: None,
            responses: None,
        })
    }

    pub fn with_responses(mut self, responses: Vec<f64>) -> Result<Self> {
        if responses.len() != self.n() {
            return Err(FgridError::DimensionMismatch(format!(
                "{} responses for {} curves",
                responses.len(),
                self.n()
            )));
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(FgridError::NonFinite("responses"));
        }
        self.responses = Some(responses);
        Ok(self)
    }

    pub fn with_scalars(mut self, scalars: DMatrix<f64>) -> Result<Self> {
        if scalars.nrows() != self.n() {
            return Err(FgridError::DimensionMismatch(format!(
                "{} scalar rows for {} curves",
                scalars.nrows(),
                self.n()
            )));
        }
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(FgridError::NonFinite("scalars"));
        }
        self.scalars = if scalars.ncols() == 0 { None } else { Some(scalars) };
        Ok(self)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.curves.nrows()
    }

    pub fn m(&self) -> usize {
        self.curves.ncols()
    }

    pub fn curves(&self) -> &DMatrix<f64> {
        &self.curves
    }

    pub fn scalars(&self) -> Option<&DMatrix<f64>> {
        self.scalars.as_ref()
    }

    pub fn scalar_count(&self) -> usize {
        self.scalars.as_ref().map_or(0, |s| s.ncols())
    }

    pub fn responses(&self) -> Option<&[f64]> {
        self.responses.as_deref()
    }

    /// Same grid, scalars and responses with a replaced curve matrix.
    pub fn with_curves(&self, curves: DMatrix<f64>) -> Result<Self> {
        self.grid.check_len(curves.ncols())?;
        if curves.nrows() != self.n() {
            return Err(FgridError::DimensionMismatch(format!(
                "{} curve rows for {} subjects",
                curves.nrows(),
                self.n()
            )));
        }
        Ok(Self {
            grid: self.grid,
            curves,
            scalars: self.scalars.clone(),
            responses: self.responses.clone(),
        })
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let curves = self.curves.select_rows(idx);
        let scalars = self.scalars.as_ref().map(|s| s.select_rows(idx));
        let responses = self.responses.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect());
        Self {
            grid: self.grid,
            curves,
            scalars,
            responses,
        }
    }
}

/// Per-column affine map `z -> (z - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ColumnTransform {
    pub fn identity(m: usize) -> Self {
        Self {
            means: vec![0.0; m],
            scales: vec![1.0; m],
        }
    }

    pub fn apply(&self, curves: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if curves.ncols() != self.means.len() {
            return Err(FgridError::GridMismatch {
                expected: self.means.len(),
                actual: curves.ncols(),
            });
        }
        let mut out = curves.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, s) = (self.means[j], self.scales[j]);
            col.apply(|v| *v = (*v - mu) / s);
        }
        Ok(out)
    }
}

/// What to do with a grid column whose variance is below [`DEGENERATE_VARIANCE`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Center the column but leave it unscaled.
    KeepUnscaled,
}

pub(crate) fn column_mean_var(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    if col.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Standardizes every grid column to mean 0 and variance 1 (denominator
/// `n - 1`).
pub fn standardize_columns(sample: &FunctionalSample) -> Result<(FunctionalSample, ColumnTransform)> {
    standardize_columns_with(sample, DegeneratePolicy::Error)
}

pub fn standardize_columns_with(
    sample: &FunctionalSample,
    policy: DegeneratePolicy,
) -> Result<(FunctionalSample, ColumnTransform)> {
    if sample.n() < 2 {
        return Err(FgridError::TooFewCurves {
            needed: 2,
            got: sample.n(),
        });
    }
    let mut means = Vec::with_capacity(sample.m());
    let mut scales = Vec::with_capacity(sample.m());
    let mut degenerate = Vec::new();
    for (j, col) in sample.curves.column_iter().enumerate() {
        let (mean, var) = column_mean_var(col.as_slice());
        means.push(mean);
        if var < DEGENERATE_VARIANCE {
            degenerate.push(j);
            scales.push(1.0);
        } else {
            scales.push(var.sqrt());
        }
    }
    if !degenerate.is_empty() && policy == DegeneratePolicy::Error {
        return Err(FgridError::DegenerateColumn { columns: degenerate });
    }
    let transform = ColumnTransform { means, scales };
    let curves = transform.apply(&sample.curves)?;
    Ok((sample.with_curves(curves)?, transform))
}

/// Subtracts column means without rescaling.
pub fn center_columns(sample: &FunctionalSample) -> (FunctionalSample, ColumnTransform) {
    let means = sample
        .curves
        .column_iter()
        .map(|c| c.iter().sum::<f64>() / sample.n() as f64)
        .collect();
    let transform = ColumnTransform {
        means,
        scales: vec![1.0; sample.m()],
    };
    let curves = transform
        .apply(&sample.curves)
        .expect("transform built from the same sample");
    (sample.with_curves(curves).expect("shape preserved"), transform)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMethod {
    Fpc,
    Pls,
    Pqr,
    Pcqr,
}

impl std::fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BasisMethod::Fpc => "fPC",
            BasisMethod::Pls => "PLS",
            BasisMethod::Pqr => "PQR",
            BasisMethod::Pcqr => "PCQR",
        };
        f.write_str(s)
    }
}

/// `K` basis functions sampled on a grid, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    grid: Grid,
    functions: DMatrix<f64>,
    method: BasisMethod,
    normalization: InnerProduct,
}

impl BasisSet {
    /// Builds a basis after checking every row has unit norm (to 1e-10) under
    /// `normalization`.
    pub fn new(grid: Grid, functions: DMatrix<f64>, method: BasisMethod, normalization: InnerProduct) -> Result<Self> {
        if functions.nrows() > 0 {
            grid.check_len(functions.ncols())?;
        }
        let w = grid.weight(normalization);
        for row in functions.row_iter() {
            let nrm = (w * row.norm_squared()).sqrt();
            if (nrm - 1.0).abs() > 1e-10 {
                return Err(FgridError::DimensionMismatch(format!(
                    "basis row has norm {nrm}, expected 1"
                )));
            }
        }
        let functions = if functions.nrows() == 0 {
            DMatrix::zeros(0, grid.len())
        } else {
            functions
        };
        Ok(Self {
            grid,
            functions,
            method,
            normalization,
        })
    }

    pub fn empty(grid: Grid, method: BasisMethod) -> Self {
        Self {
            grid,
            functions: DMatrix::zeros(0, grid.len()),
            method,
            normalization: InnerProduct::L2Weighted,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.functions.nrows()
    }

    pub fn functions(&self) -> &DMatrix<f64> {
        &self.functions
    }

    pub fn function(&self, k: usize) -> Vec<f64> {
        self.functions.row(k).iter().copied().collect()
    }

    pub fn method(&self) -> BasisMethod {
        self.method
    }

    pub fn normalization(&self) -> InnerProduct {
        self.normalization
    }

    /// First `k` rows.
    pub fn truncate(&self, k: usize) -> Self {
        let k = k.min(self.k());
        Self {
            grid: self.grid,
            functions: self.functions.rows(0, k).into_owned(),
            method: self.method,
            normalization: self.normalization,
        }
    }
}

/// `n x K` projections of curves onto a basis.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub method: BasisMethod,
    pub convention: InnerProduct,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.column(k).iter().copied().collect()
    }
}

/// `score_ik = <curve_i, basis_k>` under the basis's own convention.
pub fn project(sample: &FunctionalSample, basis: &BasisSet) -> Result<ScoreMatrix> {
    if sample.grid() != basis.grid() {
        return Err(FgridError::GridMismatch {
            expected: basis.grid().len(),
            actual: sample.m(),
        });
    }
    let w = basis.grid().weight(basis.normalization());
    let values = if basis.k() == 0 {
        DMatrix::zeros(sample.n(), 0)
    } else {
        (sample.curves() * basis.functions().transpose()) * w
    };
    Ok(ScoreMatrix {
        values,
        method: basis.method(),
        convention: basis.normalization(),
    })
}

/// Result of [`fpc_basis`]: the basis plus the eigenvalues of the retained
/// components under the weighted convention.
#[derive(Clone, Debug)]
pub struct FpcOutcome {
    pub basis: BasisSet,
    pub eigenvalues: Vec<f64>,
    pub transform: ColumnTransform,
    pub requested: usize,
}

impl FpcOutcome {
    /// True when fewer than the requested number of components had positive
    /// eigenvalues.
    pub fn is_truncated(&self) -> bool {
        self.basis.k() < self.requested
    }
}

/// Leading `k` eigenfunctions of the empirical covariance operator of the
/// column-centered curves.
///
/// Rows are orthonormal under the weighted convention, sorted by decreasing
/// eigenvalue and signed so that the entry of largest magnitude is positive.
/// Uses the `n x n` dual Gram matrix when `n < m`.
pub fn fpc_basis(sample: &FunctionalSample, k: usize) -> Result<FpcOutcome> {
    let n = sample.n();
    let m = sample.m();
    if n < 2 {
        return Err(FgridError::TooFewCurves { needed: 2, got: n });
    }
    let (centered, transform) = center_columns(sample);
    let grid = *sample.grid();
    let dt = grid.spacing();
    let z = centered.curves();
    let denom = (n - 1) as f64;

    // Unit-Euclidean eigenvectors in grid coordinates with eigenvalues of
    // the weighted operator `dt * C`.
    let (values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if n < m {
        let gram = (z * z.transpose()) * (dt / denom);
        let eig = SymmetricEigen::new(gram);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]).max(0.0);
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for &i in order.iter().take(k.min(n)) {
            let lambda = eig.eigenvalues[i];
            if lambda <= EIGEN_RANK_TOL * top || lambda <= 0.0 {
                break;
            }
            let u = eig.eigenvectors.column(i);
            let v = z.transpose() * u;
            let nrm = v.norm();
            vals.push(lambda);
            vecs.push(v.iter().map(|x| x / nrm).collect());
        }
        (vals, vecs)
    } else {
        let cov = (z.transpose() * z) * (dt / denom);
        let eig = SymmetricEigen::new(cov);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]).max(0.0);
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for &i in order.iter().take(k.min(m)) {
            let lambda = eig.eigenvalues[i];
            if lambda <= EIGEN_RANK_TOL * top || lambda <= 0.0 {
                break;
            }
            vals.push(lambda);
            vecs.push(eig.eigenvectors.column(i).iter().copied().collect());
        }
        (vals, vecs)
    };

    let scale = 1.0 / dt.sqrt();
    let mut functions = DMatrix::zeros(vectors.len(), m);
    for (r, v) in vectors.iter().enumerate() {
        let sign = sign_of_largest(v);
        for j in 0..m {
            functions[(r, j)] = sign * v[j] * scale;
        }
    }
    let basis = BasisSet::new(grid, functions, BasisMethod::Fpc, InnerProduct::L2Weighted)?;
    Ok(FpcOutcome {
        basis,
        eigenvalues: values,
        transform,
        requested: k,
    })
}

fn sorted_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// `+1` if the entry of largest magnitude is nonnegative, else `-1`.
pub(crate) fn sign_of_largest(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}
