//! Check-loss optimization on small dense designs.
//!
//! Quantile regression and composite quantile regression share one solver:
//! every observation is replicated once per quantile level, each copy carries
//! its own level `tau_l`, and (for the composite loss) a level-specific
//! intercept. The stacked problem is solved as the bounded linear program
//!
//! ```text
//!     min  -y'a   s.t.  F'a = F'(1 - tau),  0 <= a <= 1
//! ```
//!
//! whose dual variables are the regression coefficients, by a Mehrotra
//! predictor-corrector interior point method. The structure of the stacked
//! design is exploited directly, so an `L`-level composite fit costs roughly
//! `L` times a single-level fit. A smoothed majorize-minimize iteration takes
//! over when the interior point method stalls, and the result is snapped to
//! an optimal vertex of the LP whenever one is found near the solution.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 500;
pub const GAP_TOLERANCE: f64 = 1e-8;

const STEP_DAMPING: f64 = 0.99995;
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("solver did not converge within {iterations} iterations")]
    SolverDiverged { iterations: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need more observations ({n}) than coefficients ({d})")]
    TooFewObservations { n: usize, d: usize },
    #[error("quantile level {0} must lie strictly inside (0, 1)")]
    InvalidLevel(f64),
    #[error("composite levels must be strictly increasing")]
    UnorderedLevels,
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, SolveError>;

/// Loss used for fitting and for covariance probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckLossSpec {
    LeastSquares,
    Quantile { tau: f64 },
    Composite { levels: Vec<f64> },
}

impl CheckLossSpec {
    pub fn quantile(tau: f64) -> Result<Self> {
        check_level(tau)?;
        Ok(Self::Quantile { tau })
    }

    pub fn composite(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(SolveError::DimensionMismatch("no composite levels".into()));
        }
        for &t in &levels {
            check_level(t)?;
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SolveError::UnorderedLevels);
        }
        Ok(Self::Composite { levels })
    }

    /// Levels `l / (count + 1)` for `l = 1..=count`.
    pub fn composite_uniform(count: usize) -> Result<Self> {
        Self::composite((1..=count).map(|l| l as f64 / (count + 1) as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::LeastSquares => Ok(()),
            Self::Quantile { tau } => check_level(*tau),
            Self::Composite { levels } => Self::composite(levels.clone()).map(|_| ()),
        }
    }

    /// Quantile levels of the loss; empty for least squares.
    pub fn levels(&self) -> Vec<f64> {
        match self {
            Self::LeastSquares => Vec::new(),
            Self::Quantile { tau } => vec![*tau],
            Self::Composite { levels } => levels.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::LeastSquares => "LS".into(),
            Self::Quantile { tau } => format!("QR({tau})"),
            Self::Composite { levels } => format!("CQR({} levels)", levels.len()),
        }
    }
}

fn check_level(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SolveError::InvalidLevel(tau));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    InteriorPoint,
    MajorizeMinimize,
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub path: SolverPath,
    /// Set when several optimal solutions were found (flat LP face) or the
    /// solution could not be snapped to a vertex.
    pub degenerate: bool,
    pub duality_gap: f64,
}

/// Coefficients of a fitted linear model.
///
/// For [`fit_qr`] and [`fit_ls`] any intercept is a column of the caller's
/// design, so `intercepts` is empty and `slopes` holds one coefficient per
/// design column. For [`fit_cqr`] `intercepts` holds one value per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
}

impl LinearFit {
    pub fn coefficients(&self) -> Vec<f64> {
        self.intercepts.iter().chain(&self.slopes).copied().collect()
    }

    /// Number of adjacent level pairs whose intercepts decrease.
    pub fn intercept_crossings(&self) -> usize {
        self.intercepts.windows(2).filter(|w| w[1] < w[0]).count()
    }
}

/// `rho_tau(u) = u (tau - 1[u < 0])`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Skip the interior point method and go straight to majorize-minimize.
    pub force_majorize_minimize: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: MAX_ITERATIONS,
            tolerance: GAP_TOLERANCE,
            force_majorize_minimize: false,
        }
    }
}

/// Linear quantile regression at level `tau`.
pub fn fit_qr(design: &DMatrix<f64>, y: &[f64], tau: f64) -> Result<LinearFit> {
    fit_qr_with(design, y, tau, &SolverOptions::default())
}

pub fn fit_qr_with(design: &DMatrix<f64>, y: &[f64], tau: f64, opts: &SolverOptions) -> Result<LinearFit> {
    check_level(tau)?;
    let rows = row_major(design, y)?;
    solve_rows(&rows, design.nrows(), design.ncols(), y, &[tau], false, opts)
}

/// Composite quantile regression: one intercept per level, shared slopes.
/// The design must not contain an intercept column.
pub fn fit_cqr(design: &DMatrix<f64>, y: &[f64], levels: &[f64]) -> Result<LinearFit> {
    fit_cqr_with(design, y, levels, &SolverOptions::default())
}

pub fn fit_cqr_with(design: &DMatrix<f64>, y: &[f64], levels: &[f64], opts: &SolverOptions) -> Result<LinearFit> {
    CheckLossSpec::composite(levels.to_vec())?;
    let rows = row_major(design, y)?;
    solve_rows(&rows, design.nrows(), design.ncols(), y, levels, true, opts)
}

/// Ordinary least squares through a Householder QR factorization.
pub fn fit_ls(design: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, d) = design.shape();
    if y.len() != n {
        return Err(SolveError::DimensionMismatch(format!(
            "{} responses for {n} rows",
            y.len()
        )));
    }
    if n <= d {
        return Err(SolveError::TooFewObservations { n, d });
    }
    if design.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let coef = if d == 0 {
        Vec::new()
    } else {
        let qr = design.clone().qr();
        let r = qr.r();
        let qty = qr.q().transpose() * nalgebra::DVector::from_column_slice(y);
        let rmax = (0..d).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
        if (0..d).any(|k| r[(k, k)].abs() <= 1e-10 * rmax) || rmax == 0.0 {
            return Err(SolveError::RankDeficientDesign);
        }
        let mut coef = vec![0.0; d];
        for k in (0..d).rev() {
            let mut acc = qty[k];
            for j in k + 1..d {
                acc -= r[(k, j)] * coef[j];
            }
            coef[k] = acc / r[(k, k)];
        }
        coef
    };
    let mut rss = 0.0;
    for i in 0..n {
        let fit: f64 = (0..d).map(|k| design[(i, k)] * coef[k]).sum();
        rss += (y[i] - fit).powi(2);
    }
    Ok(LinearFit {
        intercepts: Vec::new(),
        slopes: coef,
        objective: rss,
        diagnostics: SolverDiagnostics {
            iterations: 1,
            converged: true,
            path: SolverPath::LeastSquares,
            degenerate: false,
            duality_gap: 0.0,
        },
    })
}

fn row_major(design: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = design.shape();
    if y.len() != n {
        return Err(SolveError::DimensionMismatch(format!(
            "{} responses for {n} rows",
            y.len()
        )));
    }
    let mut rows = Vec::with_capacity(n * d);
    for i in 0..n {
        for k in 0..d {
            rows.push(design[(i, k)]);
        }
    }
    Ok(rows)
}

/// Solves the (possibly composite) check-loss problem for a row-major
/// `n x d` design.
pub(crate) fn solve_rows(
    rows: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    taus: &[f64],
    level_intercepts: bool,
    opts: &SolverOptions,
) -> Result<LinearFit> {
    if rows.len() != n * d || y.len() != n {
        return Err(SolveError::DimensionMismatch(format!(
            "design has {} entries for {n} x {d}, {} responses",
            rows.len(),
            y.len()
        )));
    }
    if n <= d {
        return Err(SolveError::TooFewObservations { n, d });
    }
    if rows.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let prob = Stacked {
        rows,
        n,
        d,
        y,
        taus,
        level_intercepts,
    };
    if prob.p() == 0 {
        let objective = prob.objective(&[]);
        return Ok(prob.into_fit(
            Vec::new(),
            objective,
            SolverDiagnostics {
                iterations: 0,
                converged: true,
                path: SolverPath::InteriorPoint,
                degenerate: false,
                duality_gap: 0.0,
            },
        ));
    }
    let start = prob.least_squares_start()?;

    let mut outcome = if opts.force_majorize_minimize {
        None
    } else {
        prob.interior_point(&start, opts)
    };
    if outcome.is_none() {
        outcome = prob.majorize_minimize(&start, opts);
    }
    let Some(raw) = outcome else {
        return Err(SolveError::SolverDiverged {
            iterations: opts.max_iterations,
        });
    };

    let (coef, objective, degenerate) = prob.snap_to_vertex(&raw.coef, raw.objective);
    Ok(prob.into_fit(
        coef,
        objective,
        SolverDiagnostics {
            iterations: raw.iterations,
            converged: true,
            path: raw.path,
            degenerate,
            duality_gap: raw.gap,
        },
    ))
}

struct RawSolution {
    coef: Vec<f64>,
    objective: f64,
    iterations: usize,
    gap: f64,
    path: SolverPath,
}

/// The stacked design: row `(l, i)` is `[e_l (if level intercepts), x_i]`
/// with response `y_i` and level `tau_l`.
struct Stacked<'a> {
    rows: &'a [f64],
    n: usize,
    d: usize,
    y: &'a [f64],
    taus: &'a [f64],
    level_intercepts: bool,
}

impl Stacked<'_> {
    fn levels(&self) -> usize {
        self.taus.len()
    }

    fn offset(&self) -> usize {
        if self.level_intercepts {
            self.levels()
        } else {
            0
        }
    }

    fn p(&self) -> usize {
        self.offset() + self.d
    }

    fn stacked_len(&self) -> usize {
        self.n * self.levels()
    }

    #[inline]
    fn x(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    fn into_fit(&self, coef: Vec<f64>, objective: f64, diagnostics: SolverDiagnostics) -> LinearFit {
        let off = self.offset();
        LinearFit {
            intercepts: coef[..off].to_vec(),
            slopes: coef[off..].to_vec(),
            objective,
            diagnostics,
        }
    }

    /// `out = F coef`, one entry per stacked row.
    fn fitted(&self, coef: &[f64], out: &mut [f64]) {
        let off = self.offset();
        for i in 0..self.n {
            let xb: f64 = self.x(i).iter().zip(&coef[off..]).map(|(a, b)| a * b).sum();
            for l in 0..self.levels() {
                let base = if self.level_intercepts { coef[l] } else { 0.0 };
                out[l * self.n + i] = base + xb;
            }
        }
    }

    /// `out = F' v`.
    fn at_mul(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let off = self.offset();
        for i in 0..self.n {
            let mut s = 0.0;
            for l in 0..self.levels() {
                let vr = v[l * self.n + i];
                s += vr;
                if self.level_intercepts {
                    out[l] += vr;
                }
            }
            for (k, xk) in self.x(i).iter().enumerate() {
                out[off + k] += s * xk;
            }
        }
    }

    /// `out = F' diag(q) F`, row-major `p x p`.
    fn gram(&self, q: &[f64], out: &mut [f64]) {
        let p = self.p();
        let off = self.offset();
        let d = self.d;
        out.fill(0.0);
        for i in 0..self.n {
            let x = self.x(i);
            let mut s = 0.0;
            for l in 0..self.levels() {
                let ql = q[l * self.n + i];
                s += ql;
                if self.level_intercepts {
                    out[l * p + l] += ql;
                    let row = &mut out[l * p + off..l * p + off + d];
                    for (o, xk) in row.iter_mut().zip(x) {
                        *o += ql * xk;
                    }
                }
            }
            for a in 0..d {
                let xa = x[a] * s;
                let row = &mut out[(off + a) * p + off..(off + a) * p + off + d];
                for b in a..d {
                    row[b] += xa * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                out[a * p + b] = out[b * p + a];
            }
        }
    }

    fn stacked_row(&self, r: usize, out: &mut [f64]) {
        let (l, i) = (r / self.n, r % self.n);
        out.fill(0.0);
        if self.level_intercepts {
            out[l] = 1.0;
        }
        out[self.offset()..].copy_from_slice(self.x(i));
    }

    fn objective(&self, coef: &[f64]) -> f64 {
        let off = self.offset();
        let mut total = 0.0;
        for i in 0..self.n {
            let xb: f64 = self.x(i).iter().zip(&coef[off..]).map(|(a, b)| a * b).sum();
            for (l, &tau) in self.taus.iter().enumerate() {
                let base = if self.level_intercepts { coef[l] } else { 0.0 };
                total += check_loss(self.y[i] - base - xb, tau);
            }
        }
        total
    }

    /// Weighted least squares start, also the rank check for the design.
    fn least_squares_start(&self) -> Result<Vec<f64>> {
        let p = self.p();
        let ones = vec![1.0; self.stacked_len()];
        let mut g = vec![0.0; p * p];
        self.gram(&ones, &mut g);
        let maxdiag = (0..p).map(|k| g[k * p + k]).fold(0.0, f64::max);
        if maxdiag <= 0.0 {
            return Err(SolveError::RankDeficientDesign);
        }
        let mut rhs = vec![0.0; p];
        let ystack: Vec<f64> = (0..self.stacked_len()).map(|r| self.y[r % self.n]).collect();
        self.at_mul(&ystack, &mut rhs);
        if !cholesky_in_place(&mut g, p, RANK_TOLERANCE * maxdiag) {
            return Err(SolveError::RankDeficientDesign);
        }
        cholesky_solve(&g, p, &mut rhs);
        Ok(rhs)
    }

    fn interior_point(&self, start: &[f64], opts: &SolverOptions) -> Option<RawSolution> {
        let nn = self.stacked_len();
        let p = self.p();
        let n = self.n;
        let tau_of = |r: usize| self.taus[r / n];

        // Primal: a in [0, 1], s = 1 - a. Dual: lambda (= -coef), z, w.
        let mut a: Vec<f64> = (0..nn).map(|r| 1.0 - tau_of(r)).collect();
        let mut s: Vec<f64> = (0..nn).map(tau_of).collect();
        let mut b = vec![0.0; p];
        self.at_mul(&a, &mut b);

        let mut lambda: Vec<f64> = start.iter().map(|v| -v).collect();
        let mut fit = vec![0.0; nn];
        self.fitted(start, &mut fit);
        let resid: Vec<f64> = (0..nn).map(|r| fit[r] - self.y[r % n]).collect();
        let ymax = self.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let delta = 0.5 * resid.iter().map(|v| v.abs()).sum::<f64>() / nn as f64 + 1e-6 * (1.0 + ymax);
        let mut z: Vec<f64> = resid.iter().map(|&r| r.max(0.0) + delta).collect();
        let mut w: Vec<f64> = resid.iter().map(|&r| (-r).max(0.0) + delta).collect();

        let mut q = vec![0.0; nn];
        let mut h = vec![0.0; nn];
        let mut rd = vec![0.0; nn];
        let mut ru = vec![0.0; nn];
        let mut rp = vec![0.0; p];
        let mut tmp_p = vec![0.0; p];
        let mut gram = vec![0.0; p * p];
        let mut fdl = vec![0.0; nn];
        let mut dx = vec![0.0; nn];
        let mut ds = vec![0.0; nn];
        let mut dz = vec![0.0; nn];
        let mut dw = vec![0.0; nn];
        let mut rxz = vec![0.0; nn];
        let mut rsw = vec![0.0; nn];
        let mut coef = vec![0.0; p];

        for it in 0..opts.max_iterations {
            for (c, l) in coef.iter_mut().zip(&lambda) {
                *c = -l;
            }
            let f = self.objective(&coef);
            let g: f64 = (0..nn).map(|r| self.y[r % n] * (a[r] - 1.0 + tau_of(r))).sum();
            let gap = f - g;
            if !f.is_finite() || !gap.is_finite() {
                return None;
            }
            if gap <= opts.tolerance * (1.0 + f.abs()) {
                return Some(RawSolution {
                    coef,
                    objective: f,
                    iterations: it,
                    gap,
                    path: SolverPath::InteriorPoint,
                });
            }

            // Residuals of the linear constraints.
            self.at_mul(&a, &mut tmp_p);
            for k in 0..p {
                rp[k] = b[k] - tmp_p[k];
            }
            self.fitted(&coef, &mut fit);
            // F lambda = -F coef = -fit.
            for r in 0..nn {
                ru[r] = 1.0 - a[r] - s[r];
                rd[r] = -self.y[r % n] + fit[r] - z[r] + w[r];
                q[r] = 1.0 / (z[r] / a[r] + w[r] / s[r]);
            }
            let mu = (dot(&a, &z) + dot(&s, &w)) / (2 * nn) as f64;

            self.gram(&q, &mut gram);
            let maxdiag = (0..p).map(|k| gram[k * p + k]).fold(0.0, f64::max);
            if !(maxdiag.is_finite() && maxdiag > 0.0) {
                return None;
            }
            if !cholesky_in_place(&mut gram, p, 1e-300) {
                // Near-singular normal matrix: regularize slightly and retry.
                self.gram(&q, &mut gram);
                for k in 0..p {
                    gram[k * p + k] += 1e-12 * maxdiag;
                }
                if !cholesky_in_place(&mut gram, p, 1e-300) {
                    return None;
                }
            }

            // Predictor (affine scaling) then corrector with the same factor.
            for r in 0..nn {
                rxz[r] = -a[r] * z[r];
                rsw[r] = -s[r] * w[r];
            }
            let mut alpha = (0.0, 0.0);
            for pass in 0..2 {
                for r in 0..nn {
                    h[r] = rd[r] - rxz[r] / a[r] + rsw[r] / s[r] - w[r] / s[r] * ru[r];
                    dx[r] = q[r] * h[r];
                }
                self.at_mul(&dx, &mut tmp_p);
                for k in 0..p {
                    tmp_p[k] += rp[k];
                }
                cholesky_solve(&gram, p, &mut tmp_p);
                // tmp_p now holds d lambda.
                self.fitted(&tmp_p, &mut fdl);
                for r in 0..nn {
                    dx[r] = q[r] * (fdl[r] - h[r]);
                    ds[r] = ru[r] - dx[r];
                    dz[r] = (rxz[r] - z[r] * dx[r]) / a[r];
                    dw[r] = (rsw[r] - w[r] * ds[r]) / s[r];
                }
                let ap = max_step(&a, &dx).min(max_step(&s, &ds));
                let ad = max_step(&z, &dz).min(max_step(&w, &dw));
                if pass == 0 {
                    let (ap, ad) = (ap.min(1.0), ad.min(1.0));
                    let mut mu_aff = 0.0;
                    for r in 0..nn {
                        mu_aff += (a[r] + ap * dx[r]) * (z[r] + ad * dz[r]) + (s[r] + ap * ds[r]) * (w[r] + ad * dw[r]);
                    }
                    mu_aff /= (2 * nn) as f64;
                    let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
                    for r in 0..nn {
                        rxz[r] = sigma * mu - a[r] * z[r] - dx[r] * dz[r];
                        rsw[r] = sigma * mu - s[r] * w[r] - ds[r] * dw[r];
                    }
                } else {
                    alpha = ((STEP_DAMPING * ap).min(1.0), (STEP_DAMPING * ad).min(1.0));
                }
            }
            let (ap, ad) = alpha;
            if !(ap > 0.0 && ad > 0.0) {
                return None;
            }
            for r in 0..nn {
                a[r] += ap * dx[r];
                s[r] += ap * ds[r];
                z[r] += ad * dz[r];
                w[r] += ad * dw[r];
            }
            for (l, dl) in lambda.iter_mut().zip(&tmp_p) {
                *l += ad * dl;
            }
        }
        None
    }

    /// Hunter-Lange majorize-minimize on the smoothed check loss with the
    /// smoothing parameter annealed from 1e-2 to 1e-8 (relative to the
    /// response scale).
    fn majorize_minimize(&self, start: &[f64], opts: &SolverOptions) -> Option<RawSolution> {
        let nn = self.stacked_len();
        let p = self.p();
        let n = self.n;
        let scale = {
            let mean = self.y.iter().sum::<f64>() / n as f64;
            let mad = self.y.iter().map(|v| (v - mean).abs()).sum::<f64>() / n as f64;
            mad.max(1e-12)
        };
        let mut coef = start.to_vec();
        let mut fit = vec![0.0; nn];
        let mut wts = vec![0.0; nn];
        let mut rhs_stack = vec![0.0; nn];
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        let mut f = self.objective(&coef);
        let mut iterations = 0;
        let schedule = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
        let per_stage = (opts.max_iterations / schedule.len()).max(1);
        for eps in schedule.map(|e| e * scale) {
            for _ in 0..per_stage {
                iterations += 1;
                self.fitted(&coef, &mut fit);
                for r in 0..nn {
                    let res = self.y[r % n] - fit[r];
                    wts[r] = 1.0 / (eps + res.abs());
                    rhs_stack[r] = wts[r] * self.y[r % n] + 2.0 * self.taus[r / n] - 1.0;
                }
                self.gram(&wts, &mut gram);
                let maxdiag = (0..p).map(|k| gram[k * p + k]).fold(0.0, f64::max);
                if !cholesky_in_place(&mut gram, p, 1e-14 * maxdiag) {
                    return None;
                }
                self.at_mul(&rhs_stack, &mut rhs);
                cholesky_solve(&gram, p, &mut rhs);
                let f_new = self.objective(&rhs);
                if !f_new.is_finite() {
                    return None;
                }
                let done = (f - f_new).abs() <= 1e-13 * (1.0 + f.abs());
                coef.copy_from_slice(&rhs);
                f = f_new;
                if done {
                    break;
                }
            }
        }
        Some(RawSolution {
            coef,
            objective: f,
            iterations,
            gap: f64::NAN,
            path: SolverPath::MajorizeMinimize,
        })
    }

    /// Tries vertices spanned by the rows with the smallest residuals and
    /// returns the minimum-norm optimal one, or the input if none is at least
    /// as good.
    fn snap_to_vertex(&self, coef: &[f64], objective: f64) -> (Vec<f64>, f64, bool) {
        let p = self.p();
        let nn = self.stacked_len();
        let mut fit = vec![0.0; nn];
        self.fitted(coef, &mut fit);
        let mut order: Vec<usize> = (0..nn).collect();
        let absres: Vec<f64> = (0..nn).map(|r| (self.y[r % self.n] - fit[r]).abs()).collect();
        order.sort_by(|&x, &y| absres[x].total_cmp(&absres[y]).then(x.cmp(&y)));

        // Greedy selection of p independent rows (plus one spare).
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut chosen: Vec<usize> = Vec::new();
        let mut spare = None;
        let mut row = vec![0.0; p];
        for &r in &order {
            self.stacked_row(r, &mut row);
            let rn = norm2(&row);
            if rn == 0.0 {
                continue;
            }
            let mut v = row.clone();
            for e in &basis {
                let c = dot(&v, e);
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= c * ei;
                }
            }
            let vn = norm2(&v);
            if vn > 1e-8 * rn {
                if chosen.len() < p {
                    v.iter_mut().for_each(|x| *x /= vn);
                    basis.push(v);
                    chosen.push(r);
                } else {
                    spare = Some(r);
                    break;
                }
            } else if chosen.len() == p {
                spare = Some(r);
                break;
            }
        }
        if chosen.len() < p {
            return (coef.to_vec(), objective, true);
        }

        let mut sets = vec![chosen.clone()];
        if let Some(e) = spare {
            for j in 0..p {
                let mut alt = chosen.clone();
                alt[j] = e;
                sets.push(alt);
            }
        }
        let accept = objective + 1e-9 * (1.0 + objective.abs());
        let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
        for set in &sets {
            if let Some(v) = self.vertex(set) {
                let f = self.objective(&v);
                if f <= accept {
                    found.push((v, f));
                }
            }
        }
        if found.is_empty() {
            return (coef.to_vec(), objective, true);
        }
        let fmin = found.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
        let tie = fmin + 1e-10 * (1.0 + fmin.abs());
        let optimal: Vec<&(Vec<f64>, f64)> = found.iter().filter(|(_, f)| *f <= tie).collect();
        let best = optimal
            .iter()
            .min_by(|x, y| norm2(&x.0).total_cmp(&norm2(&y.0)))
            .expect("nonempty");
        let bn = norm2(&best.0);
        let degenerate = optimal.iter().any(|(v, _)| {
            let diff: f64 = v.iter().zip(&best.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            diff > 1e-8 * (1.0 + bn)
        });
        (best.0.clone(), best.1, degenerate)
    }

    /// Coefficients interpolating the rows in `set` exactly.
    fn vertex(&self, set: &[usize]) -> Option<Vec<f64>> {
        let p = self.p();
        let mut mat = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        let mut row = vec![0.0; p];
        for (k, &r) in set.iter().enumerate() {
            self.stacked_row(r, &mut row);
            mat[k * p..(k + 1) * p].copy_from_slice(&row);
            rhs[k] = self.y[r % self.n];
        }
        lu_solve(&mut mat, p, &mut rhs).then_some(rhs)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest `alpha` with `v + alpha dv >= 0` (infinite if `dv >= 0`).
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for (x, dx) in v.iter().zip(dv) {
        if *dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

/// Lower Cholesky factor stored in the lower triangle of `a` (row-major).
/// Fails when a pivot drops to `min_pivot` or below.
pub(crate) fn cholesky_in_place(a: &mut [f64], p: usize, min_pivot: f64) -> bool {
    for j in 0..p {
        let mut diag = a[j * p + j];
        for k in 0..j {
            diag -= a[j * p + k] * a[j * p + k];
        }
        if !(diag > min_pivot) {
            return false;
        }
        let ljj = diag.sqrt();
        a[j * p + j] = ljj;
        for i in j + 1..p {
            let mut v = a[i * p + j];
            for k in 0..j {
                v -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = v / ljj;
        }
    }
    true
}

pub(crate) fn cholesky_solve(l: &[f64], p: usize, b: &mut [f64]) {
    for i in 0..p {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * p + k] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut v = b[i];
        for k in i + 1..p {
            v -= l[k * p + i] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
}

/// Gaussian elimination with partial pivoting; `false` if singular.
fn lu_solve(a: &mut [f64], p: usize, b: &mut [f64]) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return false;
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&x, &y| a[x * p + col].abs().total_cmp(&a[y * p + col].abs()))
            .expect("nonempty");
        if a[piv * p + col].abs() <= 1e-12 * scale {
            return false;
        }
        if piv != col {
            for k in 0..p {
                a.swap(piv * p + k, col * p + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..p {
            let f = a[r * p + col] / a[col * p + col];
            if f != 0.0 {
                for k in col..p {
                    a[r * p + k] -= f * a[col * p + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    for r in (0..p).rev() {
        let mut v = b[r];
        for k in r + 1..p {
            v -= a[r * p + k] * b[k];
        }
        b[r] = v / a[r * p + r];
    }
    true
}
