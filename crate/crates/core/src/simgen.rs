//! Simulation designs with known coefficient functions.
//!
//! Seeds: every random stream is a `ChaCha8Rng` seeded from a 64-bit value.
//! Sub-streams are derived with [`derive_seed`], which folds each index into
//! the parent seed through the splitmix64 finalizer, so
//! `derive_seed(master, &[replication, stream])` gives disjoint,
//! order-independent streams per replication.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgrid::{self, column_mean_var, FgridError, FunctionalSample, Grid, InnerProduct};

pub const SIM1_M: usize = 201;
pub const SIM1_J: usize = 50;
pub const SIM2_M: usize = 256;
pub const SIM2_J: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("source curves have {positive} positive eigenvalues, need {needed}")]
    InsufficientRank { needed: usize, positive: usize },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error(transparent)]
    Grid(#[from] FgridError),
}

pub type Result<T> = std::result::Result<T, SimError>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for the index path `path` under `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &i| {
        splitmix64(acc ^ splitmix64(i.wrapping_add(1)))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLaw {
    #[default]
    Gaussian,
    Cauchy,
}

impl std::fmt::Display for ErrorLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorLaw::Gaussian => "gaussian",
            ErrorLaw::Cauchy => "cauchy",
        })
    }
}

/// `n` standard Gaussian or standard Cauchy draws.
pub fn sample_error(law: ErrorLaw, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match law {
        ErrorLaw::Gaussian => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        ErrorLaw::Cauchy => (0..n).map(|_| (PI * (rng.random::<f64>() - 0.5)).tan()).collect(),
    }
}

/// A simulated sample with its ground truth.
#[derive(Clone, Debug)]
pub struct SimData {
    pub sample: FunctionalSample,
    pub gamma: Vec<f64>,
    /// Noise-free responses `<gamma, Z_i>`.
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim1Design {
    pub n: usize,
    #[serde(default)]
    pub error: ErrorLaw,
    /// Multiplier on the error draws (1 reproduces the standard design).
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Sim1Design {
    pub fn new(n: usize, error: ErrorLaw, seed: u64) -> Self {
        Self {
            n,
            error,
            noise_scale: 1.0,
            seed,
        }
    }
}

/// `sqrt(2) cos(j pi t)` on the grid.
pub fn cosine_basis(grid: &Grid, j: usize) -> Vec<f64> {
    grid.points()
        .iter()
        .map(|t| SQRT_2 * (j as f64 * PI * t).cos())
        .collect()
}

pub fn sim1_gamma_coef(j: usize) -> f64 {
    if j == 1 {
        0.5
    } else {
        let s = if j % 2 == 1 { 1.0 } else { -1.0 };
        (20.0 / 3.0) * s * (j as f64).powi(-2)
    }
}

pub fn sim1_loading(j: usize) -> f64 {
    let s = if j % 2 == 1 { 1.0 } else { -1.0 };
    s * (j as f64).powf(-0.55)
}

/// True coefficient function of the first design on its grid.
pub fn sim1_gamma() -> Vec<f64> {
    let grid = Grid::uniform(SIM1_M).expect("fixed grid");
    let mut gamma = vec![0.0; SIM1_M];
    for j in 1..=SIM1_J {
        let c = sim1_gamma_coef(j);
        for (g, p) in gamma.iter_mut().zip(cosine_basis(&grid, j)) {
            *g += c * p;
        }
    }
    gamma
}

/// Curves `Z_i = sum_j v_j U_ij phi_j`, responses `<gamma, Z_i> + eps_i`.
pub fn gen_sim1(design: &Sim1Design) -> Result<SimData> {
    if design.n < 2 {
        return Err(SimError::InvalidDesign(format!("n = {} is below 2", design.n)));
    }
    if !design.noise_scale.is_finite() || design.noise_scale < 0.0 {
        return Err(SimError::InvalidDesign(format!("noise scale {}", design.noise_scale)));
    }
    let grid = Grid::uniform(SIM1_M)?;
    let n = design.n;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, &[0]));
    let half = 3f64.sqrt();
    let u = DMatrix::from_fn(n, SIM1_J, |_, _| -half + 2.0 * half * rng.random::<f64>());
    let phi = DMatrix::from_fn(SIM1_J, SIM1_M, |j, t| {
        sim1_loading(j + 1) * SQRT_2 * ((j + 1) as f64 * PI * grid.point(t)).cos()
    });
    let curves = &u * &phi;
    let gamma = sim1_gamma();
    let signal = functional_signal(&grid, &curves, &gamma)?;
    let noise: Vec<f64> = sample_error(design.error, n, derive_seed(design.seed, &[1]))
        .into_iter()
        .map(|e| e * design.noise_scale)
        .collect();
    let y = signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
    let sample = FunctionalSample::new(grid, curves)?.with_responses(y)?;
    Ok(SimData {
        sample,
        gamma,
        signal,
        noise,
    })
}

fn functional_signal(grid: &Grid, curves: &DMatrix<f64>, gamma: &[f64]) -> Result<Vec<f64>> {
    curves
        .row_iter()
        .map(|r| {
            let row: Vec<f64> = r.iter().copied().collect();
            fgrid::inner_product(grid, &row, gamma, InnerProduct::L2Weighted).map_err(SimError::from)
        })
        .collect()
}

/// Coefficient window selector: case `i` puts `a_j = (-1)^j` on
/// `j in 5(i-1)+1 ..= 5i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sim2Case {
    I,
    Ii,
    Iii,
    Iv,
}

impl Sim2Case {
    pub const ALL: [Sim2Case; 4] = [Sim2Case::I, Sim2Case::Ii, Sim2Case::Iii, Sim2Case::Iv];

    /// One-based component indices with nonzero coefficients.
    pub fn window(self) -> std::ops::RangeInclusive<usize> {
        let i = match self {
            Sim2Case::I => 0,
            Sim2Case::Ii => 1,
            Sim2Case::Iii => 2,
            Sim2Case::Iv => 3,
        };
        5 * i + 1..=5 * i + 5
    }

    pub fn coefficient(self, j: usize) -> f64 {
        if self.window().contains(&j) {
            if j % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    }
}

impl std::fmt::Display for Sim2Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sim2Case::I => "i",
            Sim2Case::Ii => "ii",
            Sim2Case::Iii => "iii",
            Sim2Case::Iv => "iv",
        })
    }
}

/// Parameters of the synthetic source curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_terms")]
    pub terms: usize,
    /// Amplitude of term `k` is `exp(-decay * (k - 1))`.
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Envelope `exp(-damping * t)` shared by all terms.
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_m() -> usize {
    SIM2_M
}
fn default_terms() -> usize {
    30
}
fn default_decay() -> f64 {
    0.2
}
fn default_damping() -> f64 {
    1.0
}

impl SyntheticSource {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            m: SIM2_M,
            terms: default_terms(),
            decay: default_decay(),
            damping: default_damping(),
            seed,
        }
    }

    /// `x_i(t) = exp(-damping t) sum_k exp(-decay (k-1)) xi_ik cos(k pi t + psi_ik)`
    /// with standard Gaussian `xi` and uniform phases `psi`.
    pub fn generate(&self) -> Result<DMatrix<f64>> {
        if self.n < 2 || self.m < 2 || self.terms == 0 {
            return Err(SimError::InvalidDesign(format!(
                "synthetic source needs n, m >= 2 and terms >= 1 (n={}, m={}, terms={})",
                self.n, self.m, self.terms
            )));
        }
        let grid = Grid::uniform(self.m)?;
        let pts = grid.points();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut curves = DMatrix::zeros(self.n, self.m);
        for i in 0..self.n {
            for k in 1..=self.terms {
                let amp = (-self.decay * (k - 1) as f64).exp() * rng.sample::<f64, _>(StandardNormal);
                let phase = 2.0 * PI * rng.random::<f64>();
                for (j, t) in pts.iter().enumerate() {
                    curves[(i, j)] += amp * (k as f64 * PI * t + phase).cos();
                }
            }
            for (j, t) in pts.iter().enumerate() {
                curves[(i, j)] *= (-self.damping * t).exp();
            }
        }
        Ok(curves)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sim2Source {
    Synthetic(SyntheticSource),
    /// Curve CSV with a header row and one subject per row.
    Csv {
        path: std::path::PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim2Design {
    pub source: Sim2Source,
    pub case: Sim2Case,
    #[serde(default)]
    pub error: ErrorLaw,
    /// Error scale is `sd(signal) * sqrt(5) * noise_multiplier`.
    #[serde(default = "one")]
    pub noise_multiplier: f64,
}

/// Fixed part of the second design: source curves, truth and signal. Only
/// the errors change between draws.
#[derive(Clone, Debug)]
pub struct Sim2Setup {
    pub curves: FunctionalSample,
    pub case: Sim2Case,
    pub components: DMatrix<f64>,
    pub gamma: Vec<f64>,
    pub signal: Vec<f64>,
    pub error: ErrorLaw,
    pub error_scale: f64,
}

impl Sim2Setup {
    pub fn from_design(design: &Sim2Design) -> Result<Self> {
        let curves = match &design.source {
            Sim2Source::Synthetic(s) => s.generate()?,
            Sim2Source::Csv { path } => {
                crate::io::read_curve_csv(path)
                    .map_err(|e| SimError::InvalidDesign(e.to_string()))?
                    .curves
            }
        };
        Self::new(curves, design.case, design.error, design.noise_multiplier)
    }

    pub fn new(curves: DMatrix<f64>, case: Sim2Case, error: ErrorLaw, noise_multiplier: f64) -> Result<Self> {
        if !noise_multiplier.is_finite() || noise_multiplier < 0.0 {
            return Err(SimError::InvalidDesign(format!("noise multiplier {noise_multiplier}")));
        }
        let grid = Grid::uniform(curves.ncols())?;
        let sample = FunctionalSample::new(grid, curves)?;
        let fpc = fgrid::fpc_basis(&sample, SIM2_J)?;
        if fpc.is_truncated() {
            return Err(SimError::InsufficientRank {
                needed: SIM2_J,
                positive: fpc.basis.k(),
            });
        }
        let components = fpc.basis.functions().clone();
        let m = sample.m();
        let mut gamma = vec![0.0; m];
        for j in case.window() {
            let a = case.coefficient(j);
            for (g, v) in gamma.iter_mut().zip(components.row(j - 1).iter()) {
                *g += a * v;
            }
        }
        let signal = functional_signal(&grid, sample.curves(), &gamma)?;
        let (_, var) = column_mean_var(&signal);
        let error_scale = var.sqrt() * 5f64.sqrt() * noise_multiplier;
        Ok(Self {
            curves: sample,
            case,
            components,
            gamma,
            signal,
            error,
            error_scale,
        })
    }

    /// Responses with freshly drawn errors.
    pub fn draw(&self, seed: u64) -> Result<SimData> {
        let noise: Vec<f64> = sample_error(self.error, self.signal.len(), seed)
            .into_iter()
            .map(|e| e * self.error_scale)
            .collect();
        let y = self.signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
        Ok(SimData {
            sample: self.curves.clone().with_responses(y)?,
            gamma: self.gamma.clone(),
            signal: self.signal.clone(),
            noise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        let a = derive_seed(7, &[0, 1]);
        assert_eq!(a, derive_seed(7, &[0, 1]));
        assert_ne!(a, derive_seed(7, &[1, 0]));
        assert_ne!(a, derive_seed(8, &[0, 1]));
        assert_ne!(derive_seed(7, &[0]), derive_seed(7, &[0, 0]));
    }

    #[test]
    fn gamma_at_zero_matches_direct_sum() {
        let mut s = 0.5;
        for j in 2..=50 {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            s += 20.0 / 3.0 * sign / (j * j) as f64;
        }
        assert!((sim1_gamma()[0] - SQRT_2 * s).abs() < 1e-12);
    }

    #[test]
    fn cosine_gram_on_fine_grid_has_closed_form() {
        // Sum_{i=0}^{N} 2 cos(a pi i/N) cos(b pi i/N) = N + 2 for a = b, 2 for
        // a != b of equal parity and 0 otherwise (0 < a, b < N).
        let grid = Grid::uniform(SIM1_M).unwrap();
        let n = (SIM1_M - 1) as f64;
        for a in 1..=8 {
            for b in 1..=8 {
                let ip = fgrid::inner_product(
                    &grid,
                    &cosine_basis(&grid, a),
                    &cosine_basis(&grid, b),
                    InnerProduct::L2Weighted,
                )
                .unwrap();
                let want = if a == b {
                    1.0 + 2.0 / n
                } else if (a + b) % 2 == 0 {
                    2.0 / n
                } else {
                    0.0
                };
                assert!((ip - want).abs() < 1e-12, "{a},{b}: {ip}");
            }
        }
    }

    #[test]
    fn sim1_is_reproducible_and_self_consistent() {
        let d = Sim1Design::new(30, ErrorLaw::Cauchy, 11);
        let a = gen_sim1(&d).unwrap();
        let b = gen_sim1(&d).unwrap();
        assert_eq!(a.sample, b.sample);
        let y = a.sample.responses().unwrap();
        for i in 0..30 {
            let row: Vec<f64> = a.sample.curves().row(i).iter().copied().collect();
            let ip = fgrid::inner_product(a.sample.grid(), &row, &a.gamma, InnerProduct::L2Weighted).unwrap();
            assert_eq!(a.signal[i], ip);
            assert_eq!(y[i], a.signal[i] + a.noise[i]);
        }
    }

    #[test]
    fn error_streams_repeat() {
        assert_eq!(
            sample_error(ErrorLaw::Gaussian, 5, 3),
            sample_error(ErrorLaw::Gaussian, 5, 3)
        );
        assert_ne!(
            sample_error(ErrorLaw::Cauchy, 5, 3),
            sample_error(ErrorLaw::Cauchy, 5, 4)
        );
    }

    #[test]
    fn error_moments() {
        let g = sample_error(ErrorLaw::Gaussian, 1_000_000, 21);
        let (_, var) = column_mean_var(&g);
        assert!((0.99..=1.01).contains(&var), "{var}");
        let mut c = sample_error(ErrorLaw::Cauchy, 1_000_000, 22);
        c.sort_by(f64::total_cmp);
        let med = 0.5 * (c[499_999] + c[500_000]);
        assert!(med.abs() <= 0.01, "{med}");
    }

    #[test]
    fn sim2_cases_and_scale() {
        let src = SyntheticSource::new(60, 5).generate().unwrap();
        for case in Sim2Case::ALL {
            let setup = Sim2Setup::new(src.clone(), case, ErrorLaw::Gaussian, 1.0).unwrap();
            let grid = *setup.curves.grid();
            for j in 1..=SIM2_J {
                let phi: Vec<f64> = setup.components.row(j - 1).iter().copied().collect();
                let c = fgrid::inner_product(&grid, &phi, &setup.gamma, InnerProduct::L2Weighted).unwrap();
                assert!((c - case.coefficient(j)).abs() < 1e-8, "{case} {j}: {c}");
            }
            let (_, var) = column_mean_var(&setup.signal);
            assert!((setup.error_scale - var.sqrt() * 5f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sim2_rejects_low_rank_source() {
        let src = DMatrix::from_fn(30, 40, |i, j| (i as f64) * (j as f64).sin() + (j as f64).cos());
        assert!(matches!(
            Sim2Setup::new(src, Sim2Case::I, ErrorLaw::Gaussian, 1.0),
            Err(SimError::InsufficientRank { .. })
        ));
    }
}
