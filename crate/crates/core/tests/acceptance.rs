//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `PFQR_ACCEPTANCE_REPLICATIONS` overrides the replication count of the
//! Monte-Carlo criteria (default 100 for the first design, 20 for the
//! second).

use std::process::ExitCode;

use nalgebra::DMatrix;
use pfqr_core::evalbench::{run_benchmark, BenchmarkConfig, Cell, DesignSpec, EvalReport, Method, Metric};
use pfqr_core::extract::{self, run_extraction, ExtractionConfig, ExtractionFlag};
use pfqr_core::fgrid::{self, BasisMethod, FunctionalSample, Grid, InnerProduct};
use pfqr_core::model::{fit_model, predict, ModelFit};
use pfqr_core::qsolve::{check_loss, fit_cqr, fit_qr, CheckLossSpec};
use pfqr_core::simgen::{gen_sim1, ErrorLaw, Sim1Design, Sim2Case, Sim2Source, SyntheticSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn replications(default: usize) -> usize {
    std::env::var("PFQR_ACCEPTANCE_REPLICATIONS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn within(ours: f64, target: f64, tol: f64) -> bool {
    (ours - target).abs() <= tol * target.abs()
}

/// Published Gaussian cells: (method, n, K, Bias², Var, MISE).
const GAUSSIAN: &[(Method, usize, usize, f64, f64, f64)] = &[
    (Method::Fpc, 100, 1, 3.63, 0.07, 3.70),
    (Method::Fpc, 200, 1, 3.64, 0.03, 3.67),
    (Method::Fpc, 500, 1, 3.69, 0.02, 3.70),
    (Method::Fpc, 100, 2, 0.78, 0.36, 1.14),
    (Method::Fpc, 200, 2, 0.86, 0.17, 1.03),
    (Method::Fpc, 500, 2, 0.86, 0.09, 0.95),
    (Method::Fpc, 100, 3, 0.32, 0.34, 0.67),
    (Method::Fpc, 200, 3, 0.28, 0.19, 0.47),
    (Method::Fpc, 500, 3, 0.29, 0.08, 0.38),
    (Method::QrFpc, 100, 1, 3.63, 0.09, 3.72),
    (Method::QrFpc, 200, 1, 3.63, 0.04, 3.68),
    (Method::QrFpc, 500, 1, 3.68, 0.02, 3.71),
    (Method::QrFpc, 100, 2, 0.77, 0.39, 1.16),
    (Method::QrFpc, 200, 2, 0.86, 0.18, 1.04),
    (Method::QrFpc, 500, 2, 0.86, 0.10, 0.96),
    (Method::QrFpc, 100, 3, 0.33, 0.38, 0.70),
    (Method::QrFpc, 200, 3, 0.28, 0.22, 0.50),
    (Method::QrFpc, 500, 3, 0.29, 0.09, 0.38),
    (Method::CqrFpc, 100, 1, 3.63, 0.07, 3.71),
    (Method::CqrFpc, 200, 1, 3.63, 0.04, 3.67),
    (Method::CqrFpc, 500, 1, 3.69, 0.02, 3.70),
    (Method::CqrFpc, 100, 2, 0.78, 0.36, 1.14),
    (Method::CqrFpc, 200, 2, 0.86, 0.17, 1.03),
    (Method::CqrFpc, 500, 2, 0.86, 0.09, 0.95),
    (Method::CqrFpc, 100, 3, 0.32, 0.35, 0.67),
    (Method::CqrFpc, 200, 3, 0.28, 0.20, 0.48),
    (Method::CqrFpc, 500, 3, 0.29, 0.08, 0.38),
    (Method::Pls, 100, 1, 0.54, 0.82, 1.36),
    (Method::Pls, 200, 1, 0.63, 0.20, 0.83),
    (Method::Pls, 500, 1, 0.59, 0.07, 0.66),
    (Method::Pls, 100, 2, 0.11, 1.07, 1.18),
    (Method::Pls, 200, 2, 0.12, 0.29, 0.41),
    (Method::Pls, 500, 2, 0.11, 0.10, 0.21),
    (Method::Pls, 100, 3, 0.08, 2.58, 2.66),
    (Method::Pls, 200, 3, 0.04, 0.87, 0.91),
    (Method::Pls, 500, 3, 0.02, 0.26, 0.28),
    (Method::Pqr, 100, 1, 0.50, 0.91, 1.41),
    (Method::Pqr, 200, 1, 0.57, 0.26, 0.83),
    (Method::Pqr, 500, 1, 0.52, 0.10, 0.62),
    (Method::Pqr, 100, 2, 0.15, 1.18, 1.33),
    (Method::Pqr, 200, 2, 0.16, 0.36, 0.52),
    (Method::Pqr, 500, 2, 0.14, 0.13, 0.27),
    (Method::Pqr, 100, 3, 0.07, 2.28, 2.36),
    (Method::Pqr, 200, 3, 0.04, 1.10, 1.13),
    (Method::Pqr, 500, 3, 0.02, 0.43, 0.45),
    (Method::Pcqr, 100, 1, 0.52, 0.84, 1.36),
    (Method::Pcqr, 200, 1, 0.60, 0.21, 0.81),
    (Method::Pcqr, 500, 1, 0.56, 0.08, 0.64),
    (Method::Pcqr, 100, 2, 0.12, 1.07, 1.19),
    (Method::Pcqr, 200, 2, 0.13, 0.29, 0.43),
    (Method::Pcqr, 500, 2, 0.12, 0.10, 0.23),
    (Method::Pcqr, 100, 3, 0.06, 2.65, 2.71),
    (Method::Pcqr, 200, 3, 0.04, 0.96, 0.99),
    (Method::Pcqr, 500, 3, 0.02, 0.30, 0.32),
];

/// Cauchy positions published as ">100" for fPC and PLS: (method, n, K,
/// metric index 0=Bias², 1=Var, 2=MISE).
const CAUCHY_OVERFLOW: &[(Method, usize, usize, usize)] = &[
    (Method::Fpc, 100, 1, 1),
    (Method::Fpc, 100, 1, 2),
    (Method::Fpc, 500, 1, 1),
    (Method::Fpc, 500, 1, 2),
    (Method::Fpc, 100, 2, 1),
    (Method::Fpc, 100, 2, 2),
    (Method::Fpc, 200, 2, 1),
    (Method::Fpc, 200, 2, 2),
    (Method::Fpc, 500, 2, 0),
    (Method::Fpc, 500, 2, 1),
    (Method::Fpc, 500, 2, 2),
    (Method::Fpc, 100, 3, 1),
    (Method::Fpc, 100, 3, 2),
    (Method::Fpc, 200, 3, 1),
    (Method::Fpc, 200, 3, 2),
    (Method::Fpc, 500, 3, 0),
    (Method::Fpc, 500, 3, 1),
    (Method::Fpc, 500, 3, 2),
    (Method::Pls, 100, 1, 1),
    (Method::Pls, 100, 1, 2),
    (Method::Pls, 200, 1, 1),
    (Method::Pls, 200, 1, 2),
    (Method::Pls, 500, 1, 0),
    (Method::Pls, 500, 1, 1),
    (Method::Pls, 500, 1, 2),
    (Method::Pls, 100, 2, 0),
    (Method::Pls, 100, 2, 1),
    (Method::Pls, 100, 2, 2),
    (Method::Pls, 200, 2, 0),
    (Method::Pls, 200, 2, 1),
    (Method::Pls, 200, 2, 2),
    (Method::Pls, 500, 2, 0),
    (Method::Pls, 500, 2, 1),
    (Method::Pls, 500, 2, 2),
    (Method::Pls, 100, 3, 0),
    (Method::Pls, 100, 3, 1),
    (Method::Pls, 100, 3, 2),
    (Method::Pls, 200, 3, 0),
    (Method::Pls, 200, 3, 1),
    (Method::Pls, 200, 3, 2),
    (Method::Pls, 500, 3, 0),
    (Method::Pls, 500, 3, 1),
    (Method::Pls, 500, 3, 2),
];

fn metric(c: &Cell, i: usize) -> Option<f64> {
    [c.bias2, c.var, c.mise][i]
}

fn sim1_label(n: usize, law: ErrorLaw) -> String {
    DesignSpec::Sim1 {
        n,
        error: law,
        noise_scale: 1.0,
    }
    .label()
}

fn sim1_report(ns: &[usize], law: ErrorLaw, methods: &[Method], seed: u64) -> EvalReport {
    let designs = ns
        .iter()
        .map(|&n| DesignSpec::Sim1 {
            n,
            error: law,
            noise_scale: 1.0,
        })
        .collect();
    let mut cfg = BenchmarkConfig::new(designs, methods.to_vec(), vec![1, 2, 3], replications(100));
    cfg.master_seed = seed;
    let report = run_benchmark(&cfg).expect("benchmark config is valid");
    print!("{}", report.to_text());
    report
}

fn criterion_1(report: &EvalReport) -> Outcome {
    let names = ["Bias2", "Var", "MISE"];
    let mut checked = 0;
    let mut misses = Vec::new();
    for &(method, n, k, b, v, e) in GAUSSIAN {
        let cell = report
            .cell(&sim1_label(n, ErrorLaw::Gaussian), method, k)
            .expect("cell present");
        for (i, target) in [b, v, e].into_iter().enumerate() {
            checked += 1;
            let ours = metric(cell, i).unwrap_or(f64::NAN);
            if !within(ours, target, 0.2) {
                misses.push(format!("{method} n={n} K={k} {}: {ours:.3} vs {target}", names[i]));
            }
        }
    }
    // Ordering: every pair of methods whose published values differ by more
    // than the per-cell tolerance must keep its order.
    let mut order_checked = 0;
    let mut order_misses = Vec::new();
    for &n in &[100, 200, 500] {
        for k in 1..=3 {
            let row: Vec<_> = GAUSSIAN.iter().filter(|r| r.1 == n && r.2 == k).collect();
            for i in 0..3 {
                for a in 0..row.len() {
                    for b in a + 1..row.len() {
                        let pa = [row[a].3, row[a].4, row[a].5][i];
                        let pb = [row[b].3, row[b].4, row[b].5][i];
                        if (pa - pb).abs() <= 0.2 * pa.max(pb) {
                            continue;
                        }
                        order_checked += 1;
                        let label = sim1_label(n, ErrorLaw::Gaussian);
                        let oa = metric(report.cell(&label, row[a].0, k).unwrap(), i).unwrap_or(f64::NAN);
                        let ob = metric(report.cell(&label, row[b].0, k).unwrap(), i).unwrap_or(f64::NAN);
                        if (pa < pb) != (oa < ob) {
                            order_misses.push(format!(
                                "n={n} K={k} {}: {} {oa:.3} vs {} {ob:.3}",
                                names[i], row[a].0, row[b].0
                            ));
                        }
                    }
                }
            }
        }
    }
    for m in &misses {
        println!("  criterion 1 cell miss: {m}");
    }
    for m in &order_misses {
        println!("  criterion 1 order miss: {m}");
    }
    Outcome {
        pass: misses.is_empty() && order_misses.is_empty(),
        detail: format!(
            "{}/{checked} published values within 20%, {}/{order_checked} method orderings kept",
            checked - misses.len(),
            order_checked - order_misses.len()
        ),
    }
}

fn criterion_2(report: &EvalReport) -> Outcome {
    let label500 = sim1_label(500, ErrorLaw::Cauchy);
    let k1 = report
        .cell(&label500, Method::Pqr, 1)
        .and_then(|c| c.mise)
        .unwrap_or(f64::NAN);
    let k3 = report
        .cell(&label500, Method::Pqr, 3)
        .and_then(|c| c.mise)
        .unwrap_or(f64::NAN);
    let ok1 = within(k1, 0.62, 0.2);
    let ok3 = within(k3, 1.02, 0.25);
    let mut over = 0;
    for &(method, n, k, i) in CAUCHY_OVERFLOW {
        let cell = report
            .cell(&sim1_label(n, ErrorLaw::Cauchy), method, k)
            .expect("cell present");
        if metric(cell, i).is_some_and(|v| v > 100.0) {
            over += 1;
        }
    }
    let majority = 2 * over > CAUCHY_OVERFLOW.len();
    Outcome {
        pass: ok1 && ok3 && majority,
        detail: format!(
            "PQR n=500 K=1 MISE {k1:.3} (0.62 +-20%: {}), K=3 MISE {k3:.3} (1.02 +-25%: {}), {over}/{} fPC/PLS overflow positions exceed 100",
            pass_word(ok1),
            pass_word(ok3),
            CAUCHY_OVERFLOW.len()
        ),
    }
}

fn sim2_design(case: Sim2Case, noise: f64) -> DesignSpec {
    DesignSpec::Sim2 {
        source: Sim2Source::Synthetic(SyntheticSource::new(200, 2024)),
        case,
        error: ErrorLaw::Gaussian,
        noise_multiplier: noise,
    }
}

fn criterion_3() -> (Outcome, Vec<EvalReport>) {
    let s = replications(20).min(20);
    let fpc_methods = vec![Method::Fpc, Method::QrFpc, Method::CqrFpc];
    let adaptive = vec![Method::Pls, Method::Pqr, Method::Pcqr];
    let fpc_ks: Vec<usize> = (1..=20).collect();
    let adaptive_ks = vec![1, 2, 3, 4, 5, 8, 10, 15, 20];

    let mut cfg = BenchmarkConfig::new(
        vec![sim2_design(Sim2Case::Iv, 1.0)],
        fpc_methods.clone(),
        fpc_ks.clone(),
        s,
    );
    cfg.master_seed = 31;
    let fpc_iv = run_benchmark(&cfg).expect("valid config");
    let mut cfg = BenchmarkConfig::new(vec![sim2_design(Sim2Case::Iv, 1.0)], adaptive.clone(), adaptive_ks, s);
    cfg.master_seed = 32;
    let adapt_iv = run_benchmark(&cfg).expect("valid config");
    let mut cfg = BenchmarkConfig::new(vec![sim2_design(Sim2Case::I, 0.1)], vec![Method::Fpc], vec![5], s);
    cfg.master_seed = 33;
    let fpc_i = run_benchmark(&cfg).expect("valid config");
    print!("{}{}{}", fpc_iv.to_text(), adapt_iv.to_text(), fpc_i.to_text());

    let label_iv = sim2_design(Sim2Case::Iv, 1.0).label();
    let mut notes = Vec::new();
    let mut pass = true;
    for m in &fpc_methods {
        let mise = |k: usize| fpc_iv.cell(&label_iv, *m, k).and_then(|c| c.mise).unwrap_or(f64::NAN);
        let base = mise(1);
        let flat = (1..=15).all(|k| mise(k) >= 0.8 * base);
        let drop = mise(20) <= 0.5 * base;
        pass &= flat && drop;
        notes.push(format!(
            "{m}: MISE(K<=15)>=0.8*MISE(1) {} and MISE(20)={:.3} vs MISE(1)={base:.3}",
            pass_word(flat),
            mise(20)
        ));
    }
    for m in &adaptive {
        let vals: Vec<(usize, f64)> = adapt_iv
            .cells
            .iter()
            .filter(|c| c.method == *m)
            .map(|c| (c.k, c.mise.unwrap_or(f64::NAN)))
            .collect();
        let best = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let early = vals
            .iter()
            .filter(|v| v.0 <= 5)
            .map(|v| v.1)
            .fold(f64::INFINITY, f64::min);
        let ok = early <= 2.0 * best;
        pass &= ok;
        notes.push(format!("{m}: best K<=5 MISE {early:.3} vs best {best:.3}"));
    }
    let label_i = sim2_design(Sim2Case::I, 0.1).label();
    let b = fpc_i
        .cell(&label_i, Method::Fpc, 5)
        .and_then(|c| c.bias2)
        .unwrap_or(f64::NAN);
    let ok_i = b < 1e-2;
    pass &= ok_i;
    notes.push(format!("case i fPC K=5 Bias2 {b:.2e} (<1e-2: {})", pass_word(ok_i)));
    (
        Outcome {
            pass,
            detail: format!("S={s}; {}", notes.join("; ")),
        },
        vec![fpc_iv, adapt_iv, fpc_i],
    )
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
    let y = (0..n)
        .map(|i| x.row(i).sum() + rng.random::<f64>() * 3.0 - 1.5)
        .collect();
    (x, y)
}

fn lad_point_pair(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            if (x[i] - x[j]).abs() < 1e-12 {
                continue;
            }
            let b = (y[j] - y[i]) / (x[j] - x[i]);
            let a = y[i] - b * x[i];
            let f: f64 = (0..n).map(|k| check_loss(y[k] - a - b * x[k], 0.5)).sum();
            best = best.min(f);
        }
    }
    best
}

/// Slope lattice of step 0.001 on [-5, 5] together with every pairwise
/// slope; exact per-level intercepts (residual quantiles) at every slope.
fn cqr_lattice(x: &[f64], y: &[f64], levels: &[f64]) -> f64 {
    let n = x.len();
    let mut slopes: Vec<f64> = (-5000..=5000).map(|s| s as f64 * 1e-3).collect();
    for i in 0..n {
        for j in i + 1..n {
            if (x[i] - x[j]).abs() > 1e-12 {
                slopes.push((y[j] - y[i]) / (x[j] - x[i]));
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut r = vec![0.0; n];
    for b in slopes {
        for i in 0..n {
            r[i] = y[i] - b * x[i];
        }
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        let mut f = 0.0;
        for &tau in levels {
            let a = sorted[((tau * n as f64).ceil() as usize).clamp(1, n) - 1];
            f += r.iter().map(|v| check_loss(v - a, tau)).sum::<f64>();
        }
        best = best.min(f);
    }
    best
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sign_fail = 0;
    for _ in 0..200 {
        let n = rng.random_range(8..60);
        let d = rng.random_range(1..5);
        let tau = rng.random_range(0.05..0.95);
        let (x, y) = random_instance(&mut rng, n, d);
        let fit = fit_qr(&x, &y, tau).expect("random design has full rank");
        let fitted = &x * nalgebra::DVector::from_column_slice(&fit.slopes);
        let tol = 1e-7 * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let neg = (0..n).filter(|&i| y[i] - fitted[i] < -tol).count() as f64;
        let pos = (0..n).filter(|&i| y[i] - fitted[i] > tol).count() as f64;
        if neg > tau * n as f64 + 1e-9 || pos > (1.0 - tau) * n as f64 + 1e-9 {
            sign_fail += 1;
        }
    }

    let mut lad_fail = 0;
    let mut lad_worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..=10);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|v| 0.7 * v + rng.random::<f64>() - 0.5).collect();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit_qr(&design, &ys, 0.5).expect("full rank");
        let gap = (fit.objective - lad_point_pair(&xs, &ys)).abs();
        lad_worst = lad_worst.max(gap);
        if gap > 1e-6 {
            lad_fail += 1;
        }
    }

    let mut cqr_fail = 0;
    let mut cqr_worst = 0.0f64;
    let levels = [0.25, 0.5, 0.75];
    for _ in 0..30 {
        let n = rng.random_range(4..=8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.5 - 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|v| 1.3 * v + rng.random::<f64>() - 0.5).collect();
        let design = DMatrix::from_column_slice(n, 1, &xs);
        let fit = fit_cqr(&design, &ys, &levels).expect("full rank");
        let oracle = cqr_lattice(&xs, &ys, &levels);
        let gap = (fit.objective - oracle).abs();
        cqr_worst = cqr_worst.max(gap);
        if gap > 2e-3 || fit.objective > oracle + 1e-9 {
            cqr_fail += 1;
        }
    }

    let mut single_fail = 0;
    let mut single_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(10..40);
        let d = rng.random_range(2..5);
        let tau = rng.random_range(0.1..0.9);
        let (x, y) = random_instance(&mut rng, n, d);
        let qr = fit_qr(&x, &y, tau).expect("full rank");
        let slopes_only = x.columns(1, d - 1).into_owned();
        let cqr = fit_cqr(&slopes_only, &y, &[tau]).expect("full rank");
        let mut diff = (qr.slopes[0] - cqr.intercepts[0]).abs();
        for j in 1..d {
            diff = diff.max((qr.slopes[j] - cqr.slopes[j - 1]).abs());
        }
        single_worst = single_worst.max(diff);
        if diff > 1e-10 {
            single_fail += 1;
        }
    }
    Outcome {
        pass: sign_fail == 0 && lad_fail == 0 && cqr_fail == 0 && single_fail == 0,
        detail: format!(
            "(a) sign balance violations {sign_fail}/200; (b) LAD oracle misses {lad_fail}/100, worst gap {lad_worst:.1e}; (c) CQR lattice misses {cqr_fail}/30, worst gap {cqr_worst:.1e}; (d) single-level CQR vs QR misses {single_fail}/50, worst {single_worst:.1e}"
        ),
    }
}

fn criterion_5(reports: &[&EvalReport]) -> Outcome {
    let mut worst_inner = 0.0f64;
    let mut cells = 0;
    for r in reports {
        for c in &r.cells {
            if let Some(v) = c.score_inner {
                worst_inner = worst_inner.max(v);
                cells += 1;
            }
        }
    }
    let inner_ok = worst_inner < 1e-6;

    // Rank-one curves.
    let n = 40;
    let m = 30;
    let u: Vec<f64> = (0..n).map(|i| ((i * 7919) % 37) as f64 / 9.0 - 2.0).collect();
    let c: Vec<f64> = (0..m).map(|j| (j as f64 * 0.37).cos() + 0.2).collect();
    let rank_one = FunctionalSample::new(Grid::uniform(m).unwrap(), DMatrix::from_fn(n, m, |i, j| u[i] * c[j]))
        .unwrap()
        .with_responses(u.clone())
        .unwrap();
    let mut rank_ok = true;
    for (method, loss) in adaptive_losses() {
        let res = run_extraction(&rank_one, &ExtractionConfig::fixed(method, loss, 3)).expect("extraction runs");
        rank_ok &= res.k() == 1
            && res.residual_norms[0] < 1e-10
            && res
                .flags
                .iter()
                .any(|f| matches!(f, ExtractionFlag::AllZeroDirection { step: 1 }));
    }

    // Response scaling.
    let data = gen_sim1(&Sim1Design::new(150, ErrorLaw::Gaussian, 55)).unwrap();
    let doubled: Vec<f64> = data.sample.responses().unwrap().iter().map(|v| 2.0 * v).collect();
    let scaled = data.sample.clone().with_responses(doubled).unwrap();
    let mut scale_worst = 0.0f64;
    for (method, loss) in adaptive_losses() {
        let cfg = ExtractionConfig::fixed(method, loss, 3);
        let a = run_extraction(&data.sample, &cfg).unwrap();
        let b = run_extraction(&scaled, &cfg).unwrap();
        for k in 0..a.k() {
            let fa = a.basis.function(k);
            let fb = b.basis.function(k);
            let same = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let flip = fa.iter().zip(&fb).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
            scale_worst = scale_worst.max(same.min(flip));
        }
    }
    let scale_ok = scale_worst < 1e-6;

    // Deflation orthogonality.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut defl_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(5..40);
        let m = rng.random_range(2..20);
        let curves = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let score: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
        let s = FunctionalSample::new(Grid::uniform(m).unwrap(), curves).unwrap();
        let (d, _) = extract::deflate(&s, &score).unwrap();
        for col in d.curves().column_iter() {
            let ip: f64 = col.iter().zip(&score).map(|(a, b)| a * b).sum();
            let sum: f64 = col.iter().sum();
            defl_worst = defl_worst.max(ip.abs()).max(sum.abs());
        }
    }
    let defl_ok = defl_worst < 1e-10;
    Outcome {
        pass: inner_ok && rank_ok && scale_ok && defl_ok,
        detail: format!(
            "score inner products worst {worst_inner:.1e}*n over {cells} cells ({}); rank-one recovery {}; response scaling worst {scale_worst:.1e} ({}); deflation worst {defl_worst:.1e} ({})",
            pass_word(inner_ok),
            pass_word(rank_ok),
            pass_word(scale_ok),
            pass_word(defl_ok)
        ),
    }
}

fn adaptive_losses() -> Vec<(BasisMethod, CheckLossSpec)> {
    vec![
        (BasisMethod::Pls, CheckLossSpec::LeastSquares),
        (BasisMethod::Pqr, CheckLossSpec::quantile(0.5).unwrap()),
        (BasisMethod::Pcqr, CheckLossSpec::composite_uniform(9).unwrap()),
    ]
}

fn criterion_6(reports: &[&EvalReport]) -> Outcome {
    let mut finite = 0;
    let mut identity_worst = 0.0f64;
    for r in reports {
        for c in &r.cells {
            if let (Some(b), Some(v), Some(e)) = (c.bias2, c.var, c.mise) {
                if b.is_finite() && v.is_finite() && e.is_finite() {
                    finite += 1;
                    identity_worst = identity_worst.max((b + v - e).abs() / e.abs().max(f64::MIN_POSITIVE));
                }
            }
        }
    }
    let identity_ok = identity_worst < 1e-6;

    let data = gen_sim1(&Sim1Design::new(120, ErrorLaw::Gaussian, 66)).unwrap();
    let mut trip_worst = 0.0f64;
    for method in Method::ALL {
        let loss = method.loss(0.5, 9).unwrap();
        let ex = run_extraction(&data.sample, &ExtractionConfig::fixed(method.basis(), loss.clone(), 3)).unwrap();
        let fit = fit_model(&data.sample, &ex, &loss).unwrap();
        let pred = predict(&fit, &data.sample).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: ModelFit = serde_json::from_str(&json).unwrap();
        let pred_back = predict(&back, &data.sample).unwrap();
        let raw = fit.raw_intercepts();
        for i in 0..data.sample.n() {
            let mut eta = 0.0;
            for k in 0..ex.k() {
                eta += ex.scores.values[(i, k)] * fit.score_coefs[k];
            }
            let row: Vec<f64> = data.sample.curves().row(i).iter().copied().collect();
            let ip = fgrid::inner_product(data.sample.grid(), &row, &fit.gamma_hat, InnerProduct::L2Weighted).unwrap();
            for l in 0..pred.values[i].len() {
                let v = pred.values[i][l];
                trip_worst = trip_worst
                    .max((v - (fit.intercepts[l] + eta)).abs())
                    .max((v - pred_back.values[i][l]).abs())
                    .max((v - (raw[l] + ip)).abs());
            }
        }
    }
    let trip_ok = trip_worst < 1e-10;

    let small = |threads: usize| {
        let mut cfg = BenchmarkConfig::new(
            vec![
                DesignSpec::Sim1 {
                    n: 60,
                    error: ErrorLaw::Cauchy,
                    noise_scale: 1.0,
                },
                sim2_design(Sim2Case::Ii, 1.0),
            ],
            Method::ALL.to_vec(),
            vec![1, 2],
            4,
        );
        cfg.master_seed = 77;
        cfg.threads = Some(threads);
        let r = run_benchmark(&cfg).unwrap();
        let mut bytes = r.to_csv() + &r.to_text();
        for d in r.designs() {
            for m in [Metric::Mise, Metric::MseIn, Metric::MseOut] {
                bytes += &r.to_svg(&d, m);
            }
        }
        bytes
    };
    let first = small(1);
    let rerun_ok = first == small(1) && first == small(3) && first == small(2);
    Outcome {
        pass: identity_ok && trip_ok && rerun_ok,
        detail: format!(
            "MISE=Bias2+Var worst relative {identity_worst:.1e} over {finite} cells ({}); fit/predict worst {trip_worst:.1e} ({}); byte-identical reruns at 1/2/3 threads {}",
            pass_word(identity_ok),
            pass_word(trip_ok),
            pass_word(rerun_ok)
        ),
    }
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let gaussian = sim1_report(&[100, 200, 500], ErrorLaw::Gaussian, &Method::ALL, 1);
    let cauchy_small = sim1_report(&[100, 200], ErrorLaw::Cauchy, &[Method::Fpc, Method::Pls], 2);
    let cauchy_500 = sim1_report(&[500], ErrorLaw::Cauchy, &[Method::Fpc, Method::Pls, Method::Pqr], 3);
    let mut cauchy = cauchy_small.clone();
    cauchy.cells.extend(cauchy_500.cells.iter().cloned());
    let (c3, sim2_reports) = criterion_3();

    let mut all: Vec<&EvalReport> = vec![&gaussian, &cauchy];
    all.extend(sim2_reports.iter());
    let outcomes = [
        criterion_1(&gaussian),
        criterion_2(&cauchy),
        c3,
        criterion_4(),
        criterion_5(&all),
        criterion_6(&all),
    ];
    let mut failed = 0;
    for (i, o) in outcomes.iter().enumerate() {
        println!(
            "criterion {}: {} - {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", outcomes.len());
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
