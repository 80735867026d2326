use std::fmt::Write as _;
use std::path::Path;

use pfqr_core::evalbench::{self, BenchmarkConfig, DesignSpec, EvalReport, Metric};
use pfqr_core::extract;
use pfqr_core::fgrid::Grid;
use pfqr_core::io;
use pfqr_core::model::{self, ModelFit, Prediction};
use pfqr_core::nalgebra::DMatrix;
use pfqr_core::simgen::{self, Sim1Design, Sim2Design, Sim2Setup, Sim2Source};

use crate::error::{write_failed, CliError};
use crate::task::{self, FitTask};

pub fn simulate(
    config_path: &Path,
    out: &Path,
    threads: Option<usize>,
    env_threads: Option<&str>,
    seed: Option<u64>,
    verbose: u8,
) -> Result<(), CliError> {
    let text = task::read_text(config_path)?;
    let mut config: BenchmarkConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new(""));
    for d in &mut config.designs {
        resolve_design(d, base);
    }
    if let Some(s) = seed {
        config.master_seed = s;
    }
    config.threads = match env_threads.map(str::trim).filter(|v| !v.is_empty()) {
        Some(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| CliError::Config(format!("PFQR_THREADS must be a positive integer, got `{v}`")))?,
        ),
        None => threads.or(config.threads),
    };
    config.validate()?;
    create_dir(out)?;
    if verbose > 0 {
        eprintln!(
            "running {} design(s) x {} method(s) x {} K value(s), {} replications",
            config.designs.len(),
            config.methods.len(),
            config.k_values.len(),
            config.replications
        );
    }
    let report = evalbench::run_benchmark(&config)?;
    io::write_atomic(&out.join("report.csv"), report.to_csv().as_bytes()).map_err(write_failed)?;
    render(&report, out)?;
    let mut timing = String::from("design,seconds\n");
    for t in &report.timings {
        let _ = writeln!(timing, "{},{:.3}", t.design, t.seconds);
        if verbose > 0 {
            eprintln!("{}: {:.1}s", t.design, t.seconds);
        }
    }
    io::write_atomic(&out.join("timing.csv"), timing.as_bytes()).map_err(write_failed)?;
    match report.failures() {
        0 => Ok(()),
        failures => Err(CliError::Partial {
            failures,
            out: out.display().to_string(),
        }),
    }
}

fn resolve_design(d: &mut DesignSpec, base: &Path) {
    match d {
        DesignSpec::Sim1 { .. } => {}
        DesignSpec::Sim2 { source, .. } => resolve_source(source, base),
        DesignSpec::Csv { curves, responses, .. } => {
            *curves = base.join(&*curves);
            *responses = base.join(&*responses);
        }
    }
}

fn resolve_source(source: &mut Sim2Source, base: &Path) {
    if let Sim2Source::Csv { path } = source {
        *path = base.join(&*path);
    }
}

/// Writes report.txt and one plot per design and available metric.
fn render(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    io::write_atomic(&out.join("report.txt"), report.to_text().as_bytes()).map_err(write_failed)?;
    for design in report.designs() {
        for metric in [Metric::Mise, Metric::MseIn, Metric::MseOut] {
            let present = report
                .cells
                .iter()
                .any(|c| c.design == design && metric.get(c).is_some());
            if !present {
                continue;
            }
            let name = format!("{}_{}.svg", file_stem(&design), metric.file_tag());
            io::write_atomic(&out.join(name), report.to_svg(&design, metric).as_bytes()).map_err(write_failed)?;
        }
    }
    Ok(())
}

fn file_stem(design: &str) -> String {
    design
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn report(input: &Path) -> Result<(), CliError> {
    let path = input.join("report.csv");
    let text = task::read_text(&path)?;
    let report = EvalReport::from_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    render(&report, input)
}

pub fn fit(config_path: &Path, out: &Path, verbose: u8) -> Result<(), CliError> {
    let task = FitTask::load(config_path)?;
    let loss = task.loss()?;
    let sample = task.sample()?;
    let ecfg = task.extraction(&loss);
    let ex = extract::run_extraction(&sample, &ecfg)?;
    let mut fit = model::fit_model(&sample, &ex, &loss)?;
    fit.point_rule = task.point_rule;
    if verbose > 0 {
        eprintln!("{} with K = {}", task.method, fit.k());
        for flag in &ex.flags {
            eprintln!("extraction: {flag:?}");
        }
    }
    let fitted = model::predict(&fit, &sample)?;
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&fit).map_err(|e| CliError::Runtime(e.to_string()))?;
    io::write_atomic(&out.join("model.json"), json.as_bytes()).map_err(write_failed)?;
    let grid = fit.grid();
    let gamma = DMatrix::from_fn(fit.m, 2, |j, c| if c == 0 { grid.point(j) } else { fit.gamma_hat[j] });
    io::write_table(
        &out.join("gamma_hat.csv"),
        &["t".to_string(), "gamma_hat".to_string()],
        &gamma,
    )
    .map_err(write_failed)?;
    write_prediction(&out.join("fitted.csv"), &fitted)
}

pub fn predict(model_path: &Path, curves: &Path, scalars: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let text = task::read_text(model_path)?;
    let fit: ModelFit =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    let sample = task::load_curves(curves, scalars)?;
    let pred = model::predict(&fit, &sample)?;
    write_prediction(out, &pred)
}

/// One row per observation: a column per level (`q_<level>`), then `point`.
fn write_prediction(path: &Path, pred: &Prediction) -> Result<(), CliError> {
    let mut header: Vec<String> = pred.levels.iter().map(|t| format!("q_{t}")).collect();
    header.push("point".to_string());
    let l = pred.levels.len();
    let rows = DMatrix::from_fn(pred.point.len(), l + 1, |i, c| {
        if c < l {
            pred.values[i][c]
        } else {
            pred.point[i]
        }
    });
    io::write_table(path, &header, &rows).map_err(write_failed)
}

/// Writes curves.csv, responses.csv (column `y`) and gamma.csv for one draw.
pub fn generate(config_path: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let text = task::read_text(config_path)?;
    let spec: DesignSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new(""));
    let data = match spec {
        DesignSpec::Sim1 { n, error, noise_scale } => simgen::gen_sim1(&Sim1Design {
            n,
            error,
            noise_scale,
            seed,
        })?,
        DesignSpec::Sim2 {
            mut source,
            case,
            error,
            noise_multiplier,
        } => {
            resolve_source(&mut source, base);
            let design = Sim2Design {
                source,
                case,
                error,
                noise_multiplier,
            };
            Sim2Setup::from_design(&design)?.draw(seed)?
        }
        DesignSpec::Csv { .. } => {
            return Err(CliError::Config("generate needs a sim1 or sim2 design".to_string()));
        }
    };
    create_dir(out)?;
    let s = &data.sample;
    io::write_table(&out.join("curves.csv"), &io::grid_header(s.m()), s.curves()).map_err(write_failed)?;
    let y = s.responses().expect("simulated samples carry responses");
    io::write_table(
        &out.join("responses.csv"),
        &["y".to_string()],
        &DMatrix::from_column_slice(y.len(), 1, y),
    )
    .map_err(write_failed)?;
    let grid: &Grid = s.grid();
    let gamma = DMatrix::from_fn(s.m(), 2, |j, c| if c == 0 { grid.point(j) } else { data.gamma[j] });
    io::write_table(&out.join("gamma.csv"), &["t".to_string(), "gamma".to_string()], &gamma).map_err(write_failed)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}
