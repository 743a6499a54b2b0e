//! `magmove` command-line driver.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use magmove::diagnostics::{
    assert_el_bounds, el_residuals, energy_budget_report, envelope_check, gradient_check, refinement_study, weak_residual_check, TestBank,
};
use magmove::energy::{growth_audit, EnergyFunctional, EnergyModel, GrowthConstants};
use magmove::grid::GridSpec;
use magmove::io::{build_problem, export_snapshot, load_config, write_series, RunConfig, SeriesRow, SnapshotFields};
use magmove::stepper::{prepare, run_evolution, run_evolution_with, DataProviders, StepConfig};
use magmove::strayfield::{solve_stray_field, stability_check, stray_energy_identity};
use magmove::trajectory::{Snapshot, StepStatus};
use magmove::Error;

use report::Report;

const EXIT_INTERNAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TERMINATED: u8 = 3;
const EXIT_DIAGNOSTIC: u8 = 4;

/// Largest accepted relative finite-difference error of analytic gradients.
const GRADCHECK_TOL: f64 = 1e-6;
/// EL defects may exceed the inner tolerance by this conditioning factor.
const EL_FACTOR: f64 = 10.0;
/// Steps taken by the short run inside `check`.
const CHECK_STEPS: usize = 3;

#[derive(Parser)]
#[command(name = "magmove", version, about = "Minimizing-movements solver for compressible magnetoelasticity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an evolution and write the series, snapshots and reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic energy and dissipation gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write report.json and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite on a configuration (defaults if omitted).
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time-step refinement study at dt, dt/2, ..., dt/2^(L-1).
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_CONFIG, message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) | Error::Admissibility(_) => EXIT_CONFIG,
            Error::Diagnostic(_) | Error::GrowthAudit(_) | Error::SolverDefect(_) => EXIT_DIAGNOSTIC,
            _ => EXIT_INTERNAL,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_INTERNAL, message: e.to_string() }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let res = match cli.command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Gradcheck { config, seed, out } => cmd_gradcheck(&config, seed, out),
        Command::Check { config, out } => cmd_check(config.as_deref(), out),
        Command::Refine { config, levels, out } => cmd_refine(&config, levels, out),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `MAGMOVE_THREADS` caps the global worker pool.
fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MAGMOVE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Failure::config(format!("MAGMOVE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure { code: EXIT_INTERNAL, message: e.to_string() })
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    let (cfg, warnings) = load_config(path).map_err(Failure::config)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn problem(cfg: &RunConfig) -> Result<(GridSpec, EnergyModel, DataProviders), Failure> {
    build_problem(cfg).map_err(Failure::config)
}

fn finish(report: &Report, out: Option<&Path>, code: u8) -> Outcome {
    print!("{}", report.to_text());
    if let Some(dir) = out {
        report.write_dir(dir)?;
    }
    Ok(if code == 0 && report.failed() > 0 { EXIT_DIAGNOSTIC } else { code })
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Outcome {
    let cfg = load(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let (grid, model, data) = problem(&cfg)?;
    let steps = cfg.step.num_steps();
    let run = run_evolution_with(&grid, model.clone(), &data, &cfg.step, |k, res| {
        log::info!("step {k}/{steps}: {} in {} iterations, min det {:.3e}", res.status.as_str(), res.diagnostics.iterations, res.diagnostics.min_det);
    })?;
    std::fs::create_dir_all(&dir)?;
    let traj = &run.trajectory;
    let mut rows: Vec<SeriesRow> = traj.snapshots.iter().enumerate().map(|(k, s)| SeriesRow::from_snapshot(k, s)).collect();
    if let Some((k, snap)) = &run.rejected {
        rows.push(SeriesRow::from_snapshot(*k, snap));
    }
    write_series(&rows, &dir.join("series.csv"))?;

    let stray = if model.params.stray_on() { Some(EnergyFunctional::new(&grid, model.clone(), &data.eta0.data)?) } else { None };
    let snap_dir = dir.join("snapshots");
    let stride = cfg.output.stride;
    let mut written = 0;
    if stride > 0 {
        let last = traj.len() - 1;
        for (k, snap) in traj.snapshots.iter().enumerate() {
            if k % stride == 0 || k == last {
                written += write_snapshot(&grid, stray.as_ref(), snap, k, &snap_dir)?;
            }
        }
        if let Some((k, snap)) = &run.rejected {
            written += write_snapshot(&grid, stray.as_ref(), snap, *k, &snap_dir)?;
        }
    }

    let mut report = Report::new("run");
    report.value("config", &cfg);
    report.value("termination", run.termination.as_str());
    report.value("accepted_steps", traj.len() - 1);
    report.value("planned_steps", steps);
    report.note(format!("config: {}", config.display()));
    report.note(format!("{} of {steps} steps accepted, final t = {}", traj.len() - 1, traj.last_time()));
    report.note(format!("termination: {}", run.termination.as_str()));
    if let Some((k, snap)) = &run.rejected {
        report.value("rejected_step", k);
        report.note(format!(
            "rejected step {k}: min det {:.3e}, CN residual {:.3e} (tol {:.3e}), injectivity margin {:.3e}, energy {:.6e}",
            snap.diagnostics.min_det, snap.diagnostics.cn_residual, snap.diagnostics.cn_tolerance, snap.diagnostics.injectivity_margin, snap.energy.total
        ));
    }
    report.note(format!("wrote series.csv and {written} field files to {}", dir.display()));

    match energy_budget_report(traj) {
        Ok(b) => {
            report.check("energy budget", true, format!("max excess {:.3e}, forced {}, monotone {}", b.max_excess, b.forced, b.monotone));
            if b.forced {
                let env = envelope_check(traj, &model.params, &data, &cfg.step)?;
                let ratio = env.lhs.iter().zip(&env.envelope).map(|(a, b)| a / b).fold(0.0, f64::max);
                report.check("Gronwall envelope", env.ok, format!("max LHS/envelope {ratio:.3}"));
                report.value("envelope", &env);
            }
            report.value("budget", &b);
        }
        Err(e) => report.check("energy budget", false, e.to_string()),
    }
    let max_el = traj
        .snapshots
        .iter()
        .map(|s| s.diagnostics.el_residual_deformation.max(s.diagnostics.el_residual_magnetization))
        .fold(0.0, f64::max);
    report.note(format!("max EL residual norm over accepted steps {max_el:.3e}"));
    let code = if run.termination == StepStatus::Accepted { 0 } else { EXIT_TERMINATED };
    report.write_dir(&dir)?;
    finish(&report, None, code)
}

/// Write one snapshot; the stray pair is included when the field is active.
fn write_snapshot(grid: &GridSpec, energy: Option<&EnergyFunctional>, snap: &Snapshot, k: usize, dir: &Path) -> Result<usize, Failure> {
    let solved = energy.and_then(|e| {
        let op = e.stray.as_ref()?;
        let d = grid.dim();
        let m = &snap.magnetization.data;
        let moments: Vec<f64> = (0..m.len()).map(|q| e.weights[q / d] * m[q]).collect();
        let (_, sol) = op.grid_solution(&snap.deformation.data, &moments, e.params().mu)?;
        Some((sol.grid.grid_spec(), sol.phi_field(), sol.h_field()))
    });
    let fields = SnapshotFields {
        grid,
        eta: &snap.deformation,
        mtilde: &snap.magnetization,
        stray: solved.as_ref().map(|(g, phi, h)| (g, phi, h)),
    };
    Ok(export_snapshot(&fields, k, snap.time, dir)?.len())
}

fn cmd_gradcheck(config: &Path, seed: u64, out: Option<PathBuf>) -> Outcome {
    let cfg = load(config)?;
    let (grid, model, data) = problem(&cfg)?;
    let energy = EnergyFunctional::new(&grid, model, &data.eta0.data)?;
    let mut report = Report::new("gradcheck");
    let r = gradient_check(&energy, &data.eta0.data, &data.m0.data, seed)?;
    report.check("energy gradient", r.energy <= GRADCHECK_TOL, format!("max rel err {:.3e} (seed {seed})", r.energy));
    report.check("dissipation gradient", r.dissipation <= GRADCHECK_TOL, format!("max rel err {:.3e}", r.dissipation));
    report.value("gradcheck", &r);
    finish(&report, out.as_deref(), 0)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cmd_check(config: Option<&Path>, out: Option<PathBuf>) -> Outcome {
    let cfg = match config {
        Some(p) => load(p)?,
        None => RunConfig::default(),
    };
    let (grid, model, data) = problem(&cfg)?;
    let mut report = Report::new("check");
    report.value("config", &cfg);

    match growth_audit(&model, grid.dim(), GrowthConstants::for_defaults(&model.params), 2000, 0) {
        Ok(g) => report.check("growth audit", g.pass, format!("{} samples, min density {:.3e}", g.samples, g.min_density)),
        Err(e) => report.check("growth audit", false, e.to_string()),
    }

    let energy = EnergyFunctional::new(&grid, model.clone(), &data.eta0.data)?;
    match gradient_check(&energy, &data.eta0.data, &data.m0.data, 0) {
        Ok(r) => {
            report.check("energy gradient", r.energy <= GRADCHECK_TOL, format!("max rel err {:.3e}", r.energy));
            report.check("dissipation gradient", r.dissipation <= GRADCHECK_TOL, format!("max rel err {:.3e}", r.dissipation));
        }
        Err(e) => report.check("gradients", false, e.to_string()),
    }

    if let Some(op) = &energy.stray {
        stray_checks(&mut report, &energy, op, &data);
    }

    if let Err(e) = prepare(&grid, model.clone(), &data, &cfg.step) {
        report.check("initial admissibility", false, e.to_string());
        return finish(&report, out.as_deref(), 0);
    }
    report.check("initial admissibility", true, "orientation, volume identity and boundary injectivity hold");

    let short = StepConfig { t_end: cfg.step.t_end.min(CHECK_STEPS as f64 * cfg.step.dt), ..cfg.step.clone() };
    let run = run_evolution(&grid, model, &data, &short)?;
    let traj = &run.trajectory;
    report.check("short run", run.termination == StepStatus::Accepted, format!("{} steps, {}", traj.len() - 1, run.termination.as_str()));
    let admissible = traj.snapshots.iter().all(|s| s.diagnostics.min_det > 0.0 && s.diagnostics.cn_residual <= s.diagnostics.cn_tolerance);
    report.check("accepted states admissible", admissible, "positive Jacobian and volume identity at every stored step");
    let descent = traj.snapshots.iter().skip(1).all(|s| {
        let g = &s.diagnostics;
        g.functional_min <= g.functional_prev + 1e-10 * g.functional_prev.abs().max(1.0)
    });
    report.check("descent", descent, "incremental functional at the minimizer below its value at the previous state");
    match energy_budget_report(traj) {
        Ok(b) => report.check("energy budget", true, format!("max excess {:.3e}", b.max_excess)),
        Err(e) => report.check("energy budget", false, e.to_string()),
    }
    let bank = TestBank::new(&grid);
    match el_residuals(traj, &energy, &data, &short, &bank) {
        Ok(defects) => {
            let worst = defects.iter().fold(0.0f64, |a, (m, g)| a.max(*m).max(*g));
            let ok = assert_el_bounds(&defects, short.grad_tol, EL_FACTOR);
            report.check("EL defects", ok.is_ok(), format!("max {worst:.3e}, bound {:.1e}", short.grad_tol * EL_FACTOR));
            report.value("el_defects", &defects);
        }
        Err(e) => report.check("EL defects", false, e.to_string()),
    }
    match weak_residual_check(traj, &energy, &data, &short, &bank) {
        Ok(w) => {
            let at0 = w.initial_deformation_distance.first().copied().unwrap_or(0.0) + w.initial_magnetization_distance.first().copied().unwrap_or(0.0);
            report.check("initial data attained", at0 == 0.0, format!("weak defects motion {:.3e}, magnetic {:.3e}", w.max_motion, w.max_magnetic));
            report.value("weak_residuals", &w);
        }
        Err(e) => report.check("weak residuals", false, e.to_string()),
    }
    finish(&report, out.as_deref(), 0)
}

fn stray_checks(report: &mut Report, energy: &EnergyFunctional, op: &magmove::strayfield::StrayOperator, data: &DataProviders) {
    let d = energy.grid.dim();
    let m = &data.m0.data;
    let moments: Vec<f64> = (0..m.len()).map(|q| energy.weights[q / d] * m[q]).collect();
    let Some((m1, sol1)) = op.grid_solution(&data.eta0.data, &moments, energy.params().mu) else {
        report.check("stray field", false, "initial body leaves the stray grid");
        return;
    };
    let (lhs, rhs) = stray_energy_identity(&m1, &sol1);
    report.check("stray energy identity", rel(lhs, rhs) <= 1e-8, format!("rel err {:.3e}", rel(lhs, rhs)));
    match stability_check(&m1, &sol1) {
        Ok(r) => report.check("stray stability", true, format!("|H|/|M| = {r:.3}")),
        Err(e) => report.check("stray stability", false, e.to_string()),
    }
    let m2: Vec<f64> = m1.iter().enumerate().map(|(i, v)| v * (0.37 * i as f64).sin()).collect();
    let combo: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a + 2.0 * b).collect();
    let pg = &sol1.grid;
    let mu = sol1.mu;
    let solved = solve_stray_field(&m2, pg, mu).and_then(|s2| Ok((s2, solve_stray_field(&combo, pg, mu)?)));
    match solved {
        Ok((s2, s3)) => {
            let scale = sol1.h.iter().chain(&s2.h).fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
            let lin = s3.h.iter().zip(sol1.h.iter().zip(&s2.h)).map(|(c, (a, b))| (c - a - 2.0 * b).abs()).fold(0.0, f64::max) / scale;
            report.check("stray linearity", lin <= 1e-10, format!("rel err {lin:.3e}"));
            let sa = rel(dot(&m1, &s2.h), dot(&m2, &sol1.h));
            report.check("stray self-adjointness", sa <= 1e-10, format!("rel err {sa:.3e}"));
        }
        Err(e) => report.check("stray linearity", false, e.to_string()),
    }
}

fn cmd_refine(config: &Path, levels: usize, out: Option<PathBuf>) -> Outcome {
    let cfg = load(config)?;
    let (grid, model, data) = problem(&cfg)?;
    if levels < 3 {
        return Err(Failure::config(format!("--levels must be at least 3, got {levels}")));
    }
    let (table, _) = refinement_study(&grid, &model, &data, &cfg.step, levels)?;
    let mut report = Report::new("refine");
    for (l, dt) in table.dts.iter().enumerate() {
        let disc = table.discrepancies.get(l).map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into());
        let ratio = table.ratios.get(l).map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        report.note(format!("level {l}: dt {dt:.4e}, discrepancy to next {disc}, ratio {ratio}, Hoelder constant {:.4e}", table.holder[l]));
    }
    report.check("discrepancies decrease", table.monotone, format!("ratios {:?}", table.ratios));
    report.note(format!("Hoelder constant spread {:.3}", table.holder_spread));
    report.value("refinement", &table);
    finish(&report, out.as_deref(), 0)
}
