//! Acceptance criteria 1-10. Each criterion prints one PASS/FAIL line; the
//! process fails if any criterion fails. Pass criterion numbers as
//! arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use magmove::data::{DataField, SpatialField, TimeProfile};
use magmove::diagnostics::{
    analyze_refinement, el_residuals, energy_budget_report, envelope_check, hext_difference_quotient_check, weak_residual_check, TestBank,
};
use magmove::dissipation::Dissipation;
use magmove::energy::{eulerian_energy, total_energy, EnergyFunctional, EnergyModel, EnergyTerms, MaterialParams};
use magmove::grid::{Face, Field, FieldRank, GridSpec, Side};
use magmove::kinematics::{
    build_kinematics, ciarlet_necas_residual, material_derivative, pull_back_magnetization, push_forward_magnetization, EulerianMap,
};
use magmove::stepper::{assemble_functional, minimize_step, mollifier_for, prepare, run_evolution, DataProviders, StepConfig, StepData};
use magmove::strayfield::{solve_stray_field, stability_check, stray_energy_identity, PaddedGrid};
use magmove::trajectory::{StepStatus, TrajectoryStore};
use magmove::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Admissibility record of every run made by the suite: (name, min det, all CN residuals within tolerance).
static RUNS: Mutex<Vec<(String, f64, bool)>> = Mutex::new(Vec::new());

fn record(name: &str, traj: &TrajectoryStore) {
    let min_det = traj.snapshots.iter().map(|s| s.diagnostics.min_det).fold(f64::INFINITY, f64::min);
    let cn_ok = traj.snapshots.iter().all(|s| s.diagnostics.cn_residual <= s.diagnostics.cn_tolerance);
    RUNS.lock().unwrap().push((name.to_string(), min_det, cn_ok));
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn clamped_bottom(d: usize) -> Vec<Face> {
    vec![Face { axis: d - 1, side: Side::Low }]
}

fn identity(grid: &GridSpec) -> Field {
    Field::vector_from_fn(grid, |x| x)
}

/// Sum of random plane waves, optionally zeroed on Dirichlet nodes.
fn smooth_field(grid: &GridSpec, rng: &mut ChaCha8Rng, amp: f64, vanish_on_dirichlet: bool) -> Vec<f64> {
    let d = grid.dim();
    let coef: Vec<[f64; 5]> =
        (0..d * 3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.0..6.0)]).collect();
    let mut out = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        if vanish_on_dirichlet && grid.is_dirichlet(i) {
            continue;
        }
        let x = grid.coords(i);
        for c in 0..d {
            let mut v = 0.0;
            for t in 0..3 {
                let k = coef[c * 3 + t];
                v += k[0] * (k[1] * x[0] + k[2] * x[1] + k[3] * x[2] + k[4]).sin();
            }
            out[i * d + c] = amp * v / 3.0;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], s: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + s * b).collect()
}

/// Best relative error of central differences over the step sweep.
fn fd_best(exact: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    [1e-3, 1e-4, 1e-5, 1e-6].iter().map(|&s| ((f(s) - f(-s)) / (2.0 * s) - exact).abs() / exact.abs().max(1e-300)).fold(f64::INFINITY, f64::min)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let g = ok(GridSpec::unit(3, 9, &clamped_bottom(3)))?;
    let params = MaterialParams::default();
    ensure!(params.stray, "stray field must be on");
    let mut worst_e: f64 = 0.0;
    let mut worst_r: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let eta = axpy(&identity(&g).data, 1.0, &smooth_field(&g, &mut rng, 0.05, true));
        let m = axpy(&Field::vector_from_fn(&g, |_| [0.0, 0.0, 1.0]).data, 1.0, &smooth_field(&g, &mut rng, 0.6, false));
        let fun = ok(EnergyFunctional::new(&g, EnergyModel::new(params.clone()), &eta))?;
        let ev = fun.evaluate(&eta, &m, true);
        ensure!(!ev.breakdown.infinite, "seed {seed}: state has infinite energy");
        let de = smooth_field(&g, &mut rng, 1.0, true);
        let dm = smooth_field(&g, &mut rng, 1.0, false);
        let exact = dot(&ev.grad_eta, &de) + dot(&ev.grad_m, &dm);
        let err = fd_best(exact, |s| fun.evaluate(&axpy(&eta, s, &de), &axpy(&m, s, &dm), false).breakdown.total);
        worst_e = worst_e.max(err);

        let kin = fun.kinematics(&eta);
        let diss = ok(Dissipation::new(&g, &kin, params.nu))?;
        let ve = smooth_field(&g, &mut rng, 1.0, true);
        let vm = smooth_field(&g, &mut rng, 1.0, false);
        let exact = dot(&diss.grad_eta(&ve), &de) + dot(&diss.grad_m(&vm), &dm);
        let err = fd_best(exact, |s| diss.value(&axpy(&ve, s, &de), &axpy(&vm, s, &dm)));
        worst_r = worst_r.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!("max rel err energy {worst_e:.2e}, dissipation {worst_r:.2e}; {secs:.1} s");
    ensure!(worst_e <= 1e-6 && worst_r <= 1e-6, "{detail}");
    ensure!(secs <= 60.0, "runtime: {detail}");
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let n = 64;
    let h = 2.0 / n as f64;
    let r = 0.4;
    let pg = ok(PaddedGrid::new(3, [n; 3], h, [-1.0; 3], [-r; 3], [r; 3]))?;
    let g = pg.grid_spec();
    let dir = [0.3, -0.5, 0.8];
    let norm = dot(&dir, &dir).sqrt();
    let mvec: [f64; 3] = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
    let mut m = vec![0.0; g.len() * 3];
    for i in 0..g.len() {
        let x = g.coords(i);
        if dot(&x, &x) <= r * r {
            m[i * 3..i * 3 + 3].copy_from_slice(&mvec);
        }
    }
    let sol = ok(solve_stray_field(&m, &pg, 1.0))?;
    let mut dev2 = 0.0;
    let mut count = 0;
    for i in 0..g.len() {
        let x = g.coords(i);
        if dot(&x, &x) <= 0.2 * 0.2 {
            for c in 0..3 {
                dev2 += (sol.h[i * 3 + c] + mvec[c] / 3.0).powi(2);
            }
            count += 1;
        }
    }
    let rms = (dev2 / count as f64).sqrt() / (1.0 / 3.0);

    let mut identity_err: f64 = 0.0;
    let mut check_identity = |m: &[f64], sol: &magmove::strayfield::StrayFieldSolution| {
        let (lhs, rhs) = stray_energy_identity(m, sol);
        identity_err = identity_err.max((lhs - rhs).abs() / rhs.abs().max(1e-300));
    };
    check_identity(&m, &sol);
    let mut ratio_max = ok(stability_check(&m, &sol))?;

    // random smooth fields supported in the inner box
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let f = smooth_field(&g, rng, 1.0, false);
        (0..f.len())
            .map(|q| {
                let x = g.coords(q / 3);
                if x.iter().all(|v| v.abs() <= r) {
                    f[q]
                } else {
                    0.0
                }
            })
            .collect()
    };
    let m1 = random_field(&mut rng);
    let m2 = random_field(&mut rng);
    let alpha = -1.7;
    let s1 = ok(solve_stray_field(&m1, &pg, 1.0))?;
    let s2 = ok(solve_stray_field(&m2, &pg, 1.0))?;
    let combo = axpy(&m2, alpha, &m1);
    let s12 = ok(solve_stray_field(&combo, &pg, 1.0))?;
    for (mm, ss) in [(&m1, &s1), (&m2, &s2), (&combo, &s12)] {
        check_identity(mm, ss);
        ratio_max = ratio_max.max(ok(stability_check(mm, ss))?);
    }
    let hmax = s12.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lin_err = s12.h.iter().zip(axpy(&s2.h, alpha, &s1.h)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / hmax;
    let a12 = dot(&m1, &s2.h);
    let a21 = dot(&m2, &s1.h);
    let adj_err = (a12 - a21).abs() / a12.abs().max(a21.abs());
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "interior RMS deviation {:.2}%, identity rel err {identity_err:.1e}, linearity {lin_err:.1e}, self-adjointness {adj_err:.1e}, |H|/|M| <= {ratio_max:.3}; {secs:.1} s",
        100.0 * rms
    );
    ensure!(rms <= 0.05 && identity_err <= 1e-8 && lin_err <= 1e-10 && adj_err <= 1e-10 && ratio_max <= 1.02, "{detail}");
    ensure!(secs <= 120.0, "runtime: {detail}");
    Ok(detail)
}

fn relaxation_data(g: &GridSpec, amplitude: f64, seed: u64) -> DataProviders {
    let m0 = magmove::data::initial_magnetization(&magmove::data::MagnetizationPreset::Perturbed { base: [0.0, 0.0, 1.0], amplitude, seed }, g).unwrap();
    DataProviders { force: DataField::zero(), hext: DataField::zero(), eta0: identity(g), m0 }
}

/// Shared 50-step relaxation run (criteria 3 and 4).
fn relaxation_run() -> Result<TrajectoryStore, String> {
    static RUN: Mutex<Option<TrajectoryStore>> = Mutex::new(None);
    let mut guard = RUN.lock().unwrap();
    if let Some(t) = guard.as_ref() {
        return Ok(t.clone());
    }
    let g = ok(GridSpec::unit(3, 9, &clamped_bottom(3)))?;
    let data = relaxation_data(&g, 0.4, 3);
    let cfg = StepConfig { dt: 1e-2, t_end: 0.5, ..Default::default() };
    let run = ok(run_evolution(&g, EnergyModel::new(MaterialParams::default()), &data, &cfg))?;
    ensure!(run.termination == StepStatus::Accepted, "relaxation stopped early: {}", run.termination.as_str());
    record("relaxation 9^3", &run.trajectory);
    *guard = Some(run.trajectory.clone());
    Ok(run.trajectory)
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let traj = relaxation_run()?;
    ensure!(traj.len() == 51, "expected 51 snapshots, got {}", traj.len());
    let mut worst = f64::NEG_INFINITY;
    for (k, s) in traj.snapshots.iter().enumerate().skip(1) {
        let d = &s.diagnostics;
        let excess = (d.functional_min - d.functional_prev) / d.functional_min.abs();
        worst = worst.max(excess);
        ensure!(d.functional_min <= d.functional_prev + 1e-10 * d.functional_min.abs(), "step {k}: F_min {} > F_prev {}", d.functional_min, d.functional_prev);
        ensure!(s.status == StepStatus::Accepted, "step {k} not accepted");
    }
    Ok(format!("50 steps, max (F_min - F_prev)/|F| = {worst:.2e}; {:.1} s", t0.elapsed().as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let traj = relaxation_run()?;
    let rep = ok(energy_budget_report(&traj))?;
    ensure!(!rep.forced, "force-free run reports forcing work");
    ensure!(rep.monotone, "energy not monotone within 1e-10 E(0)");
    let e0 = rep.energy[0];
    let e_end = *rep.energy.last().unwrap();
    let diss = *rep.cumulative_dissipation.last().unwrap();
    ensure!(diss <= e0 - e_end + 1e-8, "dt sum R = {diss} > E(0) - E(end) + 1e-8 = {}", e0 - e_end + 1e-8);

    // forced run: body force and a moving external field
    let g = ok(GridSpec::unit(3, 7, &clamped_bottom(3)))?;
    let mut data = relaxation_data(&g, 0.2, 5);
    data.force = DataField::uniform([0.5, 0.0, -1.0], TimeProfile::Sine { omega: 5.0, phase: 0.3 });
    data.hext = DataField {
        shape: SpatialField::TravelingGaussian { amplitude: [0.3, 0.2, 0.5], center: [0.5, 0.5, 0.5], velocity: [0.5, 0.0, 0.0], width: 0.5 },
        profile: TimeProfile::Constant,
    };
    let params = MaterialParams::default();
    let cfg = StepConfig { dt: 2e-2, t_end: 0.2, ..Default::default() };
    let run = ok(run_evolution(&g, EnergyModel::new(params.clone()), &data, &cfg))?;
    ensure!(run.termination == StepStatus::Accepted, "forced run stopped early: {}", run.termination.as_str());
    record("forced 7^3", &run.trajectory);
    let frep = ok(energy_budget_report(&run.trajectory))?;
    ensure!(frep.forced, "forced run reports no forcing work");
    let env = ok(envelope_check(&run.trajectory, &params, &data, &cfg))?;
    let margin = env.lhs.iter().zip(&env.envelope).map(|(a, b)| a / b).fold(0.0, f64::max);
    ensure!(env.ok, "budget exceeds the envelope (max ratio {margin:.3})");
    Ok(format!(
        "force-free: E {e0:.6} -> {e_end:.6}, dt sum R = {diss:.6}; forced: budget excess {:.1e}, max LHS/envelope {margin:.3}; {:.1} s",
        frep.max_excess,
        t0.elapsed().as_secs_f64()
    ))
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let params = MaterialParams::default();
    let mut diffs = Vec::new();
    let mut values = Vec::new();
    for n in [9, 17, 33] {
        let g = ok(GridSpec::unit(3, n, &clamped_bottom(3)))?;
        let eta = Field::vector_from_fn(&g, |x| [2.0 * x[0] + 0.3 * x[1] * x[1], 2.0 * x[1], 2.0 * x[2]]);
        let m = Field::vector_from_fn(&g, |_| [0.2, -0.1, 0.9]);
        let lag = ok(total_energy(&eta, &m, &g, &params))?.total;
        let eul = ok(eulerian_energy(&eta, &m, &g, &params))?.total;
        ensure!(lag.is_finite() && lag > 0.0 && eul.is_finite() && eul > 0.0, "n = {n}: energies {lag}, {eul}");
        diffs.push((lag - eul).abs());
        values.push((lag, eul));
    }
    let ratios: Vec<f64> = diffs.windows(2).map(|p| p[0] / p[1]).collect();
    let detail = format!("|E~ - E| = {:.3e}, {:.3e}, {:.3e}; ratios {:.3}, {:.3}; {:.1} s", diffs[0], diffs[1], diffs[2], ratios[0], ratios[1], t0.elapsed().as_secs_f64());
    ensure!(ratios.iter().all(|r| (r - 4.0).abs() <= 0.5), "{detail}");
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    // round trip for an affine deformation and an affine magnetization
    let g = ok(GridSpec::unit(3, 9, &clamped_bottom(3)))?;
    let a = [[2.0, 0.3, 0.0], [0.0, 1.5, 0.2], [0.1, 0.0, 1.8]];
    let eta = Field::vector_from_fn(&g, |x| {
        let mut y = [0.5, -0.2, 0.1];
        for r in 0..3 {
            for c in 0..3 {
                y[r] += a[r][c] * x[c];
            }
        }
        y
    });
    let mt = Field::vector_from_fn(&g, |x| [0.3 + 0.2 * x[0], -0.4 + 0.1 * x[2], 0.8 - 0.3 * x[1]]);
    let kin = ok(build_kinematics(&eta, &g))?;
    let map = ok(EulerianMap::new(&g, &eta, &kin, 1))?;
    let m = ok(push_forward_magnetization(&mt, &kin, &map))?;
    let back = ok(pull_back_magnetization(&m, &eta, &kin, &map))?;
    let rt = back.data.iter().zip(&mt.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure!(rt <= 1e-12, "round-trip error {rt:e}");

    // mass identity on a curved deformation
    let eta = Field::vector_from_fn(&g, |x| [1.5 * x[0] + 0.1 * (3.0 * x[1]).sin(), 1.2 * x[1] + 0.05 * x[0] * x[2], 1.3 * x[2]]);
    let mt = Field::vector_from_fn(&g, |x| [0.5 + 0.3 * (2.0 * x[0]).cos(), 0.2 * x[1] * x[2], 1.0 - 0.4 * x[0]]);
    let kin = ok(build_kinematics(&eta, &g))?;
    let map = ok(EulerianMap::new(&g, &eta, &kin, 2))?;
    let u: Vec<f64> = (0..mt.data.len()).map(|q| mt.data[q] / kin.det[q / 3]).collect();
    let w = g.quadrature_weights();
    let msup = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut mass_err: f64 = 0.0;
    for c in 0..3 {
        let lag: f64 = (0..g.len()).map(|i| w[i] * mt.data[i * 3 + c]).sum();
        let eul = map.integrate(|loc, _| {
            let mut out = [0.0; 3];
            map.geometry.interpolate(loc, &u, 3, &mut out);
            out[c]
        });
        mass_err = mass_err.max((lag - eul).abs());
    }
    // second-order rasterization: sup |M| h_bg^2 |eta(Omega)|
    let h_bg = map.background().h()[0];
    let mass_tol = msup * h_bg * h_bg * map.cn.image_volume;
    ensure!(mass_err <= mass_tol, "mass identity error {mass_err:e} > {mass_tol:e}");

    // material derivative of a profile carried by an affine flow vanishes
    let alpha = 0.4;
    let c = [0.3, -0.2, 0.1];
    let profile = |t: f64, x: [f64; 3]| -> [f64; 3] {
        let mut xr = [0.0; 3];
        for k in 0..3 {
            xr[k] = (-alpha * t).exp() * (x[k] + c[k] / alpha) - c[k] / alpha;
        }
        let r2: f64 = xr.iter().map(|v| v * v).sum();
        let s = (-3.0 * alpha * t).exp() * (-4.0 * r2).exp();
        [s, -0.5 * s * xr[0], 0.7 * s]
    };
    let mut errs = Vec::new();
    for (n, dt) in [(17usize, 0.02), (33, 0.005)] {
        let h = 2.0 / (n - 1) as f64;
        let bg = ok(GridSpec::background(3, [n; 3], h, [-1.0; 3]))?;
        let t = 0.3;
        let prev = Field::vector_from_fn(&bg, |x| profile(t - dt, x));
        let cur = Field::vector_from_fn(&bg, |x| profile(t, x));
        let v = Field::vector_from_fn(&bg, |x| [alpha * x[0] + c[0], alpha * x[1] + c[1], alpha * x[2] + c[2]]);
        let dtm = ok(material_derivative(&prev, &cur, &v, dt, &bg))?;
        let e = dtm.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        errs.push(e);
    }
    let ratio = errs[0] / errs[1];
    let detail = format!(
        "round trip {rt:.1e}; mass err {mass_err:.2e} (tol {mass_tol:.2e}); D_t M residual {:.2e} -> {:.2e} under (h, dt) -> (h/2, dt/4), ratio {ratio:.2}; {:.1} s",
        errs[0],
        errs[1],
        t0.elapsed().as_secs_f64()
    );
    ensure!((3.0..=5.0).contains(&ratio), "{detail}");
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    // a strip wrapped 1.8 times around an annulus: positive Jacobian, overlapping image
    let g = ok(GridSpec::reference(3, [25, 9, 5], [1.0, 1.0, 0.5], &clamped_bottom(3)))?;
    let turn = 3.6 * std::f64::consts::PI;
    let fold = Field::vector_from_fn(&g, |x| {
        let r = 2.0 - x[1];
        let th = turn * x[0];
        [r * th.cos(), r * th.sin(), x[2]]
    });
    let kin = ok(build_kinematics(&fold, &g))?;
    ensure!(kin.min_det > 0.0, "folding map should have a positive Jacobian, min det {}", kin.min_det);
    let cn = ok(ciarlet_necas_residual(&fold, &kin, &g, 2))?;
    ensure!(!cn.ok, "folding map passes the volume identity ({} <= {})", cn.residual, cn.tolerance);
    let data = DataProviders { force: DataField::zero(), hext: DataField::zero(), eta0: fold.clone(), m0: Field::vector_from_fn(&g, |_| [0.0, 0.0, 1.0]) };
    let mut p = MaterialParams::default();
    p.stray = false;
    match prepare(&g, EnergyModel::new(p), &data, &StepConfig::default()) {
        Err(Error::Admissibility(_)) => {}
        other => return Err(format!("folding map not rejected: {:?}", other.map(|_| ()))),
    }

    // forced compression: a body force ramp pressing the body onto its clamped face
    let g = ok(GridSpec::unit(3, 7, &clamped_bottom(3)))?;
    let mut data = relaxation_data(&g, 0.0, 0);
    data.force = DataField::uniform([0.0, 0.0, -1.0], TimeProfile::Linear { rate: 1e4 });
    let mut p = MaterialParams::default();
    p.stray = false;
    let cfg = StepConfig { dt: 1e-2, t_end: 1.0, e_max: 1e2, ..Default::default() };
    let run = ok(run_evolution(&g, EnergyModel::new(p), &data, &cfg))?;
    record("compression 7^3", &run.trajectory);
    ensure!(run.termination != StepStatus::Accepted, "forced compression reached T_end");
    let (k, rejected) = run.rejected.as_ref().ok_or("no rejected step recorded")?;
    let accepted_min = run.trajectory.snapshots.iter().map(|s| s.diagnostics.min_det).fold(f64::INFINITY, f64::min);
    ensure!(accepted_min > 0.0, "accepted a state with det <= 0");

    let runs = RUNS.lock().unwrap().clone();
    ensure!(!runs.is_empty(), "no runs recorded");
    for (name, min_det, cn_ok) in &runs {
        ensure!(*min_det >= 1e-6, "{name}: min det {min_det:e}");
        ensure!(*cn_ok, "{name}: volume identity residual above tolerance");
    }
    let floor = runs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "fold rejected (residual {:.3} > tol {:.3}); compression stopped at step {k} with {} (min det of accepted states {accepted_min:.3}, rejected {:.3e}); {} runs, min det {floor:.3}; {:.1} s",
        cn.residual,
        cn.tolerance,
        run.termination.as_str(),
        rejected.diagnostics.min_det,
        runs.len(),
        t0.elapsed().as_secs_f64()
    ))
}

/// Toy with only the quadratic stored energy and fully clamped boundary.
fn toy_params() -> MaterialParams {
    let mut p = MaterialParams::default();
    p.stray = false;
    p.terms = EnergyTerms::elastic_only();
    p
}

/// Dense first-derivative matrix: rows `[node][c][k]`, columns `[node][c]`.
fn gradient_matrix(g: &GridSpec) -> DMatrix<f64> {
    let d = g.dim();
    let n = g.n();
    let h = g.h();
    let mut mat = DMatrix::zeros(g.len() * d * d, g.len() * d);
    for i in 0..g.len() {
        let ijk = g.multi_index(i);
        for k in 0..d {
            let at = |j: usize| {
                let mut q = ijk;
                q[k] = j;
                g.index(q)
            };
            let s = 1.0 / (2.0 * h[k]);
            let p = ijk[k];
            let st: Vec<(usize, f64)> = if p == 0 {
                vec![(at(0), -3.0 * s), (at(1), 4.0 * s), (at(2), -s)]
            } else if p == n[k] - 1 {
                vec![(at(p), 3.0 * s), (at(p - 1), -4.0 * s), (at(p - 2), s)]
            } else {
                vec![(at(p - 1), -s), (at(p + 1), s)]
            };
            for c in 0..d {
                for &(j, w) in &st {
                    mat[((i * d + c) * d + k, j * d + c)] += w;
                }
            }
        }
    }
    mat
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let d = 3;
    let g = ok(GridSpec::unit(d, 7, &Face::all(d)))?;
    let p = toy_params();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let eta_prev = axpy(&identity(&g).data, 1.0, &smooth_field(&g, &mut rng, 0.04, true));
    let m_prev = smooth_field(&g, &mut rng, 0.8, false);
    let f = [0.3, -0.2, 0.5];
    let hx = [0.1, 0.2, -0.3];
    let dt = 0.05;
    let data = DataProviders {
        force: DataField::uniform(f, TimeProfile::Constant),
        hext: DataField::uniform(hx, TimeProfile::Constant),
        eta0: ok(Field::from_data(&g, FieldRank::Vector, eta_prev.clone()))?,
        m0: ok(Field::from_data(&g, FieldRank::Vector, m_prev.clone()))?,
    };
    let cfg = StepConfig { dt, t_end: dt, grad_tol: 1e-11, ..Default::default() };
    let energy = ok(EnergyFunctional::new(&g, EnergyModel::new(p.clone()), &eta_prev))?;
    let moll = ok(mollifier_for(&cfg))?;
    let sd = ok(StepData::new(&data, &moll, 1, dt, &eta_prev, d))?;
    let fun = ok(assemble_functional(&energy, &eta_prev, &m_prev, None, sd))?;
    let res = ok(minimize_step(&fun, &eta_prev, &m_prev, &cfg))?;
    ensure!(res.status == StepStatus::Accepted, "toy step status {}", res.status.as_str());

    // oracle: assemble the quadratic form independently and solve densely
    let gm = gradient_matrix(&g);
    let w = g.quadrature_weights();
    let n = g.len();
    let gp = &gm * DVector::from_column_slice(&eta_prev);
    let mut b = DMatrix::zeros(n * d * d, n * d * d);
    let mut jp = vec![0.0; n];
    for i in 0..n {
        let fm = DMatrix::from_fn(d, d, |r, c| gp[(i * d + r) * d + c]);
        jp[i] = fm.determinant();
        let finv = fm.try_inverse().ok_or("singular previous gradient")?;
        let a = &finv * finv.transpose();
        for c in 0..d {
            for k in 0..d {
                let row = (i * d + c) * d + k;
                b[(row, row)] += w[i] * p.mu_e;
                for k2 in 0..d {
                    b[(row, (i * d + c) * d + k2)] += w[i] * 2.0 * p.nu / dt * jp[i] * a[(k, k2)];
                }
            }
        }
    }
    let hess = gm.transpose() * &b * &gm;
    let mut rhs0 = vec![0.0; n * d];
    let elastic = gm.transpose() * (&gp * p.mu_e).component_mul(&DVector::from_fn(n * d * d, |q, _| w[q / (d * d)]));
    for q in 0..n * d {
        rhs0[q] = -elastic[q] + w[q / d] * p.rho * f[q % d];
    }
    let free: Vec<usize> = (0..n * d).filter(|q| !g.is_dirichlet(q / d)).collect();
    let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
    let rf = DVector::from_fn(free.len(), |a, _| rhs0[free[a]]);
    let delta = hff.lu().solve(&rf).ok_or("singular toy system")?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, &q) in free.iter().enumerate() {
        num += (res.eta[q] - eta_prev[q] - delta[a]).powi(2);
        den += delta[a].powi(2);
    }
    let rel_eta = (num / den).sqrt();
    let mut num = 0.0;
    let mut den = 0.0;
    for q in 0..n * d {
        let dm = dt * p.mu * jp[q / d] * hx[q % d];
        num += (res.m[q] - m_prev[q] - dm).powi(2);
        den += dm * dm;
    }
    let rel_m = (num / den).sqrt();
    ensure!(rel_eta <= 1e-8 && rel_m <= 1e-8, "minimizer vs direct solve: eta {rel_eta:e}, M {rel_m:e}");

    // weak-form defects along a short toy run
    let cfg = StepConfig { dt, t_end: 4.0 * dt, grad_tol: 1e-11, ..Default::default() };
    let run = ok(run_evolution(&g, EnergyModel::new(p), &data, &cfg))?;
    ensure!(run.termination == StepStatus::Accepted, "toy run stopped: {}", run.termination.as_str());
    record("quadratic toy", &run.trajectory);
    let bank = TestBank::new(&g);
    let defects = ok(el_residuals(&run.trajectory, &energy, &data, &cfg, &bank))?;
    let worst = defects.iter().fold(0.0f64, |a, (x, y)| a.max(*x).max(*y));
    ensure!(worst <= 1e-8, "EL defect {worst:e}");
    let weak = ok(weak_residual_check(&run.trajectory, &energy, &data, &cfg, &bank))?;
    ensure!(weak.initial_deformation_distance[0] == 0.0 && weak.initial_magnetization_distance[0] == 0.0, "initial distances nonzero");
    Ok(format!(
        "rel err vs dense LU: eta {rel_eta:.1e}, M {rel_m:.1e}; max EL defect {worst:.1e}; weak defects (report) motion {:.1e}, magnetic {:.1e}; {:.1} s",
        weak.max_motion,
        weak.max_magnetic,
        t0.elapsed().as_secs_f64()
    ))
}

fn levels(g: &GridSpec, model: &EnergyModel, data: &DataProviders, cfg: &StepConfig, name: &str) -> Result<Vec<TrajectoryStore>, String> {
    let mut out = Vec::new();
    for l in 0..3 {
        let c = StepConfig { dt: cfg.dt / (1u64 << l) as f64, ..cfg.clone() };
        let run = ok(run_evolution(g, model.clone(), data, &c))?;
        ensure!(run.termination == StepStatus::Accepted, "{name} level {l} stopped: {}", run.termination.as_str());
        record(&format!("{name} level {l}"), &run.trajectory);
        out.push(run.trajectory);
    }
    Ok(out)
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    // linear toy: clamped body driven by a time-periodic body force
    let g = ok(GridSpec::unit(3, 7, &Face::all(3)))?;
    let data = DataProviders {
        force: DataField::uniform([0.0, 0.5, 1.0], TimeProfile::Sine { omega: 10.0, phase: 0.0 }),
        hext: DataField::zero(),
        eta0: identity(&g),
        m0: Field::vector_from_fn(&g, |_| [0.0, 0.0, 1.0]),
    };
    let cfg = StepConfig { dt: 0.04, t_end: 0.4, grad_tol: 1e-10, ..Default::default() };
    let lin = ok(analyze_refinement(&levels(&g, &EnergyModel::new(toy_params()), &data, &cfg, "linear toy")?))?;

    // nonlinear relaxation, stray field off
    let g = ok(GridSpec::unit(3, 7, &clamped_bottom(3)))?;
    let data = relaxation_data(&g, 0.4, 9);
    let mut p = MaterialParams::default();
    p.stray = false;
    let cfg = StepConfig { dt: 0.02, t_end: 0.1, ..Default::default() };
    let nl = ok(analyze_refinement(&levels(&g, &EnergyModel::new(p), &data, &cfg, "relaxation")?))?;

    let detail = format!(
        "linear toy ratios {:?}, Hoelder spread {:.3}; relaxation discrepancies {:?} (ratios {:?}), Hoelder {:?} spread {:.3}; {:.1} s",
        lin.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
        lin.holder_spread,
        nl.discrepancies.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>(),
        nl.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
        nl.holder.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
        nl.holder_spread,
        t0.elapsed().as_secs_f64()
    );
    ensure!(lin.ratios.iter().all(|r| (r - 2.0).abs() <= 0.3), "linear ratio: {detail}");
    ensure!(nl.monotone, "relaxation discrepancies not decreasing: {detail}");
    ensure!(nl.holder_spread <= 0.2 && lin.holder_spread <= 0.2, "Hoelder constants unstable: {detail}");
    Ok(detail)
}

fn criterion_10() -> Outcome {
    let t0 = Instant::now();
    let sample = ok(GridSpec::background(3, [9; 3], 0.25, [-0.5; 3]))?;
    let gaussian = DataField {
        shape: SpatialField::TravelingGaussian { amplitude: [1.0, -0.5, 0.3], center: [0.2, 0.5, 0.5], velocity: [0.6, 0.0, -0.2], width: 0.4 },
        profile: TimeProfile::Sine { omega: 7.0, phase: 0.4 },
    };
    let sg = ok(GridSpec::background(3, [5; 3], 0.5, [-0.5; 3]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let values: Vec<f64> = (0..sg.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sampled = DataField { shape: SpatialField::Sampled { grid: sg, values }, profile: TimeProfile::Sine { omega: 3.0, phase: 1.1 } };
    let mut parts = Vec::new();
    for (name, h) in [("gaussian", &gaussian), ("sampled", &sampled)] {
        let r = ok(hext_difference_quotient_check(h, 0.01, 100, &sample))?;
        ensure!(r.ok, "{name}: lhs {} > rhs {}", r.lhs, r.rhs);
        parts.push(format!("{name} {:.4e} <= {:.4e}", r.lhs, r.rhs));
    }
    Ok(format!("{}; {:.1} s", parts.join(", "), t0.elapsed().as_secs_f64()))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "stray-field physics", criterion_2),
        (3, "descent", criterion_3),
        (4, "energy-dissipation budget", criterion_4),
        (5, "Lagrangian/Eulerian equivalence", criterion_5),
        (6, "kinematic dictionary", criterion_6),
        (8, "EL residuals", criterion_8),
        (9, "refinement", criterion_9),
        (10, "external-field discretization", criterion_10),
        // runs last: checks admissibility along every run above
        (7, "admissibility", criterion_7),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
