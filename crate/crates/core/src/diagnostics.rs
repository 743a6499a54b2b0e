//! Post-hoc checks on completed runs: energy budget, Gronwall envelope,
//! Euler-Lagrange and weak-form defects, time-step refinement, and the
//! external-field difference-quotient bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{clement_average, DataField};
use crate::dissipation::Dissipation;
use crate::energy::{EnergyFunctional, EnergyModel, MaterialParams};
use crate::error::{Error, Result};
use crate::grid::{DiffOps, GridSpec};
use crate::linalg;
use crate::stepper::{assemble_functional, mollifier_for, run_evolution, DataProviders, StepConfig, StepData};
use crate::trajectory::{InterpolantMode, StepStatus, TrajectoryStore};

/// Telescoped energy-dissipation balance over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub energy: Vec<f64>,
    /// `dt * sum_{l <= k} R_l`
    pub cumulative_dissipation: Vec<f64>,
    /// `E_k + dt sum R`
    pub lhs: Vec<f64>,
    /// `E_0 + sum of forcing work up to k`
    pub rhs: Vec<f64>,
    /// Largest `lhs_k - rhs_k`.
    pub max_excess: f64,
    /// Any nonzero forcing work.
    pub forced: bool,
    /// Energy nonincreasing within `1e-10 E_0`.
    pub monotone: bool,
}

/// Budget check; fails with the first step whose left side exceeds the
/// initial energy plus forcing work by more than the accumulated
/// per-step descent allowance.
pub fn energy_budget_report(traj: &TrajectoryStore) -> Result<BudgetReport> {
    if traj.is_empty() {
        return Err(Error::Diagnostic("empty trajectory".into()));
    }
    let s = &traj.snapshots;
    let e0 = s[0].energy.total;
    let scale = s.iter().map(|x| x.diagnostics.functional_prev.abs().max(x.energy.total.abs())).fold(e0.abs(), f64::max).max(1.0);
    let mut rep = BudgetReport {
        energy: vec![e0],
        cumulative_dissipation: vec![0.0],
        lhs: vec![e0],
        rhs: vec![e0],
        max_excess: 0.0,
        forced: false,
        monotone: true,
    };
    let mut diss = 0.0;
    let mut work = 0.0;
    let mut fail = None;
    for (k, snap) in s.iter().enumerate().skip(1) {
        diss += snap.dissipation;
        work += snap.diagnostics.forcing_work;
        rep.forced |= snap.diagnostics.forcing_work != 0.0;
        let e = snap.energy.total;
        if e > rep.energy[k - 1] + 1e-10 * e0.abs() {
            rep.monotone = false;
        }
        rep.energy.push(e);
        rep.cumulative_dissipation.push(diss);
        rep.lhs.push(e + diss);
        rep.rhs.push(e0 + work);
        let excess = e + diss - (e0 + work);
        rep.max_excess = rep.max_excess.max(excess);
        if excess > 1e-10 * k as f64 * scale + 1e-12 && fail.is_none() {
            fail = Some((k, excess));
        }
    }
    if let Some((k, ex)) = fail {
        return Err(Error::Diagnostic(format!("energy budget violated at step {k} by {ex:e}")));
    }
    Ok(rep)
}

/// Realized constants entering the Gronwall envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeInputs {
    /// Initial energy plus the largest accumulated external-field work.
    pub c2: f64,
    /// `min J / |F|_2^2` over the states that served as step bases.
    pub c3: f64,
    pub volume: f64,
    pub rho: f64,
    pub f_sup: f64,
    pub nu: f64,
    pub beta: f64,
}

/// `[c2 + T |Omega_0| (rho |f|_inf)^2 / (2 nu c3)] exp(max{1, 8 beta^2} T)`.
pub fn gronwall_envelope(inp: &EnvelopeInputs, t: f64) -> f64 {
    let rate = (8.0 * inp.beta * inp.beta).max(1.0);
    let forcing = if inp.f_sup == 0.0 { 0.0 } else { t * inp.volume * (inp.rho * inp.f_sup).powi(2) / (2.0 * inp.nu * inp.c3) };
    (inp.c2 + forcing) * (rate * t).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub inputs: EnvelopeInputs,
    /// `E_k / 2 + dt sum [nu c3 / 2 int |grad v|^2 + 1/2 int |dM~/dt|^2 / J]`
    pub lhs: Vec<f64>,
    pub envelope: Vec<f64>,
    pub ok: bool,
}

fn min_j_over_f2(state_f: &[f64], det: &[f64], d: usize) -> f64 {
    let dd = d * d;
    det.iter().enumerate().map(|(i, j)| j / linalg::spectral_norm(&state_f[i * dd..(i + 1) * dd], d).powi(2)).fold(f64::INFINITY, f64::min)
}

/// Compute realized envelope inputs and compare the run against the envelope.
pub fn envelope_check(traj: &TrajectoryStore, params: &MaterialParams, data: &DataProviders, config: &StepConfig) -> Result<EnvelopeReport> {
    let grid = &traj.grid;
    let d = grid.dim();
    let ops = DiffOps::new(grid)?;
    let w = grid.quadrature_weights();
    let s = &traj.snapshots;
    let dt = traj.dt;
    let kins: Vec<_> = s.iter().map(|x| crate::kinematics::kinematics_from_gradient(ops.gradient(&x.deformation.data, d), d)).collect();
    let c3 = kins[..kins.len().saturating_sub(1).max(1)].iter().map(|k| min_j_over_f2(&k.f, &k.det, d)).fold(f64::INFINITY, f64::min);
    // realized external-field work and force bound
    let mollifier = mollifier_for(config)?;
    let mut hext_acc = 0.0f64;
    let mut hext_max = 0.0f64;
    let mut f_sup = 0.0f64;
    for k in 1..s.len() {
        let prev = &s[k - 1];
        let cur = &s[k];
        if !data.hext.is_zero() {
            let mut inc = 0.0;
            for i in 0..grid.len() {
                let (hc, _) = clement_average(&data.hext, k, dt, cur.deformation.node(i), d)?;
                let (hp, _) = clement_average(&data.hext, k, dt, prev.deformation.node(i), d)?;
                for c in 0..d {
                    inc += w[i] * params.mu * (cur.magnetization.node(i)[c] * hc[c] - prev.magnetization.node(i)[c] * hp[c]);
                }
            }
            hext_acc += inc;
            hext_max = hext_max.max(hext_acc.abs());
        }
        if !data.force.is_zero() {
            let sd = StepData::new(data, &mollifier, k, dt, &prev.deformation.data, d)?;
            for v in sd.force.chunks(d) {
                f_sup = f_sup.max(linalg::norm_sq(v).sqrt());
            }
        }
    }
    let inputs = EnvelopeInputs {
        c2: s[0].energy.total + hext_max,
        c3,
        volume: grid.domain_volume(),
        rho: params.rho,
        f_sup,
        nu: params.nu,
        beta: params.beta,
    };
    let mut lhs = vec![0.5 * s[0].energy.total];
    let mut env = vec![gronwall_envelope(&inputs, 0.0)];
    let mut acc = 0.0;
    for k in 1..s.len() {
        let v: Vec<f64> = s[k].deformation.data.iter().zip(&s[k - 1].deformation.data).map(|(a, b)| (a - b) / dt).collect();
        let gv = ops.gradient(&v, d);
        let mut visc = 0.0;
        let mut mag = 0.0;
        for i in 0..grid.len() {
            visc += w[i] * linalg::norm_sq(&gv[i * d * d..(i + 1) * d * d]);
            let mut dm = 0.0;
            for c in 0..d {
                let r = (s[k].magnetization.node(i)[c] - s[k - 1].magnetization.node(i)[c]) / dt;
                dm += r * r;
            }
            mag += w[i] * 0.5 * dm / kins[k - 1].det[i];
        }
        acc += dt * (0.5 * params.nu * c3 * visc + mag);
        lhs.push(0.5 * s[k].energy.total + acc);
        env.push(gronwall_envelope(&inputs, k as f64 * dt));
    }
    let ok = lhs.iter().zip(&env).all(|(a, b)| a <= b);
    Ok(EnvelopeReport { inputs, lhs, envelope: env, ok })
}

/// Compactly supported tensor-product bump `prod_k b((x_k - c_k) / r) e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 3],
    pub radius: f64,
    pub direction: [f64; 3],
}

impl Bump {
    pub fn eval(&self, x: &[f64], d: usize) -> [f64; 3] {
        let mut s = 1.0;
        for k in 0..d {
            let t = (x[k] - self.center[k]) / self.radius;
            if t.abs() >= 1.0 {
                return [0.0; 3];
            }
            s *= (1.0 - 1.0 / (1.0 - t * t)).exp();
        }
        let mut out = [0.0; 3];
        for c in 0..d {
            out[c] = s * self.direction[c];
        }
        out
    }
}

/// Fixed bank of 27 bumps at three scales, supported inside the reference box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestBank {
    pub bumps: Vec<Bump>,
}

pub const TEST_BANK_SEED: u64 = 0x7e57_ba4c;

impl TestBank {
    pub fn new(grid: &GridSpec) -> Self {
        let d = grid.dim();
        let n = grid.n();
        let h = grid.h();
        let o = grid.origin();
        let ext: Vec<f64> = (0..d).map(|k| (n[k] - 1) as f64 * h[k]).collect();
        let lmin = ext.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(TEST_BANK_SEED);
        let mut bumps = Vec::with_capacity(27);
        for scale in [0.45, 0.3, 0.15] {
            let r = scale * lmin;
            for _ in 0..9 {
                let mut center = [0.0; 3];
                let mut dir = [0.0; 3];
                for k in 0..d {
                    center[k] = o[k] + rng.gen_range(r..(ext[k] - r).max(r + 1e-12));
                    dir[k] = rng.gen_range(-1.0..1.0);
                }
                let nd = linalg::norm_sq(&dir[..d]).sqrt().max(1e-12);
                for v in dir.iter_mut() {
                    *v /= nd;
                }
                bumps.push(Bump { center, radius: r, direction: dir });
            }
        }
        TestBank { bumps }
    }

    /// Bump `j` sampled at the given points `[node][c]`.
    pub fn sample(&self, j: usize, points: &[f64], d: usize) -> Vec<f64> {
        points.chunks(d).flat_map(|p| self.bumps[j].eval(p, d)[..d].to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.bumps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bumps.is_empty()
    }
}

fn reference_points(grid: &GridSpec) -> Vec<f64> {
    let d = grid.dim();
    (0..grid.len()).flat_map(|i| grid.coords(i)[..d].to_vec()).collect()
}

/// Largest `|<g, chi>| / |chi|_L2` over the bank; `g` is a nodal gradient.
fn max_pairing(g: &[f64], tests: &[Vec<f64>], w: &[f64], d: usize) -> f64 {
    tests
        .iter()
        .map(|chi| {
            let num: f64 = g.iter().zip(chi).map(|(a, b)| a * b).sum();
            let den: f64 = chi.iter().enumerate().map(|(q, v)| w[q / d] * v * v).sum::<f64>().sqrt();
            if den > 0.0 {
                num.abs() / den
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Per-step `(motion, magnetic)` defects of the discrete Euler-Lagrange
/// equations paired with the test bank. Step 0 reports zeros.
pub fn el_residuals(
    traj: &TrajectoryStore,
    energy: &EnergyFunctional,
    data: &DataProviders,
    config: &StepConfig,
    bank: &TestBank,
) -> Result<Vec<(f64, f64)>> {
    let grid = &traj.grid;
    let d = grid.dim();
    let s = &traj.snapshots;
    let mollifier = mollifier_for(config)?;
    let tests: Vec<Vec<f64>> = (0..bank.len()).map(|j| bank.sample(j, &reference_points(grid), d)).collect();
    let mut out = vec![(0.0, 0.0)];
    let mut v = vec![0.0; s[0].deformation.data.len()];
    for k in 1..s.len() {
        let prev = &s[k - 1];
        let sd = StepData::new(data, &mollifier, k, traj.dt, &prev.deformation.data, d)?;
        let fun = assemble_functional(energy, &prev.deformation.data, &prev.magnetization.data, config.inertia.then_some(&v[..]), sd)?;
        let ev = fun.evaluate(&s[k].deformation.data, &s[k].magnetization.data, true);
        if !ev.parts.total.is_finite() {
            return Err(Error::Diagnostic(format!("step {k}: functional is infinite at the stored state")));
        }
        let mut ge = ev.grad_eta;
        for i in 0..grid.len() {
            if grid.is_dirichlet(i) {
                ge[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out.push((max_pairing(&ge, &tests, &energy.weights, d), max_pairing(&ev.grad_m, &tests, &energy.weights, d)));
        for (vi, (a, b)) in v.iter_mut().zip(s[k].deformation.data.iter().zip(&prev.deformation.data)) {
            *vi = (a - b) / traj.dt;
        }
    }
    Ok(out)
}

/// Fail if any defect exceeds `tol * factor`.
pub fn assert_el_bounds(defects: &[(f64, f64)], tol: f64, factor: f64) -> Result<()> {
    for (k, (a, b)) in defects.iter().enumerate() {
        if *a > tol * factor || *b > tol * factor {
            return Err(Error::Diagnostic(format!("step {k}: EL defects ({a:e}, {b:e}) exceed {:e}", tol * factor)));
        }
    }
    Ok(())
}

/// Convergence table of a time-step refinement study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTable {
    pub dts: Vec<f64>,
    /// Sup-in-time L2 distance of the affine interpolants of consecutive levels.
    pub discrepancies: Vec<f64>,
    pub ratios: Vec<f64>,
    pub monotone: bool,
    /// Per level, `max |eta(t1) - eta(t2)|_inf / sqrt|t1 - t2|` over stored times.
    pub holder: Vec<f64>,
    /// Largest relative deviation of a Hoelder constant from their mean.
    pub holder_spread: f64,
}

fn l2_dist(a: &[f64], b: &[f64], w: &[f64], d: usize) -> f64 {
    a.iter().zip(b).enumerate().map(|(q, (x, y))| w[q / d] * (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Analyze runs at `dt, dt/2, dt/4, ...` on identical data.
pub fn analyze_refinement(levels: &[TrajectoryStore]) -> Result<RefinementTable> {
    if levels.len() < 3 {
        return Err(Error::Config("refinement needs at least 3 levels".into()));
    }
    let grid = &levels[0].grid;
    let d = grid.dim();
    let w = grid.quadrature_weights();
    let t_end = levels[0].last_time();
    for l in levels {
        if (l.last_time() - t_end).abs() > 1e-9 * t_end.max(1.0) {
            return Err(Error::Diagnostic("refinement levels end at different times".into()));
        }
    }
    let mut disc = Vec::new();
    for pair in levels.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let mut sup = 0.0f64;
        for k in 0..b.len() {
            let t = k as f64 * b.dt;
            let (ea, ma) = a.eval(t, InterpolantMode::Affine)?;
            let s = &b.snapshots[k];
            let dist = l2_dist(&ea.data, &s.deformation.data, &w, d) + l2_dist(&ma.data, &s.magnetization.data, &w, d);
            sup = sup.max(dist);
        }
        disc.push(sup);
    }
    let ratios: Vec<f64> = disc.windows(2).map(|p| p[0] / p[1]).collect();
    let monotone = disc.windows(2).all(|p| p[1] < p[0]) || disc.iter().all(|x| *x == 0.0);
    let holder: Vec<f64> = levels
        .iter()
        .map(|l| {
            let s = &l.snapshots;
            let mut c = 0.0f64;
            for j in 0..s.len() {
                for k in (j + 1)..s.len() {
                    let diff = s[k].deformation.data.chunks(d).zip(s[j].deformation.data.chunks(d)).map(|(a, b)| {
                        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    });
                    let m = diff.fold(0.0, f64::max);
                    c = c.max(m / ((k - j) as f64 * l.dt).sqrt());
                }
            }
            c
        })
        .collect();
    let mean = holder.iter().sum::<f64>() / holder.len() as f64;
    let holder_spread = if mean > 0.0 { holder.iter().map(|c| (c / mean - 1.0).abs()).fold(0.0, f64::max) } else { 0.0 };
    Ok(RefinementTable { dts: levels.iter().map(|l| l.dt).collect(), discrepancies: disc, ratios, monotone, holder, holder_spread })
}

/// Run at `dt, dt/2, ..., dt/2^(levels-1)` and analyze. The mollifier width
/// follows each level's `dt` unless fixed in `config`.
pub fn refinement_study(grid: &GridSpec, model: &EnergyModel, data: &DataProviders, config: &StepConfig, levels: usize) -> Result<(RefinementTable, Vec<TrajectoryStore>)> {
    if levels < 3 {
        return Err(Error::Config("refinement needs at least 3 levels".into()));
    }
    let mut runs = Vec::with_capacity(levels);
    for l in 0..levels {
        let cfg = StepConfig { dt: config.dt / (1u64 << l) as f64, ..config.clone() };
        let run = run_evolution(grid, model.clone(), data, &cfg)?;
        if run.termination != StepStatus::Accepted {
            return Err(Error::Diagnostic(format!("level {l} stopped early: {}", run.termination.as_str())));
        }
        runs.push(run.trajectory);
    }
    Ok((analyze_refinement(&runs)?, runs))
}

/// Defects of the time-continuous weak forms on the affine interpolants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualReport {
    /// Per interval, motion defect at the interval midpoint.
    pub motion: Vec<f64>,
    /// Per interval, magnetic defect against Eulerian test fields.
    pub magnetic: Vec<f64>,
    pub max_motion: f64,
    pub max_magnetic: f64,
    /// `|eta(t_k) - eta_0|_C1` per stored time.
    pub initial_deformation_distance: Vec<f64>,
    /// `|M~(t_k) - M~_0|_L2` per stored time.
    pub initial_magnetization_distance: Vec<f64>,
}

/// Evaluate the weak forms at interval midpoints of the affine interpolants.
/// Motion is tested with reference bumps; the magnetic balance with
/// Eulerian bumps composed with the deformation, using
/// `D_t M = (dM~/dt) / J`.
pub fn weak_residual_check(traj: &TrajectoryStore, energy: &EnergyFunctional, data: &DataProviders, config: &StepConfig, bank: &TestBank) -> Result<WeakResidualReport> {
    let grid = &traj.grid;
    let d = grid.dim();
    let s = &traj.snapshots;
    let dt = traj.dt;
    let p = energy.params();
    let w = &energy.weights;
    let ops = DiffOps::new(grid)?;
    let mollifier = mollifier_for(config)?;
    let ref_tests: Vec<Vec<f64>> = (0..bank.len()).map(|j| bank.sample(j, &reference_points(grid), d)).collect();
    let mut motion = Vec::new();
    let mut magnetic = Vec::new();
    for k in 1..s.len() {
        let t = (k as f64 - 0.5) * dt;
        let (eta, m) = traj.eval(t, InterpolantMode::Affine)?;
        let ev = energy.evaluate(&eta.data, &m.data, true);
        if ev.breakdown.infinite {
            return Err(Error::Diagnostic(format!("interval {k}: infinite energy on the interpolant")));
        }
        let kin = crate::kinematics::kinematics_from_gradient(ops.gradient(&eta.data, d), d);
        let diss = Dissipation::new(grid, &kin, p.nu)?;
        let v: Vec<f64> = s[k].deformation.data.iter().zip(&s[k - 1].deformation.data).map(|(a, b)| (a - b) / dt).collect();
        let mdot: Vec<f64> = s[k].magnetization.data.iter().zip(&s[k - 1].magnetization.data).map(|(a, b)| (a - b) / dt).collect();
        let mut ge = ev.grad_eta;
        for (g, r) in ge.iter_mut().zip(diss.grad_eta(&v)) {
            *g += r;
        }
        let mut gm = ev.grad_m;
        for (g, r) in gm.iter_mut().zip(diss.grad_m(&mdot)) {
            *g += r;
        }
        if !data.force.is_zero() {
            let t_moll = t.clamp(0.0, mollifier.horizon);
            for i in 0..grid.len() {
                let (f, _) = mollifier.apply(&data.force, t_moll, eta.node(i), d)?;
                for c in 0..d {
                    ge[i * d + c] -= w[i] * p.rho * f[c];
                }
            }
        }
        if !data.hext.is_zero() {
            for i in 0..grid.len() {
                let (h, jac) = data.hext.eval(t, eta.node(i), d);
                for r in 0..d {
                    gm[i * d + r] -= w[i] * p.mu * h[r];
                    for c in 0..d {
                        ge[i * d + c] -= w[i] * p.mu * m.node(i)[r] * jac[r * d + c];
                    }
                }
            }
        }
        for i in 0..grid.len() {
            if grid.is_dirichlet(i) {
                ge[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        motion.push(max_pairing(&ge, &ref_tests, w, d));
        // Eulerian tests chi(eta(X)); the J in dx = J dX cancels 1/J of the
        // reference gradient density, leaving the nodal pairing
        let eul_tests: Vec<Vec<f64>> = (0..bank.len()).map(|j| bank.sample(j, &eta.data, d)).collect();
        magnetic.push(max_pairing(&gm, &eul_tests, w, d));
    }
    let g0 = ops.gradient(&s[0].deformation.data, d);
    let mut init_def = Vec::new();
    let mut init_mag = Vec::new();
    for snap in s {
        let diff: Vec<f64> = snap.deformation.data.iter().zip(&s[0].deformation.data).map(|(a, b)| a - b).collect();
        let c0 = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g = ops.gradient(&snap.deformation.data, d);
        let c1 = g.iter().zip(&g0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        init_def.push(c0 + c1);
        init_mag.push(l2_dist(&snap.magnetization.data, &s[0].magnetization.data, w, d));
    }
    Ok(WeakResidualReport {
        max_motion: motion.iter().cloned().fold(0.0, f64::max),
        max_magnetic: magnetic.iter().cloned().fold(0.0, f64::max),
        motion,
        magnetic,
        initial_deformation_distance: init_def,
        initial_magnetization_distance: init_mag,
    })
}

/// Both sides of the bound
/// `dt sum_{l=2}^K |(H^l - H^{l-1}) / dt|^{4/3}_{L^{4/3}} <= int_0^{K dt} |d_t H|^{4/3}_{L^{4/3}}`
/// with the spatial norm on `sample` and interval averages `H^l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceQuotientReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

pub fn hext_difference_quotient_check(hext: &DataField, dt: f64, steps: usize, sample: &GridSpec) -> Result<DifferenceQuotientReport> {
    if steps < 2 || !(dt > 0.0) {
        return Err(Error::Config("need dt > 0 and at least two steps".into()));
    }
    let d = sample.dim();
    let w = sample.quadrature_weights();
    let p = 4.0 / 3.0;
    let (gx, gw) = crate::data::gauss_legendre(8);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for i in 0..sample.len() {
        let x = sample.coords(i);
        let mut prev = clement_average(hext, 1, dt, &x, d)?.0;
        let mut acc = 0.0;
        for l in 2..=steps {
            let cur = clement_average(hext, l, dt, &x, d)?.0;
            let q: f64 = (0..d).map(|c| ((cur[c] - prev[c]) / dt).powi(2)).sum::<f64>().sqrt();
            acc += dt * q.powf(p);
            prev = cur;
        }
        lhs += w[i] * acc;
        let mut acc = 0.0;
        for l in 0..steps {
            for (xi, wi) in gx.iter().zip(&gw) {
                let t = l as f64 * dt + 0.5 * dt * (xi + 1.0);
                let v = hext.time_derivative(t, &x, d);
                let q: f64 = (0..d).map(|c| v[c] * v[c]).sum::<f64>().sqrt();
                acc += 0.5 * dt * wi * q.powf(p);
            }
        }
        rhs += w[i] * acc;
    }
    Ok(DifferenceQuotientReport { lhs, rhs, ok: lhs <= rhs })
}

/// Finite-difference check of the energy and dissipation gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub seed: u64,
    /// Worst relative error of the energy over deformation, magnetization and joint directions.
    pub energy: f64,
    /// Same for the dissipation at the perturbed state.
    pub dissipation: f64,
}

fn smooth_direction(grid: &GridSpec, rng: &mut ChaCha8Rng, amp: f64, vanish_on_dirichlet: bool) -> Vec<f64> {
    let d = grid.dim();
    let coef: Vec<[f64; 4]> = (0..d * 3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.0..6.0)]).collect();
    let mut out = vec![0.0; grid.len() * d];
    for i in 0..grid.len() {
        if vanish_on_dirichlet && grid.is_dirichlet(i) {
            continue;
        }
        let x = grid.coords(i);
        for c in 0..d {
            let v: f64 = coef[c * 3..c * 3 + 3].iter().map(|k| k[0] * (k[1] * x[0] + k[2] * x[1] + 0.7 * x[2] + k[3]).sin()).sum();
            out[i * d + c] = amp * v;
        }
    }
    out
}

/// Smallest relative central-difference error over steps `1e-3 .. 1e-6`.
fn fd_error(f: impl Fn(f64) -> f64, exact: f64) -> f64 {
    [1e-3, 1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&s| ((f(s) - f(-s)) / (2.0 * s) - exact).abs() / exact.abs().max(1e-300))
        .fold(f64::INFINITY, f64::min)
}

/// Compare analytic gradients against central differences at a smooth
/// random perturbation of `(eta, m)` along smooth random directions.
pub fn gradient_check(energy: &EnergyFunctional, eta: &[f64], m: &[f64], seed: u64) -> Result<GradientCheck> {
    let grid = &energy.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lmin = grid.min_spacing() * (grid.n().iter().take(grid.dim()).min().copied().unwrap_or(2) - 1) as f64;
    let eta: Vec<f64> = eta.iter().zip(smooth_direction(grid, &mut rng, 0.01 * lmin, true)).map(|(a, b)| a + b).collect();
    let mscale = m.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    let m: Vec<f64> = m.iter().zip(smooth_direction(grid, &mut rng, 0.2 * mscale, false)).map(|(a, b)| a + b).collect();
    let ev = energy.evaluate(&eta, &m, true);
    if ev.breakdown.infinite {
        return Err(Error::Diagnostic("energy is infinite at the perturbed state".into()));
    }
    let de = smooth_direction(grid, &mut rng, lmin, true);
    let dm = smooth_direction(grid, &mut rng, mscale, false);
    let zero = vec![0.0; de.len()];
    let mut e_err: f64 = 0.0;
    for (u, w) in [(&de, &zero), (&zero, &dm), (&de, &dm)] {
        let exact = linalg::dot(&ev.grad_eta, u) + linalg::dot(&ev.grad_m, w);
        let f = |s: f64| {
            let e: Vec<f64> = eta.iter().zip(u).map(|(a, b)| a + s * b).collect();
            let mm: Vec<f64> = m.iter().zip(w).map(|(a, b)| a + s * b).collect();
            energy.evaluate(&e, &mm, false).breakdown.total
        };
        e_err = e_err.max(fd_error(f, exact));
    }
    let diss = Dissipation::new(grid, &energy.kinematics(&eta), energy.params().nu)?;
    let re = smooth_direction(grid, &mut rng, 1.0, true);
    let rm = smooth_direction(grid, &mut rng, 1.0, false);
    let (ge, gm) = (diss.grad_eta(&re), diss.grad_m(&rm));
    let exact = linalg::dot(&ge, &de) + linalg::dot(&gm, &dm);
    let f = |s: f64| {
        let a: Vec<f64> = re.iter().zip(&de).map(|(x, y)| x + s * y).collect();
        let b: Vec<f64> = rm.iter().zip(&dm).map(|(x, y)| x + s * y).collect();
        diss.value(&a, &b)
    };
    Ok(GradientCheck { seed, energy: e_err, dissipation: fd_error(f, exact) })
}
