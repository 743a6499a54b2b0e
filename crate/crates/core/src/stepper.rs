//! Minimizing-movements driver: one joint minimization of the incremental
//! functional per time step, followed by admissibility checks.

use serde::{Deserialize, Serialize};

use crate::data::{clement_average, DataField, Mollifier};
use crate::dissipation::Dissipation;
use crate::energy::{EnergyBreakdown, EnergyFunctional, EnergyModel};
use crate::error::{contract, Error, Result};
use crate::grid::{Field, FieldRank, GridSpec};
use crate::kinematics::{boundary_injectivity_margin, ciarlet_necas_residual};
use crate::lbfgs::{self, LbfgsOptions};
use crate::trajectory::{Snapshot, StepDiagnostics, StepStatus, TrajectoryStore};

/// Time-stepping and inner-solver parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Mollifier half-width; `None` means `kappa = dt`.
    pub kappa: Option<f64>,
    /// Dual-norm tolerance of the inner solver.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Total energy above which a step is reported as blow-up.
    pub e_max: f64,
    /// Time-delayed kinetic term `rho/2 |(eta - eta_prev)/dt - v_prev|^2`.
    pub inertia: bool,
    pub seed: u64,
    pub history: usize,
    /// Alternate between deformation and magnetization (debug only).
    pub alternating: bool,
    /// Background refinement used by the volume-identity check.
    pub cn_refine: usize,
    /// Reference separation below which boundary pairs are not compared;
    /// `None` means four grid spacings.
    pub injectivity_delta: Option<f64>,
    /// Relative allowance in the per-step descent inequality.
    pub descent_slack: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            dt: 1e-2,
            t_end: 1e-1,
            kappa: None,
            grad_tol: 1e-8,
            max_iter: 3000,
            e_max: 1e6,
            inertia: false,
            seed: 0,
            history: 10,
            alternating: false,
            cn_refine: 2,
            injectivity_delta: None,
            descent_slack: 1e-10,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, sym: &str, why: &str| Err(Error::Config(format!("step.{key} ({sym}) {why}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "Δt", "must be positive");
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad("t_end", "T_end", "must be nonnegative");
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return bad("kappa", "κ", "must be positive");
            }
        }
        if !(self.grad_tol > 0.0) {
            return bad("grad_tol", "tol", "must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter", "max iterations", "must be positive");
        }
        if !(self.e_max > 0.0) {
            return bad("e_max", "E_max", "must be positive");
        }
        if self.history == 0 {
            return bad("history", "L-BFGS memory", "must be positive");
        }
        if self.cn_refine == 0 {
            return bad("cn_refine", "background refinement", "must be positive");
        }
        Ok(())
    }

    /// `ceil(T_end / dt)`, robust to roundoff in the quotient.
    pub fn num_steps(&self) -> usize {
        let x = self.t_end / self.dt;
        let r = x.round();
        if (x - r).abs() <= 1e-9 * r.max(1.0) {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(self.dt)
    }
}

/// Loads and initial state. The Dirichlet datum is the trace of `eta0`.
#[derive(Clone, Debug)]
pub struct DataProviders {
    pub force: DataField,
    pub hext: DataField,
    pub eta0: Field,
    pub m0: Field,
}

/// Data of step `k`: the mollified force frozen at the previous positions
/// and the interval-averaged external field.
#[derive(Clone, Debug)]
pub struct StepData<'a> {
    pub k: usize,
    pub dt: f64,
    /// `rho`-free nodal force `f_kappa(t_k, eta_{k-1}(X_n))`.
    pub force: Vec<f64>,
    pub hext: Option<&'a DataField>,
}

impl<'a> StepData<'a> {
    pub fn new(data: &'a DataProviders, mollifier: &Mollifier, k: usize, dt: f64, eta_prev: &[f64], d: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Range("steps start at k = 1".into()));
        }
        let n = eta_prev.len() / d;
        let mut force = vec![0.0; n * d];
        if !data.force.is_zero() {
            let t = (k as f64 * dt).min(mollifier.horizon);
            for i in 0..n {
                let (v, _) = mollifier.apply(&data.force, t, &eta_prev[i * d..(i + 1) * d], d)?;
                force[i * d..(i + 1) * d].copy_from_slice(&v[..d]);
            }
        }
        let hext = if data.hext.is_zero() { None } else { Some(&data.hext) };
        Ok(StepData { k, dt, force, hext })
    }
}

/// Parts of the incremental functional at a state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionalParts {
    pub energy: EnergyBreakdown,
    /// `dt * R`
    pub dissipation: f64,
    /// `int rho f . (eta - eta_prev)`
    pub force_work: f64,
    /// `int mu M~ . H_ext(eta)`
    pub hext_work: f64,
    pub kinetic: f64,
    pub total: f64,
}

/// `F_k(eta, M~)` with gradients, for fixed previous state and step data.
pub struct IncrementalFunctional<'a> {
    pub energy: &'a EnergyFunctional,
    diss: Dissipation,
    pub eta_prev: Vec<f64>,
    pub m_prev: Vec<f64>,
    v_prev: Option<Vec<f64>>,
    pub data: StepData<'a>,
    free: Vec<usize>,
}

/// Value, gradients and parts of the incremental functional.
#[derive(Clone, Debug)]
pub struct FunctionalEval {
    pub parts: FunctionalParts,
    /// Gradient at every deformation entry (Dirichlet rows included).
    pub grad_eta: Vec<f64>,
    pub grad_m: Vec<f64>,
}

/// Build `F_k` around the previous state. `v_prev` enables the kinetic term.
pub fn assemble_functional<'a>(
    energy: &'a EnergyFunctional,
    eta_prev: &[f64],
    m_prev: &[f64],
    v_prev: Option<&[f64]>,
    data: StepData<'a>,
) -> Result<IncrementalFunctional<'a>> {
    let grid = &energy.grid;
    let d = grid.dim();
    if eta_prev.len() != grid.len() * d || m_prev.len() != grid.len() * d {
        return Err(contract("previous state does not match the grid"));
    }
    let kin = energy.kinematics(eta_prev);
    if !kin.orientation_preserving() {
        return Err(contract(format!("previous deformation is not admissible (min det {:e})", kin.min_det)));
    }
    let diss = Dissipation::new(grid, &kin, energy.params().nu)?;
    let free = (0..grid.len()).filter(|&i| !grid.is_dirichlet(i)).flat_map(|i| (i * d)..(i * d + d)).collect();
    Ok(IncrementalFunctional {
        energy,
        diss,
        eta_prev: eta_prev.to_vec(),
        m_prev: m_prev.to_vec(),
        v_prev: v_prev.map(|v| v.to_vec()),
        data,
        free,
    })
}

impl<'a> IncrementalFunctional<'a> {
    pub fn dim(&self) -> usize {
        self.energy.grid.dim()
    }

    /// Indices of deformation entries that are optimized.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    pub fn evaluate(&self, eta: &[f64], m: &[f64], want_grad: bool) -> FunctionalEval {
        let d = self.dim();
        let p = self.energy.params();
        let w = &self.energy.weights;
        let dt = self.data.dt;
        let ev = self.energy.evaluate(eta, m, want_grad);
        let mut parts = FunctionalParts { energy: ev.breakdown, ..Default::default() };
        if ev.breakdown.infinite {
            parts.total = f64::INFINITY;
            return FunctionalEval { parts, grad_eta: vec![], grad_m: vec![] };
        }
        let de: Vec<f64> = eta.iter().zip(&self.eta_prev).map(|(a, b)| a - b).collect();
        let dm: Vec<f64> = m.iter().zip(&self.m_prev).map(|(a, b)| a - b).collect();
        parts.dissipation = self.diss.value(&de, &dm) / dt;
        let mut grad_eta = ev.grad_eta;
        let mut grad_m = ev.grad_m;
        if want_grad {
            for (g, v) in grad_eta.iter_mut().zip(self.diss.grad_eta(&de)) {
                *g += v / dt;
            }
            for (g, v) in grad_m.iter_mut().zip(self.diss.grad_m(&dm)) {
                *g += v / dt;
            }
        }
        for q in 0..de.len() {
            let c = w[q / d] * p.rho;
            parts.force_work += c * self.data.force[q] * de[q];
            if want_grad {
                grad_eta[q] -= c * self.data.force[q];
            }
        }
        if let Some(h) = self.data.hext {
            for i in 0..w.len() {
                let (v, jac) = clement_average(h, self.data.k, dt, &eta[i * d..(i + 1) * d], d).expect("k >= 1");
                let c = w[i] * p.mu;
                for r in 0..d {
                    parts.hext_work += c * m[i * d + r] * v[r];
                }
                if want_grad {
                    for r in 0..d {
                        grad_m[i * d + r] -= c * v[r];
                        for col in 0..d {
                            grad_eta[i * d + col] -= c * m[i * d + r] * jac[r * d + col];
                        }
                    }
                }
            }
        }
        if let Some(vp) = &self.v_prev {
            for q in 0..de.len() {
                let c = w[q / d] * p.rho;
                let r = de[q] / dt - vp[q];
                parts.kinetic += 0.5 * c * r * r;
                if want_grad {
                    grad_eta[q] += c * r / dt;
                }
            }
        }
        parts.total = parts.energy.total + parts.dissipation - parts.force_work - parts.hext_work + parts.kinetic;
        if !parts.total.is_finite() {
            parts.total = f64::INFINITY;
        }
        FunctionalEval { parts, grad_eta, grad_m }
    }

    /// `F_k` at the base point `(eta_prev, M~_prev)`.
    pub fn base_value(&self) -> FunctionalParts {
        self.evaluate(&self.eta_prev, &self.m_prev, false).parts
    }

    fn pack(&self, eta: &[f64], m: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = self.free.iter().map(|&q| eta[q]).collect();
        x.extend_from_slice(m);
        x
    }

    fn unpack(&self, x: &[f64], eta: &mut [f64], m: &mut [f64]) {
        for (v, &q) in x.iter().zip(&self.free) {
            eta[q] = *v;
        }
        m.copy_from_slice(&x[self.free.len()..]);
    }

    /// Diagonal scaling used as the initial inverse Hessian.
    fn preconditioner(&self, inertia: bool) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let p = self.energy.params();
        let dt = self.data.dt;
        let h = self.energy.grid.min_spacing();
        let w = &self.energy.weights;
        let lap = d as f64 / (2.0 * h * h);
        let mut se = (p.mu_e + p.a + 2.0 * p.nu / dt) * lap;
        if inertia {
            se += p.rho / (dt * dt);
        }
        let sm = 1.0 / dt + 2.0 * p.anisotropy + 2.0 / (p.beta * p.beta) + 2.0 * p.exchange * lap;
        let mut pre: Vec<f64> = self.free.iter().map(|&q| 1.0 / (w[q / d] * se)).collect();
        let mut norm: Vec<f64> = self.free.iter().map(|&q| 1.0 / w[q / d]).collect();
        for q in 0..self.m_prev.len() {
            pre.push(1.0 / (w[q / d] * sm));
            norm.push(1.0 / w[q / d]);
        }
        (pre, norm)
    }

    /// Dual norms `(deformation, magnetization)` of a gradient.
    pub fn residual_norms(&self, grad_eta: &[f64], grad_m: &[f64]) -> (f64, f64) {
        let d = self.dim();
        let w = &self.energy.weights;
        let re = self.free.iter().map(|&q| grad_eta[q] * grad_eta[q] / w[q / d]).sum::<f64>().sqrt();
        let rm = grad_m.iter().enumerate().map(|(q, g)| g * g / w[q / d]).sum::<f64>().sqrt();
        (re, rm)
    }
}

/// Outcome of one step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub eta: Vec<f64>,
    pub m: Vec<f64>,
    pub parts: FunctionalParts,
    pub status: StepStatus,
    pub diagnostics: StepDiagnostics,
}

fn solve_block(
    fun: &IncrementalFunctional<'_>,
    eta: &mut Vec<f64>,
    m: &mut Vec<f64>,
    which: Option<bool>,
    opts: &LbfgsOptions,
    inertia: bool,
) -> (bool, usize) {
    let nf = fun.free.len();
    let (pre_all, norm_all) = fun.preconditioner(inertia);
    let range = match which {
        None => 0..pre_all.len(),
        Some(true) => 0..nf,
        Some(false) => nf..pre_all.len(),
    };
    let x_all = fun.pack(eta, m);
    let base = x_all.clone();
    let r0 = range.clone();
    let mut scratch_e = eta.clone();
    let mut scratch_m = m.clone();
    let objective = |x: &[f64], want: bool| {
        let mut full = base.clone();
        full[r0.clone()].copy_from_slice(x);
        fun.unpack(&full, &mut scratch_e, &mut scratch_m);
        let ev = fun.evaluate(&scratch_e, &scratch_m, want);
        if !ev.parts.total.is_finite() {
            return (f64::INFINITY, vec![]);
        }
        let mut g: Vec<f64> = fun.free.iter().map(|&q| ev.grad_eta[q]).collect();
        g.extend_from_slice(&ev.grad_m);
        (ev.parts.total, g[r0.clone()].to_vec())
    };
    let res = lbfgs::minimize_scaled(x_all[range.clone()].to_vec(), objective, &pre_all[range.clone()], &norm_all[range.clone()], opts);
    let mut full = base;
    full[range].copy_from_slice(&res.x);
    fun.unpack(&full, eta, m);
    (res.converged, res.iterations)
}

/// Minimize `F_k` from `(eta_init, m_init)` and classify the result.
pub fn minimize_step(fun: &IncrementalFunctional<'_>, eta_init: &[f64], m_init: &[f64], config: &StepConfig) -> Result<StepResult> {
    let grid = &fun.energy.grid;
    let opts = LbfgsOptions {
        history: config.history,
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        max_first_step: 0.25 * grid.min_spacing(),
        ..Default::default()
    };
    let inertia = fun.v_prev.is_some();
    let mut eta = eta_init.to_vec();
    let mut m = m_init.to_vec();
    let (converged, iterations) = if config.alternating {
        let mut its = 0;
        let mut ok = false;
        for _ in 0..50 {
            its += solve_block(fun, &mut eta, &mut m, Some(true), &opts, inertia).1;
            its += solve_block(fun, &mut eta, &mut m, Some(false), &opts, inertia).1;
            let ev = fun.evaluate(&eta, &m, true);
            if ev.parts.total.is_finite() {
                let (a, b) = fun.residual_norms(&ev.grad_eta, &ev.grad_m);
                if (a * a + b * b).sqrt() <= config.grad_tol {
                    ok = true;
                    break;
                }
            }
            if its >= config.max_iter {
                break;
            }
        }
        (ok, its)
    } else {
        solve_block(fun, &mut eta, &mut m, None, &opts, inertia)
    };

    let base = fun.base_value();
    let ev = fun.evaluate(&eta, &m, true);
    let parts = ev.parts;
    let mut diag = StepDiagnostics {
        functional_prev: base.total,
        functional_min: parts.total,
        iterations,
        forcing_work: parts.force_work + parts.hext_work - base.hext_work + base.kinetic - parts.kinetic,
        ..Default::default()
    };
    let kin = fun.energy.kinematics(&eta);
    diag.min_det = kin.min_det;
    if parts.total.is_finite() {
        let (a, b) = fun.residual_norms(&ev.grad_eta, &ev.grad_m);
        diag.el_residual_deformation = a;
        diag.el_residual_magnetization = b;
    } else {
        diag.el_residual_deformation = f64::INFINITY;
        diag.el_residual_magnetization = f64::INFINITY;
    }
    let descent_ok = parts.total <= base.total + config.descent_slack * base.total.abs().max(parts.total.abs());
    let status = if !converged || !parts.total.is_finite() || !descent_ok {
        StepStatus::SolverFailure
    } else if parts.energy.total > config.e_max {
        StepStatus::EnergyBlowup
    } else {
        let ef = Field::from_data(grid, FieldRank::Vector, eta.clone())?;
        let cn = ciarlet_necas_residual(&ef, &kin, grid, config.cn_refine)?;
        diag.cn_residual = cn.residual;
        diag.cn_tolerance = cn.tolerance;
        let (margin, inj) = boundary_injectivity_margin(&ef, grid, config.injectivity_delta)?;
        diag.injectivity_margin = margin;
        if cn.ok && inj {
            StepStatus::Accepted
        } else {
            StepStatus::SelfContact
        }
    };
    Ok(StepResult { eta, m, parts, status, diagnostics: diag })
}

/// A finished run: accepted snapshots plus the reason it stopped.
#[derive(Clone, Debug)]
pub struct Run {
    pub trajectory: TrajectoryStore,
    /// `Accepted` when `T_end` was reached.
    pub termination: StepStatus,
    /// The rejected step, when the run stopped early.
    pub rejected: Option<(usize, Snapshot)>,
}

fn snapshot(grid: &GridSpec, t: f64, eta: Vec<f64>, m: Vec<f64>, energy: EnergyBreakdown, dissipation: f64, status: StepStatus, diagnostics: StepDiagnostics) -> Result<Snapshot> {
    Ok(Snapshot {
        time: t,
        deformation: Field::from_data(grid, FieldRank::Vector, eta)?.with_units("m"),
        magnetization: Field::from_data(grid, FieldRank::Vector, m)?.with_units("A/m"),
        energy,
        dissipation,
        status,
        diagnostics,
    })
}

/// Check the initial state and build the energy with its stray grid.
pub fn prepare(grid: &GridSpec, model: EnergyModel, data: &DataProviders, config: &StepConfig) -> Result<(EnergyFunctional, Snapshot)> {
    config.validate()?;
    model.params.validate()?;
    data.eta0.conforms(grid)?;
    data.m0.conforms(grid)?;
    if data.eta0.rank != FieldRank::Vector || data.m0.rank != FieldRank::Vector {
        return Err(contract("initial fields must be vector fields"));
    }
    let energy = EnergyFunctional::new(grid, model, &data.eta0.data)?;
    let kin = energy.kinematics(&data.eta0.data);
    if !kin.orientation_preserving() {
        return Err(Error::Admissibility(format!("initial deformation has min det {:e}", kin.min_det)));
    }
    let cn = ciarlet_necas_residual(&data.eta0, &kin, grid, config.cn_refine)?;
    if !cn.ok {
        return Err(Error::Admissibility(format!("initial deformation violates the volume identity: residual {:e} > {:e}", cn.residual, cn.tolerance)));
    }
    let (margin, inj) = boundary_injectivity_margin(&data.eta0, grid, config.injectivity_delta)?;
    if !inj {
        return Err(Error::Admissibility("initial deformation is not injective on the boundary".into()));
    }
    let br = energy.evaluate(&data.eta0.data, &data.m0.data, false).breakdown;
    if br.infinite {
        return Err(Error::Admissibility("initial energy is infinite".into()));
    }
    let diag = StepDiagnostics {
        min_det: kin.min_det,
        cn_residual: cn.residual,
        cn_tolerance: cn.tolerance,
        injectivity_margin: margin,
        functional_prev: br.total,
        functional_min: br.total,
        ..Default::default()
    };
    let snap = snapshot(grid, 0.0, data.eta0.data.clone(), data.m0.data.clone(), br, 0.0, StepStatus::Accepted, diag)?;
    Ok((energy, snap))
}

/// Time mollifier of a run: half-width `kappa`, horizon `max(N dt, 2 kappa)`.
pub fn mollifier_for(config: &StepConfig) -> Result<Mollifier> {
    let horizon = (config.num_steps() as f64 * config.dt).max(2.0 * config.kappa());
    Mollifier::new(config.kappa(), horizon)
}

/// Iterate [`minimize_step`] from `k = 1` until `T_end` or a non-accepted step.
pub fn run_evolution(grid: &GridSpec, model: EnergyModel, data: &DataProviders, config: &StepConfig) -> Result<Run> {
    run_evolution_with(grid, model, data, config, |_, _| {})
}

/// [`run_evolution`] with a callback after every step.
pub fn run_evolution_with(
    grid: &GridSpec,
    model: EnergyModel,
    data: &DataProviders,
    config: &StepConfig,
    mut on_step: impl FnMut(usize, &StepResult),
) -> Result<Run> {
    let (energy, snap0) = prepare(grid, model, data, config)?;
    let d = grid.dim();
    let dt = config.dt;
    let steps = config.num_steps();
    let mollifier = mollifier_for(config)?;
    let mut store = TrajectoryStore::new(grid.clone(), dt, snap0)?;
    let mut eta = data.eta0.data.clone();
    let mut m = data.m0.data.clone();
    let mut v = vec![0.0; eta.len()];
    for k in 1..=steps {
        let sd = StepData::new(data, &mollifier, k, dt, &eta, d)?;
        let fun = assemble_functional(&energy, &eta, &m, config.inertia.then_some(&v[..]), sd)?;
        let res = minimize_step(&fun, &eta, &m, config)?;
        on_step(k, &res);
        log::debug!("step {k}: {} after {} iterations, F = {:e}", res.status.as_str(), res.diagnostics.iterations, res.parts.total);
        let snap = snapshot(grid, k as f64 * dt, res.eta.clone(), res.m.clone(), res.parts.energy, res.parts.dissipation, res.status, res.diagnostics.clone())?;
        if res.status != StepStatus::Accepted {
            return Ok(Run { trajectory: store, termination: res.status, rejected: Some((k, snap)) });
        }
        for ((vi, a), b) in v.iter_mut().zip(&res.eta).zip(&eta) {
            *vi = (a - b) / dt;
        }
        eta = res.eta;
        m = res.m;
        store.push(snap)?;
    }
    Ok(Run { trajectory: store, termination: StepStatus::Accepted, rejected: None })
}
