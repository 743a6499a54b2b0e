//! Time-indexed storage of a minimizing-movement run and its interpolants.

use serde::{Deserialize, Serialize};

use crate::energy::EnergyBreakdown;
use crate::error::{contract, Error, Result};
use crate::grid::{Field, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    Accepted,
    SelfContact,
    EnergyBlowup,
    SolverFailure,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Accepted => "accepted",
            StepStatus::SelfContact => "self-contact",
            StepStatus::EnergyBlowup => "energy-blowup",
            StepStatus::SolverFailure => "solver-failure",
        }
    }
}

/// Per-step solver and admissibility record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Incremental functional at the base point and at the returned state.
    pub functional_prev: f64,
    pub functional_min: f64,
    /// Dual norms of the functional's gradient blocks at the returned state.
    pub el_residual_deformation: f64,
    pub el_residual_magnetization: f64,
    pub iterations: usize,
    pub min_det: f64,
    pub cn_residual: f64,
    pub cn_tolerance: f64,
    pub injectivity_margin: f64,
    /// Work of body force and external field over the step; the descent
    /// inequality reads `E_k + dt R_k <= E_{k-1} + forcing_work`.
    pub forcing_work: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub deformation: Field,
    pub magnetization: Field,
    pub energy: EnergyBreakdown,
    /// `dt * R` for the step that produced this snapshot (0 for k = 0).
    pub dissipation: f64,
    pub status: StepStatus,
    pub diagnostics: StepDiagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolantMode {
    Affine,
    ConstantRight,
    ConstantLeft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStore {
    pub grid: GridSpec,
    pub dt: f64,
    pub snapshots: Vec<Snapshot>,
}

impl TrajectoryStore {
    pub fn new(grid: GridSpec, dt: f64, initial: Snapshot) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        if initial.time != 0.0 {
            return Err(contract("snapshot 0 must sit at t = 0"));
        }
        Ok(TrajectoryStore { grid, dt, snapshots: vec![initial] })
    }

    pub fn push(&mut self, snap: Snapshot) -> Result<()> {
        let k = self.snapshots.len();
        let expect = k as f64 * self.dt;
        if (snap.time - expect).abs() > 1e-9 * self.dt.max(expect) {
            return Err(contract(format!("snapshot {k} at t = {} but expected {expect}", snap.time)));
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("store always holds snapshot 0")
    }

    pub fn last_time(&self) -> f64 {
        (self.snapshots.len() - 1) as f64 * self.dt
    }

    /// Evaluate the interpolant of `(eta, M)` at time `t`.
    pub fn eval(&self, t: f64, mode: InterpolantMode) -> Result<(Field, Field)> {
        interpolant_eval(self, t, mode)
    }
}

/// Piecewise affine / piecewise constant interpolants of the stored states.
///
/// For `t` in `((k-1) dt, k dt]`: affine mode blends snapshots `k-1` and `k`,
/// constant-right returns snapshot `k`, constant-left returns `k-1`. At
/// `t = 0` every mode returns snapshot 0.
pub fn interpolant_eval(store: &TrajectoryStore, t: f64, mode: InterpolantMode) -> Result<(Field, Field)> {
    let tmax = store.last_time();
    let slack = 1e-12 * store.dt;
    if !(t >= -slack && t <= tmax + slack) {
        return Err(Error::Range(format!("t = {t} outside [0, {tmax}]")));
    }
    let s = &store.snapshots;
    if t <= slack {
        return Ok((s[0].deformation.clone(), s[0].magnetization.clone()));
    }
    let x = t / store.dt;
    let mut k = x.ceil() as usize;
    // snap t within roundoff of a node onto that node
    if (x - x.round()).abs() <= 1e-12 * x.max(1.0) {
        k = x.round() as usize;
    }
    let k = k.clamp(1, s.len() - 1);
    match mode {
        InterpolantMode::ConstantRight => Ok((s[k].deformation.clone(), s[k].magnetization.clone())),
        InterpolantMode::ConstantLeft => Ok((s[k - 1].deformation.clone(), s[k - 1].magnetization.clone())),
        InterpolantMode::Affine => {
            let lam = ((t - (k - 1) as f64 * store.dt) / store.dt).clamp(0.0, 1.0);
            Ok((
                blend(&s[k - 1].deformation, &s[k].deformation, lam),
                blend(&s[k - 1].magnetization, &s[k].magnetization, lam),
            ))
        }
    }
}

fn blend(a: &Field, b: &Field, lam: f64) -> Field {
    let mut out = a.clone();
    if lam == 1.0 {
        out.data.clone_from(&b.data);
        return out;
    }
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        // exact where x == y
        *o = x + lam * (y - x);
    }
    out
}
