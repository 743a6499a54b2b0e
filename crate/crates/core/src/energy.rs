//! Stored energy of a magnetoelastic state and its first variations.
//!
//! Lagrangian energy, integrated with trapezoidal weights over the reference
//! grid:
//!
//! ```text
//! E~ = int W(F) + det(F)^-a + |hess eta|^q / q
//!        + Psi(F, M~) + A |grad(M~/J) F^-1|^2 J + (|M~/J|^2 - 1)^2 J / (4 beta^2) dX
//!      - mu/2 sum_n m_n . H(eta(X_n))                  (m_n = w_n M~_n)
//! ```
//!
//! The gradient is assembled node by node into a first Piola stress `P`
//! (paired with `grad eta`), a hyperstress (paired with `hess eta`) and a
//! magnetization force, then mapped to nodal vectors with the adjoint
//! difference operators, so it is the exact derivative of the discrete energy.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::grid::{DiffOps, Field, FieldRank, GridSpec};
use crate::kinematics::{kinematics_from_gradient, EulerianMap, KinematicState};
use crate::linalg;
use crate::strayfield::{PaddedGrid, StrayOperator};

/// Individually switchable energy contributions. All are on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyTerms {
    pub det_penalty: bool,
    pub hessian: bool,
    pub anisotropy: bool,
    pub stray: bool,
    pub exchange: bool,
    pub saturation: bool,
}

impl Default for EnergyTerms {
    fn default() -> Self {
        EnergyTerms { det_penalty: true, hessian: true, anisotropy: true, stray: true, exchange: true, saturation: true }
    }
}

impl EnergyTerms {
    /// Only the stored elastic density `W` (quadratic test problems).
    pub fn elastic_only() -> Self {
        EnergyTerms { det_penalty: false, hessian: false, anisotropy: false, stray: false, exchange: false, saturation: false }
    }
}

/// Model constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    /// Determinant penalty exponent `a`.
    pub a: f64,
    /// Hessian regularization exponent `q`.
    pub q: f64,
    /// Exchange stiffness `A`.
    pub exchange: f64,
    /// Saturation penalty scale `beta`.
    pub beta: f64,
    /// Viscosity `nu`.
    pub nu: f64,
    /// Permeability `mu`.
    pub mu: f64,
    /// Density `rho`.
    pub rho: f64,
    /// Coefficient of the default stored energy `W = mu_e/2 |F|^2`.
    pub mu_e: f64,
    /// Anisotropy coefficient `K` of `Psi = K |M~ - F a_hat|^2`.
    pub anisotropy: f64,
    pub easy_axis: [f64; 3],
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    /// Master switch for the stray field.
    pub stray: bool,
    pub c_det: f64,
    /// Accept `q`/`a` outside the admissible range (with a warning).
    pub override_constraints: bool,
    pub terms: EnergyTerms,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            a: 13.0,
            q: 4.0,
            exchange: 1e-2,
            beta: 0.5,
            nu: 1.0,
            mu: 1.0,
            rho: 1.0,
            // equal to `a`, so the identity is stress free
            mu_e: 13.0,
            anisotropy: 0.5,
            easy_axis: [0.0, 0.0, 1.0],
            p1: 2.0,
            p2: 2.0,
            p3: 2.0,
            p4: 1.0,
            stray: true,
            c_det: crate::kinematics::DEFAULT_DET_FLOOR,
            override_constraints: false,
            terms: EnergyTerms::default(),
        }
    }
}

impl MaterialParams {
    /// Check all invariants; returns warnings for overridden constraints.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let pos = [
            ("exchange", "A", self.exchange),
            ("beta", "beta", self.beta),
            ("nu", "nu", self.nu),
            ("mu", "mu", self.mu),
            ("rho", "rho", self.rho),
            ("mu_e", "mu_e", self.mu_e),
        ];
        for (key, sym, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("material.{key} ({sym}) must be positive, got {v}")));
            }
        }
        if !(self.anisotropy >= 0.0) {
            return Err(Error::Config(format!("material.anisotropy (K) must be >= 0, got {}", self.anisotropy)));
        }
        if !(self.c_det > 0.0) {
            return Err(Error::Config("material.c_det (det floor) must be positive".into()));
        }
        let na = linalg::norm_sq(&self.easy_axis).sqrt();
        if (na - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("material.easy_axis (a_hat) must be a unit vector, |a_hat| = {na}")));
        }
        if !(self.p1 >= 2.0) {
            return Err(Error::Config(format!("material.p1 (p1) must be >= 2, got {}", self.p1)));
        }
        if !(self.p3 < 6.0) {
            return Err(Error::Config(format!("material.p3 (p3) must be < 6, got {}", self.p3)));
        }
        if !(self.p4 < 5.0) {
            return Err(Error::Config(format!("material.p4 (p4) must be < 5, got {}", self.p4)));
        }
        if !(self.q > 0.0) || !(self.a > 0.0) {
            return Err(Error::Config("material.q (q) and material.a (a) must be positive".into()));
        }
        let mut violations = Vec::new();
        if !(self.q > 3.0) {
            violations.push(format!("material.q (q) = {} must exceed 3", self.q));
        } else {
            let amin = 3.0 * self.q / (self.q - 3.0);
            if !(self.a > amin) {
                violations.push(format!("material.a (a) = {} must exceed 3q/(q-3) = {amin}", self.a));
            }
        }
        if !violations.is_empty() {
            if self.override_constraints {
                for v in violations {
                    warnings.push(format!(
                        "{v}; overridden: the existence theorem's regularity hypothesis on (a, q) does not hold"
                    ));
                }
            } else {
                return Err(Error::Config(format!(
                    "{}; set material.override_constraints to proceed anyway",
                    violations.join("; ")
                )));
            }
        }
        Ok(warnings)
    }

    /// Stray term enabled by both switches.
    pub fn stray_on(&self) -> bool {
        self.stray && self.terms.stray
    }
}

/// Stored elastic energy density `W(F)`.
pub trait StoredEnergy: Send + Sync {
    fn value(&self, f: &[f64], d: usize) -> f64;
    /// `out = dW/dF`
    fn derivative(&self, f: &[f64], d: usize, out: &mut [f64]);
}

/// Anisotropy density `Psi(F, M~)`.
pub trait AnisotropyEnergy: Send + Sync {
    fn value(&self, f: &[f64], m: &[f64], d: usize) -> f64;
    /// `(dPsi/dF, dPsi/dM~)`
    fn derivative(&self, f: &[f64], m: &[f64], d: usize, d_f: &mut [f64], d_m: &mut [f64]);
}

/// `W(F) = mu_e/2 |F|^2`
#[derive(Clone, Debug)]
pub struct QuadraticStoredEnergy {
    pub mu_e: f64,
}

impl StoredEnergy for QuadraticStoredEnergy {
    fn value(&self, f: &[f64], _d: usize) -> f64 {
        0.5 * self.mu_e * linalg::norm_sq(f)
    }
    fn derivative(&self, f: &[f64], _d: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(f) {
            *o = self.mu_e * v;
        }
    }
}

/// `Psi(F, M~) = K |M~ - F a_hat|^2`
#[derive(Clone, Debug)]
pub struct EasyAxisAnisotropy {
    pub k: f64,
    pub axis: [f64; 3],
}

impl EasyAxisAnisotropy {
    fn residual(&self, f: &[f64], m: &[f64], d: usize) -> [f64; 3] {
        let mut fa = [0.0; 3];
        linalg::matvec(f, &self.axis[..d], d, &mut fa[..d]);
        let mut r = [0.0; 3];
        for c in 0..d {
            r[c] = m[c] - fa[c];
        }
        r
    }
}

impl AnisotropyEnergy for EasyAxisAnisotropy {
    fn value(&self, f: &[f64], m: &[f64], d: usize) -> f64 {
        self.k * linalg::norm_sq(&self.residual(f, m, d)[..d])
    }
    fn derivative(&self, f: &[f64], m: &[f64], d: usize, d_f: &mut [f64], d_m: &mut [f64]) {
        let r = self.residual(f, m, d);
        for c in 0..d {
            d_m[c] = 2.0 * self.k * r[c];
            for k in 0..d {
                d_f[c * d + k] = -2.0 * self.k * r[c] * self.axis[k];
            }
        }
    }
}

/// Parameters plus the pluggable densities.
#[derive(Clone)]
pub struct EnergyModel {
    pub params: MaterialParams,
    pub stored: Arc<dyn StoredEnergy>,
    pub anisotropy: Arc<dyn AnisotropyEnergy>,
}

impl std::fmt::Debug for EnergyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnergyModel").field("params", &self.params).finish_non_exhaustive()
    }
}

impl EnergyModel {
    /// Default densities for the given parameters.
    pub fn new(params: MaterialParams) -> Self {
        let stored = Arc::new(QuadraticStoredEnergy { mu_e: params.mu_e });
        let anisotropy = Arc::new(EasyAxisAnisotropy { k: params.anisotropy, axis: params.easy_axis });
        EnergyModel { params, stored, anisotropy }
    }
}

/// Term-by-term energy values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub elastic_w: f64,
    pub det_penalty: f64,
    pub hessian: f64,
    pub anisotropy: f64,
    pub stray: f64,
    pub exchange: f64,
    pub saturation: f64,
    pub total: f64,
    /// Set when the state is outside the energy's domain (total = +inf).
    pub infinite: bool,
}

impl EnergyBreakdown {
    pub fn infinite() -> Self {
        EnergyBreakdown { total: f64::INFINITY, infinite: true, ..Default::default() }
    }

    pub fn elastic(&self) -> f64 {
        self.elastic_w + self.det_penalty + self.hessian
    }

    pub fn magnetic(&self) -> f64 {
        self.anisotropy + self.stray + self.exchange + self.saturation
    }

    fn finish(&mut self) {
        self.total = self.elastic_w
            + self.det_penalty
            + self.hessian
            + self.anisotropy
            + self.stray
            + self.exchange
            + self.saturation;
    }

    /// Names and values in column order.
    pub fn parts(&self) -> [(&'static str, f64); 8] {
        [
            ("w", self.elastic_w),
            ("det_penalty", self.det_penalty),
            ("hessian", self.hessian),
            ("anisotropy", self.anisotropy),
            ("stray", self.stray),
            ("exchange", self.exchange),
            ("saturation", self.saturation),
            ("total", self.total),
        ]
    }
}

/// Energy value with optional gradients.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: EnergyBreakdown,
    /// dE/d eta at every node (Dirichlet rows included).
    pub grad_eta: Vec<f64>,
    /// dE/d M~ at every node.
    pub grad_m: Vec<f64>,
}

impl Evaluation {
    fn infinite() -> Self {
        Evaluation { breakdown: EnergyBreakdown::infinite(), grad_eta: Vec::new(), grad_m: Vec::new() }
    }
}

#[derive(Clone, Copy)]
struct NodeOut {
    e: [f64; 7],
    p: [f64; 9],
    tg: [f64; 27],
    gq: [f64; 9],
    dj: f64,
    gm: [f64; 3],
}

impl Default for NodeOut {
    fn default() -> Self {
        NodeOut { e: [0.0; 7], p: [0.0; 9], tg: [0.0; 27], gq: [0.0; 9], dj: 0.0, gm: [0.0; 3] }
    }
}

/// Discrete energy on a fixed reference grid with a fixed stray-field grid.
#[derive(Clone)]
pub struct EnergyFunctional {
    pub grid: GridSpec,
    pub ops: DiffOps,
    pub weights: Vec<f64>,
    pub model: EnergyModel,
    pub stray: Option<StrayOperator>,
}

impl std::fmt::Debug for EnergyFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnergyFunctional").field("grid", &self.grid).field("model", &self.model).finish_non_exhaustive()
    }
}

/// Default stray-grid slack around the initial body, as a fraction of its extent.
pub const STRAY_SLACK: f64 = 0.5;
/// Default padding factor of the stray-field grid.
pub const STRAY_PADDING: f64 = 2.0;

impl EnergyFunctional {
    /// Build with a stray-field grid around the deformed positions `eta`.
    pub fn new(grid: &GridSpec, model: EnergyModel, eta: &[f64]) -> Result<Self> {
        let pg = if model.params.stray_on() {
            Some(PaddedGrid::for_points(grid.dim(), eta, grid.min_spacing(), STRAY_SLACK, STRAY_PADDING)?)
        } else {
            None
        };
        Self::with_stray_grid(grid, model, pg)
    }

    pub fn with_stray_grid(grid: &GridSpec, model: EnergyModel, pg: Option<PaddedGrid>) -> Result<Self> {
        let ops = DiffOps::new(grid)?;
        let stray = if model.params.stray_on() {
            let pg = pg.ok_or_else(|| Error::Config("stray field enabled but no stray grid given".into()))?;
            if pg.dim != grid.dim() {
                return Err(contract("stray grid dimension mismatch"));
            }
            Some(StrayOperator::new(pg))
        } else {
            None
        };
        Ok(EnergyFunctional { grid: grid.clone(), ops, weights: grid.quadrature_weights(), model, stray })
    }

    pub fn params(&self) -> &MaterialParams {
        &self.model.params
    }

    pub fn kinematics(&self, eta: &[f64]) -> KinematicState {
        kinematics_from_gradient(self.ops.gradient(eta, self.grid.dim()), self.grid.dim())
    }

    /// Energy (and gradients if `want_grad`). States with a non-positive
    /// nodal Jacobian, or nodes leaving the stray grid, give +inf.
    pub fn evaluate(&self, eta: &[f64], m: &[f64], want_grad: bool) -> Evaluation {
        let d = self.grid.dim();
        let n = self.grid.len();
        assert_eq!(eta.len(), n * d, "deformation length");
        assert_eq!(m.len(), n * d, "magnetization length");
        let p = &self.model.params;
        let t = p.terms;
        let f = self.ops.gradient(eta, d);
        let kin = kinematics_from_gradient(f, d);
        if !(kin.min_det > 0.0) || !kin.min_det.is_finite() {
            return Evaluation::infinite();
        }
        let hess = if t.hessian { self.ops.hessian(eta, d) } else { Vec::new() };
        let u: Vec<f64> = (0..n * d).map(|q| m[q] / kin.det[q / d]).collect();
        let qgrad = if t.exchange { self.ops.gradient(&u, d) } else { Vec::new() };
        let stray = match &self.stray {
            Some(op) => {
                let moments: Vec<f64> = (0..n * d).map(|q| self.weights[q / d] * m[q]).collect();
                match op.evaluate(eta, &moments, p.mu, want_grad) {
                    Some(s) => Some((s, moments)),
                    None => return Evaluation::infinite(),
                }
            }
            None => None,
        };
        let dd = d * d;
        let ddd = dd * d;
        let w_model = &*self.model.stored;
        let psi_model = &*self.model.anisotropy;
        let outs: Vec<NodeOut> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut o = NodeOut::default();
                let w = self.weights[i];
                let fi = &kin.f[i * dd..(i + 1) * dd];
                let ji = kin.det[i];
                let finv = &kin.inv[i * dd..(i + 1) * dd];
                let mi = &m[i * d..(i + 1) * d];
                let ui = &u[i * d..(i + 1) * d];
                o.e[0] = w * w_model.value(fi, d);
                if want_grad {
                    w_model.derivative(fi, d, &mut o.p[..dd]);
                    for v in o.p[..dd].iter_mut() {
                        *v *= w;
                    }
                }
                if t.det_penalty {
                    let ja = ji.powf(-p.a);
                    o.e[1] = w * ja;
                    o.dj += -p.a * w * ja / ji;
                }
                if t.hessian {
                    let ti = &hess[i * ddd..(i + 1) * ddd];
                    let n2 = linalg::norm_sq(ti);
                    if n2 > 0.0 {
                        let nt = n2.sqrt();
                        o.e[2] = w * nt.powf(p.q) / p.q;
                        if want_grad {
                            let s = w * nt.powf(p.q - 2.0);
                            for (g, v) in o.tg[..ddd].iter_mut().zip(ti) {
                                *g = s * v;
                            }
                        }
                    }
                }
                if t.anisotropy {
                    o.e[3] = w * psi_model.value(fi, mi, d);
                    if want_grad {
                        let mut df = [0.0; 9];
                        let mut dm = [0.0; 3];
                        psi_model.derivative(fi, mi, d, &mut df[..dd], &mut dm[..d]);
                        for q in 0..dd {
                            o.p[q] += w * df[q];
                        }
                        for c in 0..d {
                            o.gm[c] += w * dm[c];
                        }
                    }
                }
                if let Some((s, _)) = &stray {
                    let hi = &s.h_at[i * d..(i + 1) * d];
                    if want_grad {
                        for c in 0..d {
                            o.gm[c] += -p.mu * w * hi[c];
                        }
                    }
                }
                if t.exchange {
                    let qi = &qgrad[i * dd..(i + 1) * dd];
                    let mut b = [0.0; 9];
                    linalg::matmul(qi, finv, d, &mut b[..dd]);
                    let b2 = linalg::norm_sq(&b[..dd]);
                    o.e[5] = w * p.exchange * b2 * ji;
                    if want_grad {
                        let c = 2.0 * w * p.exchange * ji;
                        // dE/dQ = c B F^-T
                        let mut bft = [0.0; 9];
                        linalg::matmul_nt(&b[..dd], finv, d, &mut bft[..dd]);
                        for q in 0..dd {
                            o.gq[q] = c * bft[q];
                        }
                        // dE/dF = -c B^T B F^-T
                        let mut btb = [0.0; 9];
                        linalg::matmul_tn(&b[..dd], &b[..dd], d, &mut btb[..dd]);
                        let mut x = [0.0; 9];
                        linalg::matmul_nt(&btb[..dd], finv, d, &mut x[..dd]);
                        for q in 0..dd {
                            o.p[q] -= c * x[q];
                        }
                        o.dj += w * p.exchange * b2;
                    }
                }
                if t.saturation {
                    let u2 = linalg::norm_sq(ui);
                    let phi = u2 - 1.0;
                    let inv4b2 = 1.0 / (4.0 * p.beta * p.beta);
                    o.e[6] = w * phi * phi * ji * inv4b2;
                    if want_grad {
                        o.dj += w * (phi * phi - 4.0 * phi * u2) * inv4b2;
                        for c in 0..d {
                            o.gm[c] += w * phi * ui[c] / (p.beta * p.beta);
                        }
                    }
                }
                o
            })
            .collect();

        let mut br = EnergyBreakdown::default();
        for o in &outs {
            br.elastic_w += o.e[0];
            br.det_penalty += o.e[1];
            br.hessian += o.e[2];
            br.anisotropy += o.e[3];
            br.exchange += o.e[5];
            br.saturation += o.e[6];
        }
        if let Some((s, _)) = &stray {
            br.stray = s.energy;
        }
        br.finish();
        if !br.total.is_finite() {
            return Evaluation::infinite();
        }
        if !want_grad {
            return Evaluation { breakdown: br, grad_eta: Vec::new(), grad_m: Vec::new() };
        }

        // exchange: pull dE/dQ back to u, then to M~ and J
        let gu = if t.exchange {
            let gq: Vec<f64> = outs.iter().flat_map(|o| o.gq[..dd].iter().copied()).collect();
            self.ops.gradient_t(&gq, d)
        } else {
            Vec::new()
        };
        let mut pfield = vec![0.0; n * dd];
        let mut grad_m = vec![0.0; n * d];
        pfield
            .par_chunks_mut(dd)
            .zip(grad_m.par_chunks_mut(d))
            .enumerate()
            .for_each(|(i, (pi, gmi))| {
                let o = &outs[i];
                let ji = kin.det[i];
                let mut dj = o.dj;
                gmi.copy_from_slice(&o.gm[..d]);
                if t.exchange {
                    let g = &gu[i * d..(i + 1) * d];
                    let mut gdotm = 0.0;
                    for c in 0..d {
                        gmi[c] += g[c] / ji;
                        gdotm += g[c] * m[i * d + c];
                    }
                    dj -= gdotm / (ji * ji);
                }
                let cof = &kin.cof[i * dd..(i + 1) * dd];
                for q in 0..dd {
                    pi[q] = o.p[q] + dj * cof[q];
                }
            });
        let mut grad_eta = self.ops.gradient_t(&pfield, d);
        if t.hessian {
            let tg: Vec<f64> = outs.iter().flat_map(|o| o.tg[..ddd].iter().copied()).collect();
            let ht = self.ops.hessian_t(&tg, d);
            for (g, v) in grad_eta.iter_mut().zip(&ht) {
                *g += v;
            }
        }
        if let Some((s, _)) = &stray {
            for (g, v) in grad_eta.iter_mut().zip(&s.grad_h_t_m) {
                *g += -p.mu * v;
            }
        }
        Evaluation { breakdown: br, grad_eta, grad_m }
    }

    /// Stray field `H(eta(X_n))` gathered at the nodes (zero if disabled).
    pub fn stray_at_nodes(&self, eta: &[f64], m: &[f64]) -> Option<Vec<f64>> {
        let d = self.grid.dim();
        match &self.stray {
            Some(op) => {
                let moments: Vec<f64> = (0..m.len()).map(|q| self.weights[q / d] * m[q]).collect();
                op.evaluate(eta, &moments, self.model.params.mu, false).map(|s| s.h_at)
            }
            None => Some(vec![0.0; m.len()]),
        }
    }

    /// Eulerian form of the energy evaluated by quadrature on the background
    /// grid of `map`. Reference nodal quantities are carried to each
    /// quadrature point by the inverse map; the stray part is the field
    /// energy on the padded grid.
    pub fn eulerian(&self, eta: &[f64], m: &[f64], map: &EulerianMap) -> EnergyBreakdown {
        let d = self.grid.dim();
        let n = self.grid.len();
        let p = &self.model.params;
        let t = p.terms;
        let kin = self.kinematics(eta);
        if !(kin.min_det > 0.0) {
            return EnergyBreakdown::infinite();
        }
        let dd = d * d;
        let ddd = dd * d;
        let hess = if t.hessian { self.ops.hessian(eta, d) } else { vec![0.0; n * ddd] };
        let u: Vec<f64> = (0..n * d).map(|q| m[q] / kin.det[q / d]).collect();
        let qgrad = self.ops.gradient(&u, d);
        let w_model = &*self.model.stored;
        let psi_model = &*self.model.anisotropy;
        let parts: Vec<[f64; 7]> = map
            .quadrature
            .par_iter()
            .map(|(_, w, loc)| {
                let geo = &map.geometry;
                let mut f = [0.0; 9];
                geo.interpolate(loc, &kin.f, dd, &mut f[..dd]);
                let j = linalg::det(&f[..dd], d);
                let mut e = [0.0; 7];
                if !(j > 0.0) {
                    e[0] = f64::INFINITY;
                    return e;
                }
                let mut finv = [0.0; 9];
                linalg::inverse(&f[..dd], d, &mut finv[..dd]);
                let mut mm = [0.0; 3];
                geo.interpolate(loc, &u, d, &mut mm[..d]);
                e[0] = w * w_model.value(&f[..dd], d) / j;
                if t.det_penalty {
                    e[1] = w * j.powf(-p.a) / j;
                }
                if t.hessian {
                    let mut tt = [0.0; 27];
                    geo.interpolate(loc, &hess, ddd, &mut tt[..ddd]);
                    let nt = linalg::norm_sq(&tt[..ddd]).sqrt();
                    e[2] = w * nt.powf(p.q) / p.q / j;
                }
                if t.anisotropy {
                    let mut ml = [0.0; 3];
                    for c in 0..d {
                        ml[c] = j * mm[c];
                    }
                    e[3] = w * psi_model.value(&f[..dd], &ml[..d], d) / j;
                }
                if t.exchange {
                    let mut q = [0.0; 9];
                    geo.interpolate(loc, &qgrad, dd, &mut q[..dd]);
                    let mut gx = [0.0; 9];
                    linalg::matmul(&q[..dd], &finv[..dd], d, &mut gx[..dd]);
                    e[5] = w * p.exchange * linalg::norm_sq(&gx[..dd]);
                }
                if t.saturation {
                    let phi = linalg::norm_sq(&mm[..d]) - 1.0;
                    e[6] = w * phi * phi / (4.0 * p.beta * p.beta);
                }
                e
            })
            .collect();
        let mut br = EnergyBreakdown::default();
        for e in &parts {
            br.elastic_w += e[0];
            br.det_penalty += e[1];
            br.hessian += e[2];
            br.anisotropy += e[3];
            br.exchange += e[5];
            br.saturation += e[6];
        }
        if let Some(op) = &self.stray {
            let moments: Vec<f64> = (0..n * d).map(|q| self.weights[q / d] * m[q]).collect();
            match op.evaluate(eta, &moments, p.mu, false) {
                Some(s) => br.stray = s.energy,
                None => return EnergyBreakdown::infinite(),
            }
        }
        br.finish();
        if !br.total.is_finite() {
            return EnergyBreakdown::infinite();
        }
        br
    }
}

fn functional_for(eta: &Field, grid: &GridSpec, model: &EnergyModel) -> Result<EnergyFunctional> {
    eta.conforms(grid)?;
    EnergyFunctional::new(grid, model.clone(), &eta.data)
}

/// `int W(F) + det(F)^-a + |hess eta|^q / q dX` (respecting term toggles).
pub fn elastic_energy(eta: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<EnergyBreakdown> {
    let mut p = params.clone();
    p.terms.anisotropy = false;
    p.terms.exchange = false;
    p.terms.saturation = false;
    p.terms.stray = false;
    let model = EnergyModel::new(p);
    let fun = functional_for(eta, grid, &model)?;
    let zeros = vec![0.0; eta.data.len()];
    Ok(fun.evaluate(&eta.data, &zeros, false).breakdown)
}

/// Magnetic part of the energy (anisotropy, stray, exchange, saturation).
pub fn magnetic_energy(eta: &Field, mtilde: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<EnergyBreakdown> {
    mtilde.conforms(grid)?;
    let mut p = params.clone();
    p.terms.det_penalty = false;
    p.terms.hessian = false;
    let model = EnergyModel::new(p);
    let fun = functional_for(eta, grid, &model)?;
    let mut br = fun.evaluate(&eta.data, &mtilde.data, false).breakdown;
    if !br.infinite {
        br.elastic_w = 0.0;
        br.finish();
    }
    Ok(br)
}

/// Full energy breakdown with the default densities.
pub fn total_energy(eta: &Field, mtilde: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<EnergyBreakdown> {
    total_energy_with(eta, mtilde, grid, &EnergyModel::new(params.clone()))
}

pub fn total_energy_with(eta: &Field, mtilde: &Field, grid: &GridSpec, model: &EnergyModel) -> Result<EnergyBreakdown> {
    mtilde.conforms(grid)?;
    let fun = functional_for(eta, grid, model)?;
    Ok(fun.evaluate(&eta.data, &mtilde.data, false).breakdown)
}

/// Eulerian energy on a background grid aligned with the reference lattice.
pub fn eulerian_energy(eta: &Field, mtilde: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<EnergyBreakdown> {
    mtilde.conforms(grid)?;
    let fun = functional_for(eta, grid, &EnergyModel::new(params.clone()))?;
    let kin = fun.kinematics(&eta.data);
    if !kin.orientation_preserving() {
        return Ok(EnergyBreakdown::infinite());
    }
    let map = EulerianMap::new(grid, eta, &kin, 1)?;
    Ok(fun.eulerian(&eta.data, &mtilde.data, &map))
}

/// dE/d eta at free nodes (rows of Dirichlet nodes are zero).
pub fn grad_energy_deformation(eta: &Field, mtilde: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<Field> {
    let fun = functional_for(eta, grid, &EnergyModel::new(params.clone()))?;
    let ev = fun.evaluate(&eta.data, &mtilde.data, true);
    if ev.breakdown.infinite {
        return Err(Error::InfiniteEnergy { min_det: fun.kinematics(&eta.data).min_det });
    }
    let d = grid.dim();
    let mut g = ev.grad_eta;
    for i in 0..grid.len() {
        if grid.is_dirichlet(i) {
            g[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Field::from_data(grid, FieldRank::Vector, g)
}

/// dE/d M~ at every node.
pub fn grad_energy_magnetization(eta: &Field, mtilde: &Field, grid: &GridSpec, params: &MaterialParams) -> Result<Field> {
    let fun = functional_for(eta, grid, &EnergyModel::new(params.clone()))?;
    let ev = fun.evaluate(&eta.data, &mtilde.data, true);
    if ev.breakdown.infinite {
        return Err(Error::InfiniteEnergy { min_det: fun.kinematics(&eta.data).min_det });
    }
    Field::from_data(grid, FieldRank::Vector, ev.grad_m)
}

/// Constants in the growth inequalities checked by [`growth_audit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    /// `W(F) >= lower (|F|^p1 - 1)`
    pub lower: f64,
    /// Upper bounds `|W| + |W'| <= upper (1 + |F|^p2)` and the anisotropy analogues.
    pub upper: f64,
}

impl GrowthConstants {
    /// Constants valid for the default densities with the given parameters.
    pub fn for_defaults(params: &MaterialParams) -> Self {
        GrowthConstants { lower: 0.5 * params.mu_e, upper: params.mu_e.max(3.0 * params.anisotropy).max(1e-300) }
    }
}

/// Worst observed ratio `lhs / rhs` per inequality; all must be <= 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub samples: usize,
    pub coercivity: f64,
    pub w_upper: f64,
    pub psi_upper: f64,
    pub psi_m_upper: f64,
    /// Most negative density value seen (should be >= 0).
    pub min_density: f64,
    pub pass: bool,
}

/// Sample `(F, M~)` over many orders of magnitude and check the growth
/// inequalities of `W` and `Psi`. Fails with a witness if one is violated.
pub fn growth_audit(model: &EnergyModel, dim: usize, constants: GrowthConstants, samples: usize, seed: u64) -> Result<GrowthReport> {
    let p = &model.params;
    let d = dim;
    let dd = d * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GrowthReport {
        samples,
        coercivity: 0.0,
        w_upper: 0.0,
        psi_upper: 0.0,
        psi_m_upper: 0.0,
        min_density: f64::INFINITY,
        pass: true,
    };
    let mut witness: Option<String> = None;
    for s in 0..samples {
        let sf = 10f64.powf(rng.gen_range(-3.0..6.0));
        let sm = 10f64.powf(rng.gen_range(-3.0..6.0));
        let mut f = [0.0; 9];
        for v in f[..dd].iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let nf0 = linalg::norm_sq(&f[..dd]).sqrt().max(1e-300);
        for v in f[..dd].iter_mut() {
            *v *= sf / nf0;
        }
        let mut m = [0.0; 3];
        for v in m[..d].iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let nm0 = linalg::norm_sq(&m[..d]).sqrt().max(1e-300);
        for v in m[..d].iter_mut() {
            *v *= sm / nm0;
        }
        let nf = linalg::norm_sq(&f[..dd]).sqrt();
        let nm = linalg::norm_sq(&m[..d]).sqrt();
        let w = model.stored.value(&f[..dd], d);
        let mut dw = [0.0; 9];
        model.stored.derivative(&f[..dd], d, &mut dw[..dd]);
        let psi = model.anisotropy.value(&f[..dd], &m[..d], d);
        let mut pf = [0.0; 9];
        let mut pm = [0.0; 3];
        model.anisotropy.derivative(&f[..dd], &m[..d], d, &mut pf[..dd], &mut pm[..d]);
        let ndw = linalg::norm_sq(&dw[..dd]).sqrt();
        let npf = linalg::norm_sq(&pf[..dd]).sqrt();
        let npm = linalg::norm_sq(&pm[..d]).sqrt();

        let lower_rhs = constants.lower * (nf.powf(p.p1) - 1.0);
        // coercivity ratio: how far W falls below the required lower bound
        let coerc = if lower_rhs > 0.0 { lower_rhs / w.max(0.0) } else { 0.0 };
        let r_w = (w.abs() + ndw) / (constants.upper * (1.0 + nf.powf(p.p2)));
        let r_psi = (psi.abs() + npf) / (constants.upper * (1.0 + nf.powf(p.p2) + nm.powf(p.p3)));
        let r_pm = npm / (constants.upper * (1.0 + nf.powf(p.p2) + nm.powf(p.p4)));
        let ratios = [coerc, r_w, r_psi, r_pm];
        rep.coercivity = rep.coercivity.max(nan_to_inf(coerc));
        rep.w_upper = rep.w_upper.max(nan_to_inf(r_w));
        rep.psi_upper = rep.psi_upper.max(nan_to_inf(r_psi));
        rep.psi_m_upper = rep.psi_m_upper.max(nan_to_inf(r_pm));
        rep.min_density = rep.min_density.min(w.min(psi));
        let bad = ratios.iter().any(|r| !(*r <= 1.0)) || w < 0.0 || psi < 0.0 || w.is_nan() || psi.is_nan();
        if bad && witness.is_none() {
            witness = Some(format!(
                "sample {s}: |F| = {nf:e}, |M| = {nm:e}, W = {w:e}, Psi = {psi:e}, ratios (coercivity, W, Psi, Psi_M) = {ratios:?}"
            ));
        }
    }
    if let Some(wit) = witness {
        return Err(Error::GrowthAudit(wit));
    }
    Ok(rep)
}

fn nan_to_inf(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}
