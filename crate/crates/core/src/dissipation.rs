//! Viscous and magnetic dissipation potential, evaluated at a frozen
//! reference geometry:
//!
//! `R = int nu |grad(d eta) F_p^-1|^2 J_p + 1/2 |d M~|^2 / J_p dX`

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::grid::{DiffOps, Field, GridSpec};
use crate::kinematics::{EulerianMap, KinematicState};
use crate::linalg;

/// Deformation and magnetization rates.
#[derive(Clone, Debug, PartialEq)]
pub struct RatePair {
    pub d_eta: Field,
    pub d_m: Field,
}

/// Dissipation at a fixed geometry; cheap to evaluate repeatedly.
#[derive(Clone, Debug)]
pub struct Dissipation {
    dim: usize,
    ops: DiffOps,
    weights: Vec<f64>,
    det: Vec<f64>,
    inv: Vec<f64>,
    nu: f64,
}

impl Dissipation {
    pub fn new(grid: &GridSpec, state: &KinematicState, nu: f64) -> Result<Self> {
        if !state.orientation_preserving() {
            return Err(Error::InfiniteEnergy { min_det: state.min_det });
        }
        if state.det.len() != grid.len() {
            return Err(contract("kinematic state does not match the grid"));
        }
        Ok(Dissipation {
            dim: grid.dim(),
            ops: DiffOps::new(grid)?,
            weights: grid.quadrature_weights(),
            det: state.det.clone(),
            inv: state.inv.clone(),
            nu,
        })
    }

    fn strain_rate(&self, d_eta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let dd = d * d;
        let g = self.ops.gradient(d_eta, d);
        let mut out = vec![0.0; g.len()];
        out.par_chunks_mut(dd).enumerate().for_each(|(i, o)| {
            linalg::matmul(&g[i * dd..(i + 1) * dd], &self.inv[i * dd..(i + 1) * dd], d, o);
        });
        out
    }

    /// Viscous and magnetic parts separately.
    pub fn parts(&self, d_eta: &[f64], d_m: &[f64]) -> (f64, f64) {
        let d = self.dim;
        let dd = d * d;
        let l = self.strain_rate(d_eta);
        let mut visc = 0.0;
        let mut mag = 0.0;
        for i in 0..self.det.len() {
            let w = self.weights[i];
            visc += w * self.nu * linalg::norm_sq(&l[i * dd..(i + 1) * dd]) * self.det[i];
            mag += w * 0.5 * linalg::norm_sq(&d_m[i * d..(i + 1) * d]) / self.det[i];
        }
        (visc, mag)
    }

    pub fn value(&self, d_eta: &[f64], d_m: &[f64]) -> f64 {
        let (a, b) = self.parts(d_eta, d_m);
        a + b
    }

    /// Gradient with respect to the deformation rate.
    pub fn grad_eta(&self, d_eta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let dd = d * d;
        let l = self.strain_rate(d_eta);
        let mut s = vec![0.0; l.len()];
        s.par_chunks_mut(dd).enumerate().for_each(|(i, o)| {
            let c = 2.0 * self.weights[i] * self.nu * self.det[i];
            linalg::matmul_nt(&l[i * dd..(i + 1) * dd], &self.inv[i * dd..(i + 1) * dd], d, o);
            for v in o.iter_mut() {
                *v *= c;
            }
        });
        self.ops.gradient_t(&s, d)
    }

    /// Gradient with respect to the magnetization rate.
    pub fn grad_m(&self, d_m: &[f64]) -> Vec<f64> {
        let d = self.dim;
        d_m.iter().enumerate().map(|(q, v)| self.weights[q / d] * v / self.det[q / d]).collect()
    }
}

/// `R~(eta_ref; d eta, d M~)`.
pub fn dissipation_rate(grid: &GridSpec, state_ref: &KinematicState, rates: &RatePair, nu: f64) -> Result<f64> {
    rates.d_eta.conforms(grid)?;
    rates.d_m.conforms(grid)?;
    Ok(Dissipation::new(grid, state_ref, nu)?.value(&rates.d_eta.data, &rates.d_m.data))
}

/// `(dR/d(d eta), dR/d(d M~))`.
pub fn grad_dissipation(grid: &GridSpec, state_ref: &KinematicState, rates: &RatePair, nu: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    rates.d_eta.conforms(grid)?;
    rates.d_m.conforms(grid)?;
    let r = Dissipation::new(grid, state_ref, nu)?;
    Ok((r.grad_eta(&rates.d_eta.data), r.grad_m(&rates.d_m.data)))
}

/// Eulerian dissipation `int nu |grad_x v|^2 + 1/2 |D_t M|^2 dx` on the
/// background grid of `map`. The Eulerian rates are represented through
/// their reference counterparts: `grad_x v = grad(d eta) F^-1` and
/// `D_t M = d M~ / J`, carried to each quadrature point by the inverse map.
pub fn eulerian_dissipation(grid: &GridSpec, state_ref: &KinematicState, rates: &RatePair, nu: f64, map: &EulerianMap) -> Result<f64> {
    rates.d_eta.conforms(grid)?;
    rates.d_m.conforms(grid)?;
    if !state_ref.orientation_preserving() {
        return Err(Error::InfiniteEnergy { min_det: state_ref.min_det });
    }
    let d = grid.dim();
    let dd = d * d;
    let ops = DiffOps::new(grid)?;
    let gv = ops.gradient(&rates.d_eta.data, d);
    let vals: Vec<f64> = map
        .quadrature
        .par_iter()
        .map(|(_, w, loc)| {
            let geo = &map.geometry;
            let mut f = [0.0; 9];
            let mut g = [0.0; 9];
            let mut dm = [0.0; 3];
            geo.interpolate(loc, &state_ref.f, dd, &mut f[..dd]);
            geo.interpolate(loc, &gv, dd, &mut g[..dd]);
            geo.interpolate(loc, &rates.d_m.data, d, &mut dm[..d]);
            let mut finv = [0.0; 9];
            let j = linalg::inverse(&f[..dd], d, &mut finv[..dd]);
            let mut l = [0.0; 9];
            linalg::matmul(&g[..dd], &finv[..dd], d, &mut l[..dd]);
            w * (nu * linalg::norm_sq(&l[..dd]) + 0.5 * linalg::norm_sq(&dm[..d]) / (j * j))
        })
        .collect();
    Ok(vals.iter().sum())
}
