//! Demagnetizing field on a zero-padded periodic grid.
//!
//! The field is the discrete Helmholtz projection `H = -g (g . M) / |g|^2`
//! in Fourier space, where `g_k = sin(k h) / h` is the symbol of the central
//! difference. With this symbol `H = -grad phi` holds exactly for the central
//! difference, the solve is linear, self-adjoint and an L2 contraction, and
//! `-int M . H = int |H|^2` holds to roundoff.
//!
//! Inside the energy functional the magnetization lives on the deformed
//! reference nodes. Nodal moments are spread onto the periodic grid with
//! cubic B-splines and the field is gathered back with the same kernel, which
//! keeps the discrete stray energy exactly quadratic in the moments and C2 in
//! the node positions.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{contract, Error, Result};
use crate::grid::{Field, FieldRank, GridSpec};

/// Periodic computational grid with an inner region holding the body.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGrid {
    pub dim: usize,
    pub n: [usize; 3],
    pub h: f64,
    pub origin: [f64; 3],
    /// Box in which deposited sources may live.
    pub inner_lo: [f64; 3],
    pub inner_hi: [f64; 3],
}

/// Smallest integer `>= n` of the form `2^a 3^b 5^c`.
pub fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl PaddedGrid {
    /// Build a padded grid; fails if the periodic extent is below twice the
    /// inner extent along any axis.
    pub fn new(dim: usize, n: [usize; 3], h: f64, origin: [f64; 3], inner_lo: [f64; 3], inner_hi: [f64; 3]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedGrid(format!("dimension {dim}")));
        }
        if !(h > 0.0) {
            return Err(Error::Config("stray-field spacing must be positive".into()));
        }
        let mut nn = [1usize; 3];
        for k in 0..dim {
            if n[k] < 4 {
                return Err(Error::UnsupportedGrid("padded grid needs >= 4 nodes per axis".into()));
            }
            let extent = n[k] as f64 * h;
            let inner = inner_hi[k] - inner_lo[k];
            if extent < 2.0 * inner * (1.0 - 1e-12) {
                return Err(Error::Config(format!(
                    "stray-field padding {:.3}x along axis {} is below the required 2x",
                    extent / inner,
                    k + 1
                )));
            }
            let hi_edge = origin[k] + (n[k] - 1) as f64 * h;
            if inner_lo[k] < origin[k] - 1e-12 || inner_hi[k] > hi_edge + 1e-12 {
                return Err(Error::Config("inner stray-field box leaves the padded grid".into()));
            }
            nn[k] = n[k];
        }
        Ok(PaddedGrid { dim, n: nn, h, origin, inner_lo, inner_hi })
    }

    /// Zero-padded grid around a background grid: same spacing and node
    /// positions, `factor` times as many nodes per axis (rounded up to an
    /// FFT-friendly size), the background grid centred inside.
    pub fn around(inner: &GridSpec, factor: f64) -> Result<Self> {
        if !(factor >= 2.0) {
            return Err(Error::Config(format!("stray-field padding factor {factor} is below the required 2")));
        }
        let d = inner.dim();
        let h = inner.h()[0];
        let mut n = [1usize; 3];
        let mut origin = [0.0; 3];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..d {
            let ni = inner.n()[k];
            n[k] = smooth_size((factor * ni as f64).ceil() as usize);
            let shift = (n[k] - ni) / 2;
            origin[k] = inner.origin()[k] - shift as f64 * h;
            lo[k] = inner.origin()[k];
            hi[k] = inner.origin()[k] + (ni - 1) as f64 * h;
        }
        let pg = PaddedGrid { dim: d, n, h, origin, inner_lo: lo, inner_hi: hi };
        for k in 0..d {
            if (n[k] as f64) * h < 2.0 * (hi[k] - lo[k]) {
                return Err(Error::Config("stray-field padding below 2x".into()));
            }
        }
        Ok(pg)
    }

    /// Padded grid for a whole run: a lattice anchored at multiples of `h`
    /// whose inner box is the bounding box of `points` enlarged by `slack`
    /// (a fraction of its extent, at least four cells) on every side.
    pub fn for_points(dim: usize, points: &[f64], h: f64, slack: f64, factor: f64) -> Result<Self> {
        if !(factor >= 2.0) {
            return Err(Error::Config(format!("stray-field padding factor {factor} is below the required 2")));
        }
        let (lo, hi) = crate::geometry::bbox(points, dim);
        let mut ilo = [0.0; 3];
        let mut ihi = [0.0; 3];
        let mut n = [1usize; 3];
        let mut origin = [0.0; 3];
        for k in 0..dim {
            let ext = hi[k] - lo[k];
            let pad = (slack * ext).max(4.0 * h);
            let a = ((lo[k] - pad) / h).floor();
            let b = ((hi[k] + pad) / h).ceil();
            ilo[k] = a * h;
            ihi[k] = b * h;
            let inner_cells = (b - a) as usize;
            n[k] = smooth_size(((factor * inner_cells as f64).ceil() as usize).max(inner_cells + 8));
            let shift = (n[k] - inner_cells) / 2;
            origin[k] = (a - shift as f64) * h;
        }
        PaddedGrid::new(dim, n, h, origin, ilo, ihi)
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::background(self.dim, self.n, self.h, self.origin).expect("padded grid is valid")
    }

    /// Copy a field on a sub-grid with the same spacing into the padded
    /// grid (zero elsewhere). The sub-grid nodes must lie on padded nodes.
    pub fn embed(&self, grid: &GridSpec, data: &[f64], ncomp: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        if grid.dim() != d || (grid.h()[0] - self.h).abs() > 1e-12 * self.h {
            return Err(contract("embedded grid must share dimension and spacing"));
        }
        grid.check_field(data, ncomp, "embedded field")?;
        let mut off = [0usize; 3];
        for k in 0..d {
            let s = (grid.origin()[k] - self.origin[k]) / self.h;
            let r = s.round();
            if (s - r).abs() > 1e-9 || r < 0.0 || r as usize + grid.n()[k] > self.n[k] {
                return Err(contract("embedded grid is not aligned inside the padded grid"));
            }
            off[k] = r as usize;
        }
        let mut out = vec![0.0; self.len() * ncomp];
        for i in 0..grid.len() {
            let ijk = grid.multi_index(i);
            let mut p = [0usize; 3];
            for k in 0..3 {
                p[k] = ijk[k] + off[k];
            }
            let j = (p[0] * self.n[1] + p[1]) * self.n[2] + p[2];
            out[j * ncomp..(j + 1) * ncomp].copy_from_slice(&data[i * ncomp..(i + 1) * ncomp]);
        }
        Ok(out)
    }
}

/// FFT plans and projection symbols for one padded-grid shape.
pub struct StraySolver {
    dim: usize,
    n: [usize; 3],
    h: f64,
    plans_fwd: Vec<Arc<dyn Fft<f64>>>,
    plans_inv: Vec<Arc<dyn Fft<f64>>>,
    symbols: Vec<Vec<f64>>,
}

type CacheKey = (usize, [usize; 3], u64);

fn cache() -> &'static RwLock<HashMap<CacheKey, Arc<StraySolver>>> {
    static CACHE: OnceLock<RwLock<HashMap<CacheKey, Arc<StraySolver>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

impl StraySolver {
    /// Shared solver for the shape of `pg`.
    pub fn for_grid(pg: &PaddedGrid) -> Arc<StraySolver> {
        let key = (pg.dim, pg.n, pg.h.to_bits());
        if let Some(s) = cache().read().expect("stray cache poisoned").get(&key) {
            return s.clone();
        }
        let s = Arc::new(StraySolver::new(pg));
        cache().write().expect("stray cache poisoned").entry(key).or_insert(s).clone()
    }

    fn new(pg: &PaddedGrid) -> Self {
        let d = pg.dim;
        let mut planner = FftPlanner::new();
        let mut plans_fwd = Vec::new();
        let mut plans_inv = Vec::new();
        let mut symbols = Vec::new();
        for k in 0..d {
            let n = pg.n[k];
            plans_fwd.push(planner.plan_fft_forward(n));
            plans_inv.push(planner.plan_fft_inverse(n));
            let sym = (0..n)
                .map(|m| {
                    if m == 0 || 2 * m == n {
                        return 0.0;
                    }
                    let mm = if 2 * m < n { m as f64 } else { m as f64 - n as f64 };
                    let kappa = 2.0 * std::f64::consts::PI * mm / (n as f64 * pg.h);
                    (kappa * pg.h).sin() / pg.h
                })
                .collect();
            symbols.push(sym);
        }
        StraySolver { dim: d, n: pg.n, h: pg.h, plans_fwd, plans_inv, symbols }
    }

    fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    /// Multidimensional FFT. Each pass transforms the contiguous last axis and
    /// then rotates the axes so every axis is transformed exactly once.
    fn transform(&self, data: &mut Vec<Complex<f64>>, inverse: bool) {
        let d = self.dim;
        let mut dims: Vec<usize> = self.n[..d].to_vec();
        let mut scratch = vec![Complex::new(0.0, 0.0); data.len()];
        for _ in 0..d {
            let last = *dims.last().expect("nonempty");
            let plan = self.plan_for_len(last, inverse);
            // one scratch allocation per block of lines
            data.par_chunks_mut(last * 64).for_each(|block| plan.process(block));
            // rotate: new[k][rest] = old[rest][k]
            let rest = data.len() / last;
            scratch.par_chunks_mut(rest).enumerate().for_each(|(k, out)| {
                for (r, o) in out.iter_mut().enumerate() {
                    *o = data[r * last + k];
                }
            });
            std::mem::swap(data, &mut scratch);
            dims.rotate_right(1);
        }
        if inverse {
            let s = 1.0 / data.len() as f64;
            data.par_iter_mut().for_each(|v| *v *= s);
        }
    }

    fn plan_for_len(&self, len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        let k = (0..self.dim).find(|&k| self.n[k] == len).expect("axis length");
        if inverse {
            self.plans_inv[k].clone()
        } else {
            self.plans_fwd[k].clone()
        }
    }

    /// Apply the projection to a magnetization `m[node*d + c]` on the padded
    /// grid; returns `(H, phi)`.
    pub fn project(&self, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (h, phi) = self.project_impl(m, true);
        (h, phi.expect("requested"))
    }

    /// `H` only.
    pub fn project_h(&self, m: &[f64]) -> Vec<f64> {
        self.project_impl(m, false).0
    }

    /// Transform a real field pair `(a, b)` together as `a + i b`.
    fn forward_pair(&self, m: &[f64], ca: usize, cb: Option<usize>) -> (Vec<Complex<f64>>, Option<Vec<Complex<f64>>>) {
        let d = self.dim;
        let n = self.len();
        let mut z: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(m[i * d + ca], cb.map_or(0.0, |c| m[i * d + c]))).collect();
        self.transform(&mut z, false);
        let Some(_) = cb else { return (z, None) };
        // A_k = (Z_k + conj Z_-k) / 2, B_k = (Z_k - conj Z_-k) / 2i
        let mut a = vec![Complex::new(0.0, 0.0); n];
        let mut b = vec![Complex::new(0.0, 0.0); n];
        let nn = self.n;
        let plane = nn[1] * nn[2];
        a.par_chunks_mut(plane).zip(b.par_chunks_mut(plane)).enumerate().for_each(|(i0, (ap, bp))| {
            let j0 = (nn[0] - i0) % nn[0];
            for i1 in 0..nn[1] {
                let j1 = (nn[1] - i1) % nn[1];
                let src = (i0 * nn[1] + i1) * nn[2];
                let dst = (j0 * nn[1] + j1) * nn[2];
                for i2 in 0..nn[2] {
                    let j2 = (nn[2] - i2) % nn[2];
                    let zi = z[src + i2];
                    let zc = z[dst + j2].conj();
                    ap[i1 * nn[2] + i2] = (zi + zc) * 0.5;
                    let t = (zi - zc) * 0.5;
                    bp[i1 * nn[2] + i2] = Complex::new(t.im, -t.re);
                }
            }
        });
        (a, Some(b))
    }

    fn project_impl(&self, m: &[f64], want_phi: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let d = self.dim;
        let n = self.len();
        let mut comps: Vec<Vec<Complex<f64>>> = Vec::with_capacity(d);
        let (a, b) = self.forward_pair(m, 0, Some(1));
        comps.push(a);
        comps.push(b.expect("paired"));
        if d == 3 {
            comps.push(self.forward_pair(m, 2, None).0);
        }
        let mut phi = if want_phi { vec![Complex::new(0.0, 0.0); n] } else { Vec::new() };
        {
            let (n0, n1, n2) = (self.n[0], self.n[1], self.n[2]);
            let sy = &self.symbols;
            let zero = Complex::new(0.0, 0.0);
            let mut hs: Vec<&mut Vec<Complex<f64>>> = comps.iter_mut().collect();
            let mut i = 0;
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let g0 = sy[0][i0];
                    let g1 = sy[1][i1];
                    for i2 in 0..n2 {
                        let g2c = if d == 3 { sy[2][i2] } else { 0.0 };
                        let g = [g0, g1, g2c];
                        let g2 = g0 * g0 + g1 * g1 + g2c * g2c;
                        if g2 == 0.0 {
                            for h in hs.iter_mut() {
                                h[i] = zero;
                            }
                        } else {
                            let mut gm = zero;
                            for k in 0..d {
                                gm += hs[k][i] * g[k];
                            }
                            let s = gm / g2;
                            // phi_hat = -i (g . M_hat) / |g|^2
                            if want_phi {
                                phi[i] = Complex::new(s.im, -s.re);
                            }
                            for k in 0..d {
                                hs[k][i] = -s * g[k];
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
        // real outputs share inverse transforms pairwise: (Hx + i Hy), (Hz + i phi)
        let mut outs: Vec<Vec<Complex<f64>>> = comps;
        if want_phi {
            outs.push(phi);
        }
        let mut packed: Vec<Vec<Complex<f64>>> = outs
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => a.iter().zip(b).map(|(x, y)| x + Complex::new(-y.im, y.re)).collect(),
                [a] => a.clone(),
                _ => unreachable!(),
            })
            .collect();
        packed.par_iter_mut().for_each(|buf| self.transform(buf, true));
        let mut reals: Vec<Vec<f64>> = Vec::with_capacity(outs.len());
        for (p, buf) in packed.iter().enumerate() {
            reals.push(buf.iter().map(|z| z.re).collect());
            if 2 * p + 1 < outs.len() {
                reals.push(buf.iter().map(|z| z.im).collect());
            }
        }
        let mut h = vec![0.0; n * d];
        for (c, r) in reals.iter().take(d).enumerate() {
            for i in 0..n {
                h[i * d + c] = r[i];
            }
        }
        let phi = if want_phi { reals.pop() } else { None };
        (h, phi)
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }
}

/// Potential, field and field energy on the padded grid.
#[derive(Clone, Debug)]
pub struct StrayFieldSolution {
    pub grid: PaddedGrid,
    pub phi: Vec<f64>,
    /// `H[node*d + c]`
    pub h: Vec<f64>,
    /// `mu/2 * int |H|^2`
    pub energy: f64,
    pub mu: f64,
}

impl StrayFieldSolution {
    pub fn h_field(&self) -> Field {
        Field { rank: FieldRank::Vector, dim: self.grid.dim, data: self.h.clone(), units: "A/m".into() }
    }

    pub fn phi_field(&self) -> Field {
        Field { rank: FieldRank::Scalar, dim: self.grid.dim, data: self.phi.clone(), units: "A".into() }
    }
}

/// Solve for the stray field of `m` (laid out `[node][c]` on the padded grid,
/// zero outside the body).
pub fn solve_stray_field(m: &[f64], pg: &PaddedGrid, mu: f64) -> Result<StrayFieldSolution> {
    if m.len() != pg.len() * pg.dim {
        return Err(contract("magnetization does not match the padded grid"));
    }
    let solver = StraySolver::for_grid(pg);
    let (h, phi) = solver.project(m);
    let v = pg.cell_volume();
    let energy = 0.5 * mu * v * h.iter().map(|x| x * x).sum::<f64>();
    Ok(StrayFieldSolution { grid: pg.clone(), phi, h, energy, mu })
}

/// Both sides of `-mu/2 int M . H = mu/2 int |H|^2`.
pub fn stray_energy_identity(m: &[f64], sol: &StrayFieldSolution) -> (f64, f64) {
    let v = sol.grid.cell_volume();
    let lhs = -0.5 * sol.mu * v * m.iter().zip(&sol.h).map(|(a, b)| a * b).sum::<f64>();
    (lhs, sol.energy)
}

/// `||H|| / ||M||` in L2; errors if it exceeds 1.05.
pub fn stability_check(m: &[f64], sol: &StrayFieldSolution) -> Result<f64> {
    let nm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nh: f64 = sol.h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nm == 0.0 {
        return Ok(0.0);
    }
    let r = nh / nm;
    if r > 1.05 {
        return Err(Error::SolverDefect(format!("||H|| / ||M|| = {r}")));
    }
    Ok(r)
}

/// Sample a padded-grid field at a point by multilinear interpolation.
pub fn sample_multilinear(pg: &PaddedGrid, field: &[f64], ncomp: usize, y: &[f64], out: &mut [f64]) {
    let d = pg.dim;
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for k in 0..d {
        let s = (y[k] - pg.origin[k]) / pg.h;
        let i = (s.floor().max(0.0) as usize).min(pg.n[k] - 2);
        base[k] = i;
        t[k] = (s - i as f64).clamp(0.0, 1.0);
    }
    for v in out.iter_mut().take(ncomp) {
        *v = 0.0;
    }
    for q in 0..(1usize << d) {
        let mut p = base;
        let mut w = 1.0;
        for k in 0..d {
            if q & (1 << k) != 0 {
                p[k] += 1;
                w *= t[k];
            } else {
                w *= 1.0 - t[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        let j = (p[0] * pg.n[1] + p[1]) * pg.n[2] + p[2];
        for c in 0..ncomp {
            out[c] += w * field[j * ncomp + c];
        }
    }
}

/// `H(eta(X))` at every reference node by multilinear interpolation.
pub fn pullback_stray(sol: &StrayFieldSolution, eta: &Field) -> Result<Field> {
    let d = sol.grid.dim;
    if eta.dim != d || eta.rank != FieldRank::Vector {
        return Err(contract("deformation does not match the stray-field grid"));
    }
    let n = eta.node_count();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let y = &eta.data[i * d..(i + 1) * d];
        for k in 0..d {
            if y[k] < sol.grid.origin[k] || y[k] > sol.grid.origin[k] + (sol.grid.n[k] - 1) as f64 * sol.grid.h {
                return Err(Error::Admissibility("deformed node outside the stray-field grid".into()));
            }
        }
        sample_multilinear(&sol.grid, &sol.h, d, y, &mut out[i * d..(i + 1) * d]);
    }
    Ok(Field { rank: FieldRank::Vector, dim: d, data: out, units: "A/m".into() })
}

#[inline]
fn bspline3(s: f64) -> (f64, f64) {
    let a = s.abs();
    let sg = s.signum();
    if a < 1.0 {
        (2.0 / 3.0 - a * a + 0.5 * a * a * a, sg * (-2.0 * a + 1.5 * a * a))
    } else if a < 2.0 {
        let t = 2.0 - a;
        (t * t * t / 6.0, -sg * 0.5 * t * t)
    } else {
        (0.0, 0.0)
    }
}

/// Particle-mesh stray-field operator for moments carried by moving nodes.
#[derive(Clone)]
pub struct StrayOperator {
    pub grid: PaddedGrid,
    solver: Arc<StraySolver>,
}

/// Stray energy and its first variations for a set of moments.
#[derive(Clone, Debug)]
pub struct StrayEvaluation {
    /// `-mu/2 sum_n m_n . H(y_n)` (equals `mu/2 int |H|^2` on the grid).
    pub energy: f64,
    /// `H(y_n)` gathered at each node.
    pub h_at: Vec<f64>,
    /// `(grad H(y_n))^T m_n` at each node (only if requested).
    pub grad_h_t_m: Vec<f64>,
}

/// Spline stencil of one point: base index per axis and weights/derivatives.
struct Stencil {
    base: [i64; 3],
    w: [[f64; 4]; 3],
    dw: [[f64; 4]; 3],
}

impl StrayOperator {
    pub fn new(grid: PaddedGrid) -> Self {
        let solver = StraySolver::for_grid(&grid);
        StrayOperator { grid, solver }
    }

    /// True iff every position lies in the inner box.
    pub fn contains(&self, y: &[f64]) -> bool {
        let d = self.grid.dim;
        y.chunks_exact(d).all(|p| (0..d).all(|k| p[k] >= self.grid.inner_lo[k] && p[k] <= self.grid.inner_hi[k]))
    }

    fn stencil(&self, y: &[f64]) -> Stencil {
        let d = self.grid.dim;
        let mut st = Stencil { base: [0; 3], w: [[0.0; 4]; 3], dw: [[0.0; 4]; 3] };
        for k in 0..3 {
            if k >= d {
                st.w[k] = [1.0, 0.0, 0.0, 0.0];
                continue;
            }
            let s = (y[k] - self.grid.origin[k]) / self.grid.h;
            let i0 = s.floor() as i64 - 1;
            st.base[k] = i0;
            for j in 0..4 {
                let (b, db) = bspline3(s - (i0 + j as i64) as f64);
                st.w[k][j] = b;
                st.dw[k][j] = db / self.grid.h;
            }
        }
        st
    }

    fn for_stencil(&self, st: &Stencil, mut f: impl FnMut(usize, f64, [f64; 3])) {
        let d = self.grid.dim;
        let n = self.grid.n;
        let r2 = if d == 3 { 4 } else { 1 };
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..r2 {
                    let i = (st.base[0] + a as i64) as usize;
                    let j = (st.base[1] + b as i64) as usize;
                    let k = if d == 3 { (st.base[2] + c as i64) as usize } else { 0 };
                    let w = st.w[0][a] * st.w[1][b] * st.w[2][c];
                    let mut g = [0.0; 3];
                    g[0] = st.dw[0][a] * st.w[1][b] * st.w[2][c];
                    g[1] = st.w[0][a] * st.dw[1][b] * st.w[2][c];
                    if d == 3 {
                        g[2] = st.w[0][a] * st.w[1][b] * st.dw[2][c];
                    }
                    f((i * n[1] + j) * n[2] + k, w, g);
                }
            }
        }
    }

    /// Magnetization density on the padded grid from moments at the stencils.
    fn deposit(&self, stencils: &[Stencil], m: &[f64]) -> Vec<f64> {
        let d = self.grid.dim;
        let v = self.grid.cell_volume();
        let mut grid_m = vec![0.0; self.grid.len() * d];
        for (p, st) in stencils.iter().enumerate() {
            let mp = &m[p * d..(p + 1) * d];
            self.for_stencil(st, |j, w, _| {
                for c in 0..d {
                    grid_m[j * d + c] += w * mp[c] / v;
                }
            });
        }
        grid_m
    }

    /// Deposited magnetization and its full padded-grid solution (potential
    /// and field). `None` if a position leaves the inner box.
    pub fn grid_solution(&self, y: &[f64], m: &[f64], mu: f64) -> Option<(Vec<f64>, StrayFieldSolution)> {
        if !self.contains(y) {
            return None;
        }
        let stencils: Vec<Stencil> = y.par_chunks(self.grid.dim).map(|p| self.stencil(p)).collect();
        let grid_m = self.deposit(&stencils, m);
        let (h, phi) = self.solver.project(&grid_m);
        let energy = 0.5 * mu * self.grid.cell_volume() * h.iter().map(|x| x * x).sum::<f64>();
        Some((grid_m, StrayFieldSolution { grid: self.grid.clone(), phi, h, energy, mu }))
    }

    /// Evaluate for moments `m` at positions `y` (both `[node][c]`).
    /// Returns `None` if a position leaves the inner box.
    pub fn evaluate(&self, y: &[f64], m: &[f64], mu: f64, want_geometry: bool) -> Option<StrayEvaluation> {
        let d = self.grid.dim;
        if !self.contains(y) {
            return None;
        }
        let np = y.len() / d;
        let stencils: Vec<Stencil> = y.par_chunks(d).map(|p| self.stencil(p)).collect();
        let grid_m = self.deposit(&stencils, m);
        let h = self.solver.project_h(&grid_m);
        let mut h_at = vec![0.0; np * d];
        let mut gtm = if want_geometry { vec![0.0; np * d] } else { Vec::new() };
        h_at.par_chunks_mut(d).enumerate().for_each(|(p, out)| {
            self.for_stencil(&stencils[p], |j, w, _| {
                for c in 0..d {
                    out[c] += w * h[j * d + c];
                }
            });
        });
        if want_geometry {
            gtm.par_chunks_mut(d).enumerate().for_each(|(p, out)| {
                let mp = &m[p * d..(p + 1) * d];
                self.for_stencil(&stencils[p], |j, _, g| {
                    let mh: f64 = (0..d).map(|c| mp[c] * h[j * d + c]).sum();
                    for k in 0..d {
                        out[k] += g[k] * mh;
                    }
                });
            });
        }
        let energy = -0.5 * mu * m.iter().zip(&h_at).map(|(a, b)| a * b).sum::<f64>();
        Some(StrayEvaluation { energy, h_at, grad_h_t_m: gtm })
    }
}
