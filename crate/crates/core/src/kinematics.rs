//! Nodal kinematics of a deformation, the Lagrangian/Eulerian dictionary for
//! the magnetization, and admissibility checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::{self, ImageGeometry, Location};
use crate::grid::{DiffOps, Field, FieldRank, GridSpec};
use crate::linalg;
use crate::trajectory::TrajectoryStore;

/// Default floor certified by [`det_monitor`].
pub const DEFAULT_DET_FLOOR: f64 = 1e-6;

/// Nodal deformation gradient and derived tensors.
#[derive(Clone, Debug)]
pub struct KinematicState {
    pub dim: usize,
    /// `F[node][r][c] = d eta_r / d X_c`
    pub f: Vec<f64>,
    pub det: Vec<f64>,
    pub cof: Vec<f64>,
    /// `F^{-1}`; meaningful only where `det > 0`.
    pub inv: Vec<f64>,
    pub min_det: f64,
}

impl KinematicState {
    /// False when some nodal Jacobian is non-positive.
    pub fn orientation_preserving(&self) -> bool {
        self.min_det > 0.0
    }

    pub fn node_f(&self, i: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.f[i * dd..(i + 1) * dd]
    }

    pub fn node_inv(&self, i: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.inv[i * dd..(i + 1) * dd]
    }
}

pub fn build_kinematics(eta: &Field, grid: &GridSpec) -> Result<KinematicState> {
    eta.conforms(grid)?;
    if eta.rank != FieldRank::Vector {
        return Err(contract("deformation must be a vector field"));
    }
    let ops = DiffOps::new(grid)?;
    Ok(kinematics_from_ops(&ops, &eta.data, grid.dim()))
}

pub(crate) fn kinematics_from_ops(ops: &DiffOps, eta: &[f64], d: usize) -> KinematicState {
    let f = ops.gradient(eta, d);
    kinematics_from_gradient(f, d)
}

pub(crate) fn kinematics_from_gradient(f: Vec<f64>, d: usize) -> KinematicState {
    let dd = d * d;
    let n = f.len() / dd;
    let mut det = vec![0.0; n];
    let mut cof = vec![0.0; n * dd];
    let mut inv = vec![0.0; n * dd];
    det.par_iter_mut()
        .zip(cof.par_chunks_mut(dd))
        .zip(inv.par_chunks_mut(dd))
        .enumerate()
        .for_each(|(i, ((j, c), v))| {
            let fi = &f[i * dd..(i + 1) * dd];
            *j = linalg::det(fi, d);
            linalg::cofactor(fi, d, c);
            if *j != 0.0 {
                for r in 0..d {
                    for k in 0..d {
                        v[r * d + k] = c[k * d + r] / *j;
                    }
                }
            }
        });
    let min_det = det.iter().cloned().fold(f64::INFINITY, f64::min);
    KinematicState { dim: d, f, det, cof, inv, min_det }
}

/// Result of a volume-identity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnReport {
    pub residual: f64,
    pub tolerance: f64,
    pub image_volume: f64,
    pub det_integral: f64,
    pub surface_area: f64,
    pub ok: bool,
}

/// Measure of the deformed boundary (sum over triangulated boundary faces;
/// edge lengths in 2D).
pub fn deformed_surface_area(grid: &GridSpec, eta: &[f64]) -> f64 {
    let d = grid.dim();
    let n = grid.n();
    let mut area = 0.0;
    let p = |i: usize| -> [f64; 3] {
        let mut x = [0.0; 3];
        x[..d].copy_from_slice(&eta[i * d..i * d + d]);
        x
    };
    for c in 0..grid.cell_count() {
        let base = grid.cell_origin_node(c);
        let ijk = grid.multi_index(base);
        let (corners, _) = grid.cell_corners(c);
        for axis in 0..d {
            for (side, on) in [(0usize, ijk[axis] == 0), (1usize, ijk[axis] + 2 == n[axis])] {
                if !on {
                    continue;
                }
                let sel: Vec<usize> = (0..(1 << d)).filter(|q| ((q >> axis) & 1) == side).collect();
                if d == 2 {
                    let a = p(corners[sel[0]]);
                    let b = p(corners[sel[1]]);
                    area += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                } else {
                    // sel holds the 4 face corners in bit order; 0,1,3,2 is a cycle
                    let q = [p(corners[sel[0]]), p(corners[sel[1]]), p(corners[sel[3]]), p(corners[sel[2]])];
                    area += tri_area(&q[0], &q[1], &q[2]) + tri_area(&q[0], &q[2], &q[3]);
                }
            }
        }
    }
    area
}

fn tri_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * linalg::norm_sq(&cr).sqrt()
}

/// `| vol(eta(Omega)) - integral of det grad eta |` with the image volume
/// measured on a background grid of spacing `h / refine`. The tolerance is
/// `2 h_bg` times the deformed surface area.
pub fn ciarlet_necas_residual(eta: &Field, state: &KinematicState, grid: &GridSpec, refine: usize) -> Result<CnReport> {
    eta.conforms(grid)?;
    let bg = geometry::background_grid(grid, &eta.data, refine, 2)?;
    let h_bg = bg.h()[0];
    let geo = ImageGeometry::build(grid, &eta.data, bg)?;
    Ok(cn_from_geometry(&geo, grid, &eta.data, state, h_bg))
}

fn cn_from_geometry(geo: &ImageGeometry, grid: &GridSpec, eta: &[f64], state: &KinematicState, h_bg: f64) -> CnReport {
    let image_volume = geo.image_volume();
    let det_integral = crate::grid::integrate_values(&state.det, grid);
    let surface_area = deformed_surface_area(grid, eta);
    let residual = (image_volume - det_integral).abs();
    let tolerance = 2.0 * h_bg * surface_area;
    CnReport { residual, tolerance, image_volume, det_integral, surface_area, ok: residual <= tolerance }
}

/// Minimum distance between images of boundary nodes whose reference
/// positions are at least `delta` apart; `ok` iff the margin is positive.
pub fn boundary_injectivity_margin(eta: &Field, grid: &GridSpec, delta: Option<f64>) -> Result<(f64, bool)> {
    eta.conforms(grid)?;
    let d = grid.dim();
    let delta = delta.unwrap_or(4.0 * grid.min_spacing());
    let nodes: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_boundary(i)).collect();
    let xs: Vec<[f64; 3]> = nodes.iter().map(|&i| grid.coords(i)).collect();
    let ys: Vec<&[f64]> = nodes.iter().map(|&i| &eta.data[i * d..i * d + d]).collect();
    let d2 = delta * delta;
    let margin_sq = (0..nodes.len())
        .into_par_iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in (a + 1)..nodes.len() {
                let mut dx = 0.0;
                for k in 0..d {
                    dx += (xs[a][k] - xs[b][k]).powi(2);
                }
                if dx < d2 * (1.0 - 1e-12) {
                    continue;
                }
                let mut dy = 0.0;
                for k in 0..d {
                    dy += (ys[a][k] - ys[b][k]).powi(2);
                }
                best = best.min(dy);
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    let margin = margin_sq.sqrt();
    Ok((margin, margin > 0.0))
}

/// Smallest nodal Jacobian over all snapshots and whether it clears `floor`.
pub fn det_monitor(trajectory: &TrajectoryStore, floor: f64) -> Result<(f64, bool)> {
    let ops = DiffOps::new(&trajectory.grid)?;
    let d = trajectory.grid.dim();
    let mut m = f64::INFINITY;
    for s in &trajectory.snapshots {
        m = m.min(kinematics_from_ops(&ops, &s.deformation.data, d).min_det);
    }
    Ok((m, m > floor))
}

/// Background-grid view of one deformation: located background nodes,
/// Eulerian quadrature points and the data needed to push fields forward.
#[derive(Clone, Debug)]
pub struct EulerianMap {
    pub geometry: ImageGeometry,
    /// Location of each background node inside the deformed body (None if outside).
    pub node_loc: Vec<Option<Location>>,
    /// Quadrature: `(background node, weight, evaluation location)`.
    pub quadrature: Vec<(usize, f64, Location)>,
    pub cn: CnReport,
}

impl EulerianMap {
    /// Build on a background grid aligned with the reference lattice with
    /// spacing `h / refine`. Fails if the deformation is not admissible.
    pub fn new(grid: &GridSpec, eta: &Field, state: &KinematicState, refine: usize) -> Result<Self> {
        eta.conforms(grid)?;
        if !state.orientation_preserving() {
            return Err(Error::Admissibility(format!("min det = {:e}", state.min_det)));
        }
        let bg = geometry::background_grid(grid, &eta.data, refine, 2)?;
        let h_bg = bg.h()[0];
        let geo = ImageGeometry::build(grid, &eta.data, bg)?;
        let cn = cn_from_geometry(&geo, grid, &eta.data, state, h_bg);
        if !cn.ok {
            return Err(Error::Admissibility(format!(
                "volume identity violated: residual {:e} > tolerance {:e}",
                cn.residual, cn.tolerance
            )));
        }
        let bgl = geo.background.len();
        let node_loc: Vec<Option<Location>> = (0..bgl)
            .into_par_iter()
            .map(|i| {
                if geo.raw_coverage[i] <= 0.0 {
                    return None;
                }
                geo.locate(geo.background.coords(i)).filter(|l| l.inside)
            })
            .collect();
        let quadrature: Vec<(usize, f64, Location)> = (0..bgl)
            .into_par_iter()
            .filter_map(|i| {
                let w = geo.coverage[i];
                if w <= 0.0 {
                    return None;
                }
                let loc = match node_loc[i] {
                    Some(l) => Some(l),
                    None => geo.locate(geo.centroid[i]),
                };
                loc.map(|l| (i, w, l))
            })
            .collect();
        Ok(EulerianMap { geometry: geo, node_loc, quadrature, cn })
    }

    pub fn background(&self) -> &GridSpec {
        &self.geometry.background
    }

    /// Rasterize a reference nodal field onto the background nodes (0 outside).
    pub fn rasterize(&self, values: &[f64], ncomp: usize) -> Vec<f64> {
        let bg = self.background();
        let mut out = vec![0.0; bg.len() * ncomp];
        out.par_chunks_mut(ncomp).enumerate().for_each(|(i, o)| {
            if let Some(loc) = &self.node_loc[i] {
                self.geometry.interpolate(loc, values, ncomp, o);
            }
        });
        out
    }

    /// Sample a background field at `y`. Multilinear interpolation when the
    /// whole cell is located; otherwise a weighted least-squares affine fit
    /// over the located nodes of the surrounding block (grown until the fit
    /// is determined), so affine fields are reproduced exactly up to the
    /// boundary.
    pub fn sample(&self, field: &[f64], ncomp: usize, y: [f64; 3], out: &mut [f64]) {
        let bg = self.background();
        let d = bg.dim();
        let h = bg.h()[0];
        let o = bg.origin();
        let n = bg.n();
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for k in 0..d {
            let s = (y[k] - o[k]) / h;
            let i = (s.floor().max(0.0) as usize).min(n[k] - 2);
            base[k] = i;
            t[k] = (s - i as f64).clamp(0.0, 1.0);
        }
        for v in out.iter_mut().take(ncomp) {
            *v = 0.0;
        }
        let mut wsum = 0.0;
        let mut complete = true;
        for q in 0..(1usize << d) {
            let mut ijk = base;
            let mut w = 1.0;
            for k in 0..d {
                if q & (1 << k) != 0 {
                    ijk[k] += 1;
                    w *= t[k];
                } else {
                    w *= 1.0 - t[k];
                }
            }
            let node = bg.index(ijk);
            if self.node_loc[node].is_none() {
                complete = false;
                continue;
            }
            wsum += w;
            for c in 0..ncomp {
                out[c] += w * field[node * ncomp + c];
            }
        }
        if complete {
            return;
        }
        for ring in 1..=3 {
            if self.affine_fit(field, ncomp, y, base, ring, out) {
                return;
            }
        }
        if wsum > 0.0 {
            for v in out.iter_mut().take(ncomp) {
                *v /= wsum;
            }
        }
    }

    fn affine_fit(&self, field: &[f64], ncomp: usize, y: [f64; 3], base: [usize; 3], ring: usize, out: &mut [f64]) -> bool {
        let bg = self.background();
        let d = bg.dim();
        let h = bg.h()[0];
        let n = bg.n();
        let m = d + 1;
        let mut a = [0.0; 16];
        let mut b = vec![0.0; m * ncomp];
        let mut count = 0;
        let span = |k: usize| -> std::ops::RangeInclusive<usize> {
            if k < d {
                base[k].saturating_sub(ring)..=(base[k] + 1 + ring).min(n[k] - 1)
            } else {
                0..=0
            }
        };
        for i in span(0) {
            for j in span(1) {
                for l in span(2) {
                    let node = bg.index([i, j, l]);
                    if self.node_loc[node].is_none() {
                        continue;
                    }
                    let x = bg.coords(node);
                    let mut row = [1.0; 4];
                    let mut r2 = 0.0;
                    for k in 0..d {
                        row[k + 1] = (x[k] - y[k]) / h;
                        r2 += row[k + 1] * row[k + 1];
                    }
                    let w = 1.0 / (1.0 + r2);
                    for p in 0..m {
                        for q in 0..m {
                            a[p * m + q] += w * row[p] * row[q];
                        }
                        for c in 0..ncomp {
                            b[p * ncomp + c] += w * row[p] * field[node * ncomp + c];
                        }
                    }
                    count += 1;
                }
            }
        }
        if count < m || !linalg::solve_small(&mut a[..m * m], &mut b, m, ncomp, 1e-8) {
            return false;
        }
        out[..ncomp].copy_from_slice(&b[..ncomp]);
        true
    }

    /// Eulerian quadrature of a function of the located reference position.
    pub fn integrate(&self, mut f: impl FnMut(&Location, usize) -> f64) -> f64 {
        self.quadrature.iter().map(|(i, w, l)| w * f(l, *i)).sum()
    }
}

/// Eulerian magnetization `M = M~ / det` on the deformed body, 0 outside.
pub fn push_forward_magnetization(mtilde: &Field, state: &KinematicState, map: &EulerianMap) -> Result<Field> {
    let d = state.dim;
    if mtilde.data.len() != state.det.len() * d {
        return Err(contract("magnetization does not match the kinematic state"));
    }
    let u: Vec<f64> = (0..state.det.len())
        .flat_map(|i| (0..d).map(move |c| (i, c)))
        .map(|(i, c)| mtilde.data[i * d + c] / state.det[i])
        .collect();
    let data = map.rasterize(&u, d);
    Field::from_data(map.background(), FieldRank::Vector, data)
}

/// `M~(X) = det(grad eta(X)) M(eta(X))` sampled at the reference nodes.
pub fn pull_back_magnetization(m: &Field, eta: &Field, state: &KinematicState, map: &EulerianMap) -> Result<Field> {
    let d = state.dim;
    m.conforms(map.background())?;
    let n = state.det.len();
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
        let mut y = [0.0; 3];
        y[..d].copy_from_slice(&eta.data[i * d..i * d + d]);
        map.sample(&m.data, d, y, o);
        for v in o.iter_mut() {
            *v *= state.det[i];
        }
    });
    Ok(Field { rank: FieldRank::Vector, dim: d, data: out, units: String::new() })
}

/// Eulerian velocity `v(eta(X)) = d eta / dt (X)` on the background grid.
pub fn eulerian_velocity(rate: &Field, map: &EulerianMap) -> Result<Field> {
    let d = rate.dim;
    let data = map.rasterize(&rate.data, d);
    Field::from_data(map.background(), FieldRank::Vector, data)
}

/// `D_t M = (M^k - M^{k-1}) / dt + (v . grad) M^k + (div v) M^k` with
/// finite differences on the background grid.
pub fn material_derivative(m_prev: &Field, m_cur: &Field, v: &Field, dt: f64, bg: &GridSpec) -> Result<Field> {
    m_prev.conforms(bg)?;
    m_cur.conforms(bg)?;
    v.conforms(bg)?;
    if !(dt > 0.0) {
        return Err(contract("time step must be positive"));
    }
    let d = bg.dim();
    let ops = DiffOps::new(bg)?;
    let gm = ops.gradient(&m_cur.data, d);
    let gv = ops.gradient(&v.data, d);
    let mut out = vec![0.0; bg.len() * d];
    for i in 0..bg.len() {
        let div: f64 = (0..d).map(|k| gv[i * d * d + k * d + k]).sum();
        for c in 0..d {
            let mut s = (m_cur.data[i * d + c] - m_prev.data[i * d + c]) / dt;
            for k in 0..d {
                s += v.data[i * d + k] * gm[i * d * d + c * d + k];
            }
            s += div * m_cur.data[i * d + c];
            out[i * d + c] = s;
        }
    }
    Field::from_data(bg, FieldRank::Vector, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Face, Side};

    fn cube(n: usize) -> GridSpec {
        GridSpec::unit(3, n, &[Face { axis: 2, side: Side::Low }]).unwrap()
    }

    #[test]
    fn identity_state() {
        let g = cube(4);
        let eta = Field::vector_from_fn(&g, |x| x);
        let s = build_kinematics(&eta, &g).unwrap();
        assert!((s.min_det - 1.0).abs() < 1e-12);
        for i in 0..g.len() {
            for r in 0..3 {
                for c in 0..3 {
                    let e = if r == c { 1.0 } else { 0.0 };
                    assert!((s.cof[i * 9 + r * 3 + c] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn doubled_state() {
        let g = cube(4);
        let eta = Field::vector_from_fn(&g, |x| [2.0 * x[0], 2.0 * x[1], 2.0 * x[2]]);
        let s = build_kinematics(&eta, &g).unwrap();
        for i in 0..g.len() {
            assert!((s.det[i] - 8.0).abs() < 1e-11);
            assert!((s.inv[i * 9] - 0.5).abs() < 1e-12);
            assert!((s.cof[i * 9 + 4] - 4.0).abs() < 1e-11);
        }
    }

    #[test]
    fn reflection_flagged() {
        let g = cube(4);
        let eta = Field::vector_from_fn(&g, |x| [x[0], x[1], -x[2]]);
        let s = build_kinematics(&eta, &g).unwrap();
        assert!((s.min_det + 1.0).abs() < 1e-12);
        assert!(!s.orientation_preserving());
    }

    #[test]
    fn margin_scales() {
        let g = cube(9);
        let id = Field::vector_from_fn(&g, |x| x);
        let (m1, ok) = boundary_injectivity_margin(&id, &g, None).unwrap();
        assert!(ok && m1 >= 4.0 * 0.125 - 1e-12);
        let dbl = Field::vector_from_fn(&g, |x| [2.0 * x[0], 2.0 * x[1], 2.0 * x[2]]);
        let (m2, _) = boundary_injectivity_margin(&dbl, &g, None).unwrap();
        assert!((m2 - 2.0 * m1).abs() < 1e-12);
    }

    #[test]
    fn pinch_has_zero_margin() {
        let g = cube(9);
        // faces X2 = 0 and X2 = 1 both land on the plane x2 = 0
        let eta = Field::vector_from_fn(&g, |x| [x[0], 4.0 * x[1] * (1.0 - x[1]), x[2]]);
        let (m, ok) = boundary_injectivity_margin(&eta, &g, None).unwrap();
        assert_eq!(m, 0.0);
        assert!(!ok);
    }

    #[test]
    fn push_forward_doubled() {
        let g = cube(5);
        let eta = Field::vector_from_fn(&g, |x| [2.0 * x[0], 2.0 * x[1], 2.0 * x[2]]);
        let s = build_kinematics(&eta, &g).unwrap();
        let map = EulerianMap::new(&g, &eta, &s, 1).unwrap();
        let m = [0.3, -0.2, 0.9];
        let mt = Field::vector_from_fn(&g, |_| [8.0 * m[0], 8.0 * m[1], 8.0 * m[2]]);
        let mm = push_forward_magnetization(&mt, &s, &map).unwrap();
        let bg = map.background();
        for i in 0..bg.len() {
            let v = mm.node(i);
            if map.node_loc[i].is_some() {
                for c in 0..3 {
                    assert!((v[c] - m[c]).abs() < 1e-12);
                }
            } else {
                assert!(v.iter().all(|x| *x == 0.0));
            }
        }
        let back = pull_back_magnetization(&mm, &eta, &s, &map).unwrap();
        for (a, b) in back.data.iter().zip(&mt.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_cases() {
        let g = cube(5);
        let eta = Field::vector_from_fn(&g, |x| [2.0 * x[0], 2.0 * x[1], 2.0 * x[2]]);
        let s = build_kinematics(&eta, &g).unwrap();
        let map = EulerianMap::new(&g, &eta, &s, 1).unwrap();
        let rate = Field::vector_from_fn(&g, |x| x);
        let v = eulerian_velocity(&rate, &map).unwrap();
        let bg = map.background();
        for i in 0..bg.len() {
            if map.node_loc[i].is_some() {
                let x = bg.coords(i);
                for c in 0..3 {
                    assert!((v.node(i)[c] - 0.5 * x[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn material_derivative_divergence_only() {
        let bg = GridSpec::background(3, [6, 6, 6], 0.2, [0.0; 3]).unwrap();
        let m = Field::vector_from_fn(&bg, |_| [1.0, 2.0, -1.0]);
        let v = Field::vector_from_fn(&bg, |x| x);
        let dm = material_derivative(&m, &m, &v, 0.1, &bg).unwrap();
        for i in 0..bg.len() {
            let r = dm.node(i);
            assert!((r[0] - 3.0).abs() < 1e-12 && (r[1] - 6.0).abs() < 1e-12 && (r[2] + 3.0).abs() < 1e-12);
        }
        let zero = Field::zeros(&bg, FieldRank::Vector);
        let dm = material_derivative(&m, &m, &zero, 0.1, &bg).unwrap();
        assert!(dm.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cn_identity_and_scaling() {
        let g = cube(5);
        for scale in [1.0, 2.0] {
            let eta = Field::vector_from_fn(&g, |x| [scale * x[0], scale * x[1], scale * x[2]]);
            let s = build_kinematics(&eta, &g).unwrap();
            let r = ciarlet_necas_residual(&eta, &s, &g, 2).unwrap();
            assert!(r.ok);
            assert!((r.image_volume - scale.powi(3)).abs() < 1e-10);
        }
    }
}
