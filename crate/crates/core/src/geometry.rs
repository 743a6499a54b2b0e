//! Image geometry of a discrete deformation on an Eulerian background grid.
//!
//! The deformed body is represented by the piecewise-linear map on a Kuhn
//! triangulation of the reference cells (6 tetrahedra per cube, 2 triangles
//! per square). Each simplex is clipped exactly against the dual cells of the
//! background nodes, giving per-node covered volume and centroid. Point
//! location inside the deformed body uses the multilinear cell map and
//! Newton's method.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::linalg;

const NEWTON_ITERS: usize = 20;
/// Slack on local coordinates when deciding whether a point lies in a cell.
const XI_TOL: f64 = 1e-9;

/// Background grid aligned with the reference lattice, spacing `h_ref / refine`,
/// covering the bounding box of `eta` plus `margin` cells on every side.
pub fn background_grid(reference: &GridSpec, eta: &[f64], refine: usize, margin: usize) -> Result<GridSpec> {
    let d = reference.dim();
    if refine == 0 {
        return Err(Error::Config("background refinement must be >= 1".into()));
    }
    let h = reference.min_spacing() / refine as f64;
    let (lo, hi) = bbox(eta, d);
    if !lo.iter().chain(hi.iter()).all(|v| v.is_finite()) {
        return Err(Error::Admissibility("deformation has non-finite values".into()));
    }
    let mut n = [1usize; 3];
    let mut origin = [0.0; 3];
    let o_ref = reference.origin();
    for k in 0..d {
        let i0 = ((lo[k] - o_ref[k]) / h).floor() as i64 - margin as i64;
        let i1 = ((hi[k] - o_ref[k]) / h).ceil() as i64 + margin as i64;
        origin[k] = o_ref[k] + i0 as f64 * h;
        n[k] = ((i1 - i0) as usize + 1).max(3);
    }
    GridSpec::background(d, n, h, origin)
}

pub fn bbox(points: &[f64], d: usize) -> ([f64; 3], [f64; 3]) {
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for k in 0..d {
        lo[k] = f64::INFINITY;
        hi[k] = f64::NEG_INFINITY;
    }
    for p in points.chunks_exact(d) {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Kuhn simplices of a unit cell as lists of corner bit-masks.
pub fn kuhn_simplices(d: usize) -> Vec<Vec<usize>> {
    if d == 2 {
        return vec![vec![0, 1, 3], vec![0, 2, 3]];
    }
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms
        .iter()
        .map(|p| {
            let a = 1 << p[0];
            let b = a | (1 << p[1]);
            vec![0, a, b, 7]
        })
        .collect()
}

/// Result of locating a point in the deformed body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub cell: usize,
    pub xi: [f64; 3],
    /// True when the local coordinates lie in the closed unit box (up to slack).
    pub inside: bool,
}

/// Covered volumes and point location for one deformation.
#[derive(Clone, Debug)]
pub struct ImageGeometry {
    pub reference: GridSpec,
    pub background: GridSpec,
    /// Covered volume per background node, clamped to the dual-cell volume.
    pub coverage: Vec<f64>,
    /// Unclamped covered volume (sum over simplices).
    pub raw_coverage: Vec<f64>,
    /// Centroid of the covered part of each dual cell.
    pub centroid: Vec<[f64; 3]>,
    eta: Vec<f64>,
    buckets: Vec<Vec<u32>>,
}

impl ImageGeometry {
    pub fn build(reference: &GridSpec, eta: &[f64], background: GridSpec) -> Result<Self> {
        let d = reference.dim();
        reference.check_field(eta, d, "deformation")?;
        if background.dim() != d {
            return Err(crate::error::contract("background grid dimension mismatch"));
        }
        let simplices = kuhn_simplices(d);
        let bg = &background;
        let contribs: Vec<Vec<(usize, f64, [f64; 3])>> = (0..reference.cell_count())
            .into_par_iter()
            .map(|c| {
                let (corners, nc) = reference.cell_corners(c);
                let mut pts = [[0.0; 3]; 8];
                for q in 0..nc {
                    for k in 0..d {
                        pts[q][k] = eta[corners[q] * d + k];
                    }
                }
                let mut out = Vec::new();
                for s in &simplices {
                    let verts: Vec<[f64; 3]> = s.iter().map(|&q| pts[q]).collect();
                    clip_simplex_to_grid(bg, &verts, &mut out);
                }
                out
            })
            .collect();
        let len = bg.len();
        let mut raw = vec![0.0; len];
        let mut moment = vec![[0.0; 3]; len];
        for list in &contribs {
            for &(node, v, m) in list {
                raw[node] += v;
                for k in 0..3 {
                    moment[node][k] += m[k];
                }
            }
        }
        let vcell = bg.cell_volume();
        let coverage: Vec<f64> = raw.iter().map(|&v| v.min(vcell)).collect();
        let centroid = (0..len)
            .map(|i| {
                if raw[i] > 0.0 {
                    let mut c = [0.0; 3];
                    for k in 0..d {
                        c[k] = moment[i][k] / raw[i];
                    }
                    c
                } else {
                    bg.coords(i)
                }
            })
            .collect();
        let buckets = build_buckets(reference, eta, bg);
        Ok(ImageGeometry {
            reference: reference.clone(),
            background,
            coverage,
            raw_coverage: raw,
            centroid,
            eta: eta.to_vec(),
            buckets,
        })
    }

    /// Measure of the deformed body (overlaps inside a dual cell count once).
    pub fn image_volume(&self) -> f64 {
        self.coverage.iter().sum()
    }

    /// Locate `x` in the deformed body: a cell whose multilinear image
    /// contains `x` if one exists, otherwise the closest candidate (clamped).
    pub fn locate(&self, x: [f64; 3]) -> Option<Location> {
        let bg = &self.background;
        let d = bg.dim();
        let h = bg.h()[0];
        let o = bg.origin();
        let n = bg.n();
        let mut ijk = [0usize; 3];
        for k in 0..d {
            let i = ((x[k] - o[k]) / h).round();
            if i < 0.0 || i > (n[k] - 1) as f64 || !i.is_finite() {
                return None;
            }
            ijk[k] = i as usize;
        }
        let node = bg.index(ijk);
        let href = self.reference.min_spacing();
        let mut best: Option<(f64, Location)> = None;
        for &c in &self.buckets[node] {
            let c = c as usize;
            let corners = self.cell_points(c);
            if let Some((xi, out)) = newton_local(&corners, d, x, href) {
                if out <= XI_TOL {
                    return Some(Location { cell: c, xi, inside: true });
                }
                if best.as_ref().map_or(true, |(b, _)| out < *b) {
                    let mut xc = xi;
                    for v in xc.iter_mut().take(d) {
                        *v = v.clamp(0.0, 1.0);
                    }
                    best = Some((out, Location { cell: c, xi: xc, inside: false }));
                }
            }
        }
        best.map(|(_, l)| l)
    }

    fn cell_points(&self, c: usize) -> [[f64; 3]; 8] {
        let d = self.reference.dim();
        let (corners, nc) = self.reference.cell_corners(c);
        let mut pts = [[0.0; 3]; 8];
        for q in 0..nc {
            for k in 0..d {
                pts[q][k] = self.eta[corners[q] * d + k];
            }
        }
        pts
    }

    /// Multilinear interpolation of a reference nodal field at a location.
    pub fn interpolate(&self, loc: &Location, field: &[f64], ncomp: usize, out: &mut [f64]) {
        interpolate_in_cell(&self.reference, loc.cell, &loc.xi, field, ncomp, out);
    }
}

/// Multilinear interpolation inside reference cell `cell` at local `xi`.
pub fn interpolate_in_cell(grid: &GridSpec, cell: usize, xi: &[f64; 3], field: &[f64], ncomp: usize, out: &mut [f64]) {
    let d = grid.dim();
    let (corners, nc) = grid.cell_corners(cell);
    for o in out.iter_mut().take(ncomp) {
        *o = 0.0;
    }
    for (q, &node) in corners.iter().enumerate().take(nc) {
        let w = shape(q, xi, d);
        if w == 0.0 {
            continue;
        }
        for c in 0..ncomp {
            out[c] += w * field[node * ncomp + c];
        }
    }
}

#[inline]
fn shape(corner: usize, xi: &[f64; 3], d: usize) -> f64 {
    let mut w = 1.0;
    for k in 0..d {
        w *= if corner & (1 << k) != 0 { xi[k] } else { 1.0 - xi[k] };
    }
    w
}

/// Newton iteration for the multilinear cell map. Returns the local
/// coordinates and their distance outside the unit box, or `None` if the
/// iteration broke down.
fn newton_local(pts: &[[f64; 3]; 8], d: usize, x: [f64; 3], h: f64) -> Option<([f64; 3], f64)> {
    let nc = 1 << d;
    let mut xi = [0.5; 3];
    if d == 2 {
        xi[2] = 0.0;
    }
    let tol = 1e-12 * h;
    for _ in 0..NEWTON_ITERS {
        let mut p = [0.0; 3];
        let mut jac = [0.0; 9];
        for (q, pt) in pts.iter().enumerate().take(nc) {
            let w = shape(q, &xi, d);
            for r in 0..d {
                p[r] += w * pt[r];
            }
            for a in 0..d {
                // d shape / d xi_a
                let mut dw = if q & (1 << a) != 0 { 1.0 } else { -1.0 };
                for k in 0..d {
                    if k != a {
                        dw *= if q & (1 << k) != 0 { xi[k] } else { 1.0 - xi[k] };
                    }
                }
                for r in 0..d {
                    jac[r * d + a] += dw * pt[r];
                }
            }
        }
        let mut res = [0.0; 3];
        for r in 0..d {
            res[r] = p[r] - x[r];
        }
        if linalg::norm_sq(&res[..d]).sqrt() <= tol {
            break;
        }
        let mut inv = [0.0; 9];
        let det = linalg::inverse(&jac[..d * d], d, &mut inv[..d * d]);
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let mut step = [0.0; 3];
        linalg::matvec(&inv[..d * d], &res[..d], d, &mut step[..d]);
        for k in 0..d {
            xi[k] -= step[k];
        }
        if !xi.iter().all(|v| v.is_finite()) || xi[..d].iter().any(|v| v.abs() > 1e3) {
            return None;
        }
    }
    let out = xi[..d].iter().map(|&v| (-v).max(v - 1.0).max(0.0)).fold(0.0, f64::max);
    Some((xi, out))
}

fn build_buckets(reference: &GridSpec, eta: &[f64], bg: &GridSpec) -> Vec<Vec<u32>> {
    let d = reference.dim();
    let mut buckets = vec![Vec::new(); bg.len()];
    let pad = 1e-9 * reference.min_spacing();
    for c in 0..reference.cell_count() {
        let (corners, nc) = reference.cell_corners(c);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..d {
            lo[k] = f64::INFINITY;
            hi[k] = f64::NEG_INFINITY;
            for &node in corners.iter().take(nc) {
                lo[k] = lo[k].min(eta[node * d + k]);
                hi[k] = hi[k].max(eta[node * d + k]);
            }
            lo[k] -= pad;
            hi[k] += pad;
        }
        if let Some(range) = dual_range(bg, &lo, &hi) {
            for_each_in_range(bg, &range, |node| buckets[node].push(c as u32));
        }
    }
    buckets
}

/// Background nodes whose dual cells meet the box `[lo, hi]`.
fn dual_range(bg: &GridSpec, lo: &[f64; 3], hi: &[f64; 3]) -> Option<[(usize, usize); 3]> {
    let d = bg.dim();
    let h = bg.h()[0];
    let o = bg.origin();
    let n = bg.n();
    let mut r = [(0usize, 0usize); 3];
    for k in 0..d {
        let a = ((lo[k] - o[k]) / h - 0.5).ceil();
        let b = ((hi[k] - o[k]) / h + 0.5).floor();
        let a = a.max(0.0);
        let b = b.min((n[k] - 1) as f64);
        if !(a <= b) {
            return None;
        }
        r[k] = (a as usize, b as usize);
    }
    Some(r)
}

fn for_each_in_range(bg: &GridSpec, r: &[(usize, usize); 3], mut f: impl FnMut(usize)) {
    let d = bg.dim();
    let r2 = if d == 3 { r[2] } else { (0, 0) };
    for i in r[0].0..=r[0].1 {
        for j in r[1].0..=r[1].1 {
            for k in r2.0..=r2.1 {
                f(bg.index([i, j, k]));
            }
        }
    }
}

fn clip_simplex_to_grid(bg: &GridSpec, verts: &[[f64; 3]], out: &mut Vec<(usize, f64, [f64; 3])>) {
    let d = bg.dim();
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for k in 0..d {
        lo[k] = verts.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
        hi[k] = verts.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
    }
    let Some(range) = dual_range(bg, &lo, &hi) else { return };
    let h = bg.h()[0];
    for_each_in_range(bg, &range, |node| {
        let x = bg.coords(node);
        let mut blo = [0.0; 3];
        let mut bhi = [0.0; 3];
        for k in 0..d {
            blo[k] = x[k] - 0.5 * h;
            bhi[k] = x[k] + 0.5 * h;
        }
        let (v, m) = if d == 2 { clip_triangle_box(verts, &blo, &bhi) } else { clip_tet_box(verts, &blo, &bhi) };
        if v > 0.0 {
            out.push((node, v, m));
        }
    });
}

/// Area and first moment of a triangle clipped to an axis-aligned rectangle.
pub fn clip_triangle_box(tri: &[[f64; 3]], lo: &[f64; 3], hi: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut poly: Vec<[f64; 3]> = tri.to_vec();
    for axis in 0..2 {
        for (bound, sign) in [(lo[axis], -1.0), (hi[axis], 1.0)] {
            poly = clip_polygon(&poly, axis, bound, sign);
            if poly.len() < 3 {
                return (0.0, [0.0; 3]);
            }
        }
    }
    // shoelace
    let mut a2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let cr = p[0] * q[1] - q[0] * p[1];
        a2 += cr;
        cx += (p[0] + q[0]) * cr;
        cy += (p[1] + q[1]) * cr;
    }
    if a2 == 0.0 {
        return (0.0, [0.0; 3]);
    }
    let area = 0.5 * a2.abs();
    // moment = area * centroid, centroid = (cx, cy) / (3 a2)
    let s = area / (3.0 * a2);
    (area, [cx * s, cy * s, 0.0])
}

/// Sutherland-Hodgman step keeping `sign * (p[axis] - bound) <= 0`.
fn clip_polygon(poly: &[[f64; 3]], axis: usize, bound: f64, sign: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let dp = sign * (p[axis] - bound);
        let dq = sign * (q[axis] - bound);
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
            let t = dp / (dp - dq);
            let mut r = [0.0; 3];
            for k in 0..3 {
                r[k] = p[k] + t * (q[k] - p[k]);
            }
            r[axis] = bound;
            out.push(r);
        }
    }
    out
}

/// Volume and first moment of a tetrahedron clipped to an axis-aligned box.
pub fn clip_tet_box(tet: &[[f64; 3]], lo: &[f64; 3], hi: &[f64; 3]) -> (f64, [f64; 3]) {
    let (a, b, c, e) = (tet[0], tet[1], tet[2], tet[3]);
    // fast path: tetrahedron entirely inside
    let inside = tet.iter().all(|p| (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]));
    if inside {
        let v = tet_volume(&a, &b, &c, &e);
        let mut m = [0.0; 3];
        for k in 0..3 {
            m[k] = v * (a[k] + b[k] + c[k] + e[k]) * 0.25;
        }
        return (v, m);
    }
    let mut faces: Vec<Vec<[f64; 3]>> = vec![vec![a, b, c], vec![a, b, e], vec![a, c, e], vec![b, c, e]];
    for axis in 0..3 {
        for (bound, sign) in [(lo[axis], -1.0), (hi[axis], 1.0)] {
            let mut cap: Vec<[f64; 3]> = Vec::new();
            let mut next = Vec::with_capacity(faces.len() + 1);
            for f in &faces {
                let clipped = clip_polygon(f, axis, bound, sign);
                for p in &clipped {
                    if p[axis] == bound {
                        cap.push(*p);
                    }
                }
                if clipped.len() >= 3 {
                    next.push(clipped);
                }
            }
            if next.is_empty() {
                return (0.0, [0.0; 3]);
            }
            if cap.len() >= 3 {
                next.push(order_cap(cap, axis));
            }
            faces = next;
        }
    }
    polyhedron_volume(&faces)
}

fn order_cap(mut pts: Vec<[f64; 3]>, axis: usize) -> Vec<[f64; 3]> {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let n = pts.len() as f64;
    let cu = pts.iter().map(|p| p[u]).sum::<f64>() / n;
    let cv = pts.iter().map(|p| p[v]).sum::<f64>() / n;
    pts.sort_by(|p, q| {
        let ap = (p[v] - cv).atan2(p[u] - cu);
        let aq = (q[v] - cv).atan2(q[u] - cu);
        ap.partial_cmp(&aq).unwrap_or(std::cmp::Ordering::Equal)
    });
    pts
}

fn tet_volume(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3], e: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [e[0] - a[0], e[1] - a[1], e[2] - a[2]];
    let det = u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0]) + u[2] * (v[0] * w[1] - v[1] * w[0]);
    det.abs() / 6.0
}

/// Volume and first moment of a convex polyhedron given by its face polygons.
fn polyhedron_volume(faces: &[Vec<[f64; 3]>]) -> (f64, [f64; 3]) {
    let mut p0 = [0.0; 3];
    let mut cnt = 0.0;
    for f in faces {
        for p in f {
            for k in 0..3 {
                p0[k] += p[k];
            }
            cnt += 1.0;
        }
    }
    for v in p0.iter_mut() {
        *v /= cnt;
    }
    let mut vol = 0.0;
    let mut m = [0.0; 3];
    for f in faces {
        for i in 1..f.len().saturating_sub(1) {
            let v = tet_volume(&p0, &f[0], &f[i], &f[i + 1]);
            vol += v;
            for k in 0..3 {
                m[k] += v * (p0[k] + f[0][k] + f[i][k] + f[i + 1][k]) * 0.25;
            }
        }
    }
    (vol, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Face, Side};

    #[test]
    fn tet_inside_box_keeps_volume() {
        let t = [[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]];
        let (v, _) = clip_tet_box(&t, &[0.0; 3], &[1.0; 3]);
        assert!((v - 0.8f64.powi(3) / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unit_tet_split_in_half_space() {
        // unit corner tet cut at x = 0.5: the part with x <= 0.5 has volume 1/6 - (0.5^3)/6
        let t = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (v, _) = clip_tet_box(&t, &[-1.0; 3], &[0.5, 2.0, 2.0]);
        assert!((v - (1.0 / 6.0 - 0.125 / 6.0)).abs() < 1e-14, "{v}");
        let (w, _) = clip_tet_box(&t, &[0.5, -1.0, -1.0], &[2.0; 3]);
        assert!((v + w - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn triangle_clip() {
        let t = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let (a, m) = clip_triangle_box(&t, &[0.0; 3], &[1.0, 1.0, 0.0]);
        assert!((a - 1.0).abs() < 1e-15);
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_coverage_is_trapezoid_weights() {
        let g = GridSpec::unit(3, 5, &[Face { axis: 2, side: Side::Low }]).unwrap();
        let eta: Vec<f64> = (0..g.len()).flat_map(|i| g.coords(i)).collect();
        let bg = background_grid(&g, &eta, 1, 2).unwrap();
        let geo = ImageGeometry::build(&g, &eta, bg).unwrap();
        assert!((geo.image_volume() - 1.0).abs() < 1e-13);
        let w = g.quadrature_weights();
        for i in 0..g.len() {
            let x = g.coords(i);
            let loc = geo.locate(x).unwrap();
            assert!(loc.inside);
            let bi = {
                let bgr = &geo.background;
                let o = bgr.origin();
                let h = bgr.h()[0];
                bgr.index([
                    ((x[0] - o[0]) / h).round() as usize,
                    ((x[1] - o[1]) / h).round() as usize,
                    ((x[2] - o[2]) / h).round() as usize,
                ])
            };
            assert!((geo.coverage[bi] - w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn scaled_volume_2d() {
        let g = GridSpec::unit(2, 4, &[Face { axis: 1, side: Side::Low }]).unwrap();
        let eta: Vec<f64> = (0..g.len()).flat_map(|i| {
            let x = g.coords(i);
            [2.0 * x[0] + 0.3 * x[1], 2.0 * x[1]]
        }).collect();
        let bg = background_grid(&g, &eta, 3, 1).unwrap();
        let geo = ImageGeometry::build(&g, &eta, bg).unwrap();
        assert!((geo.image_volume() - 4.0).abs() < 1e-12);
    }
}
