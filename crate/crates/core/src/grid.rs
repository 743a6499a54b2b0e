//! Structured tensor-product grids, nodal fields and finite-difference
//! operators.
//!
//! Nodes are stored row-major with the last axis fastest. In two dimensions
//! the third axis is degenerate (`n[2] == 1`) so the same flat indexing works
//! for both cases.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Role of a grid node with respect to the boundary partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRole {
    Interior,
    /// Boundary node on the Dirichlet part P (deformation frozen).
    Dirichlet,
    /// Boundary node on the free part N.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Low,
    High,
}

/// One face of the box domain, e.g. `{axis: 2, side: Low}` is `X_3 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    pub fn parse(s: &str) -> Result<Face> {
        // "x1-", "x3+", ...
        let b = s.trim().as_bytes();
        if b.len() != 3 || b[0] != b'x' || !(b'1'..=b'3').contains(&b[1]) {
            return Err(Error::Config(format!("bad face label {s:?}; expected e.g. \"x3-\"")));
        }
        let side = match b[2] {
            b'-' => Side::Low,
            b'+' => Side::High,
            _ => return Err(Error::Config(format!("bad face side in {s:?}"))),
        };
        Ok(Face { axis: (b[1] - b'1') as usize, side })
    }

    /// Every face of a `dim`-dimensional box.
    pub fn all(dim: usize) -> Vec<Face> {
        (0..dim).flat_map(|axis| [Face { axis, side: Side::Low }, Face { axis, side: Side::High }]).collect()
    }

    pub fn label(&self) -> String {
        format!("x{}{}", self.axis + 1, if self.side == Side::Low { '-' } else { '+' })
    }
}

/// Geometry and boundary labelling of a structured grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    n: [usize; 3],
    h: [f64; 3],
    origin: [f64; 3],
    roles: Vec<NodeRole>,
}

impl GridSpec {
    /// Reference grid on the unit square/cube with `n` nodes per axis and the
    /// listed faces forming the Dirichlet part P.
    pub fn unit(dim: usize, n: usize, dirichlet: &[Face]) -> Result<Self> {
        Self::reference(dim, [n; 3], [1.0; 3], dirichlet)
    }

    /// Reference grid on the box `[0, extent]` with the listed Dirichlet faces.
    pub fn reference(dim: usize, n: [usize; 3], extent: [f64; 3], dirichlet: &[Face]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedGrid(format!("dimension {dim}")));
        }
        let mut nn = [1usize; 3];
        let mut h = [1.0; 3];
        for k in 0..dim {
            if n[k] < 3 {
                return Err(Error::UnsupportedGrid(format!("need >= 3 nodes per axis, got {}", n[k])));
            }
            if !(extent[k] > 0.0) {
                return Err(Error::Config("domain extent must be positive".into()));
            }
            nn[k] = n[k];
            h[k] = extent[k] / (n[k] - 1) as f64;
        }
        for f in dirichlet {
            if f.axis >= dim {
                return Err(Error::Config(format!("Dirichlet face on axis {} in {dim}D", f.axis + 1)));
            }
        }
        let mut g = GridSpec { dim, n: nn, h, origin: [0.0; 3], roles: Vec::new() };
        let mut roles = vec![NodeRole::Interior; g.len()];
        for (i, role) in roles.iter_mut().enumerate() {
            let ijk = g.multi_index(i);
            let on_boundary = (0..dim).any(|k| ijk[k] == 0 || ijk[k] == nn[k] - 1);
            if !on_boundary {
                continue;
            }
            let on_p = dirichlet.iter().any(|f| match f.side {
                Side::Low => ijk[f.axis] == 0,
                Side::High => ijk[f.axis] == nn[f.axis] - 1,
            });
            *role = if on_p { NodeRole::Dirichlet } else { NodeRole::Free };
        }
        if !roles.iter().any(|r| *r == NodeRole::Dirichlet) {
            return Err(Error::Config("Dirichlet part P must be nonempty".into()));
        }
        g.roles = roles;
        Ok(g)
    }

    /// A background (Eulerian) grid: no boundary partition, arbitrary origin.
    pub fn background(dim: usize, n: [usize; 3], h: f64, origin: [f64; 3]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedGrid(format!("dimension {dim}")));
        }
        if !(h > 0.0) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        let mut nn = [1usize; 3];
        let mut hh = [1.0; 3];
        let mut o = [0.0; 3];
        for k in 0..dim {
            if n[k] < 3 {
                return Err(Error::UnsupportedGrid(format!("need >= 3 nodes per axis, got {}", n[k])));
            }
            nn[k] = n[k];
            hh[k] = h;
            o[k] = origin[k];
        }
        let len = nn.iter().product();
        Ok(GridSpec { dim, n: nn, h: hh, origin: o, roles: vec![NodeRole::Interior; len] })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn n(&self) -> [usize; 3] {
        self.n
    }
    #[inline]
    pub fn h(&self) -> [f64; 3] {
        self.h
    }
    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    pub fn min_spacing(&self) -> f64 {
        self.h[..self.dim].iter().cloned().fold(f64::INFINITY, f64::min)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn cell_volume(&self) -> f64 {
        self.h[..self.dim].iter().product()
    }
    /// Measure of the box covered by the grid.
    pub fn domain_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.h[k] * (self.n[k] - 1) as f64).product()
    }
    pub fn role(&self, i: usize) -> NodeRole {
        self.roles[i]
    }
    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }
    pub fn is_dirichlet(&self, i: usize) -> bool {
        self.roles[i] == NodeRole::Dirichlet
    }
    pub fn is_boundary(&self, i: usize) -> bool {
        self.roles[i] != NodeRole::Interior
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.n[1] * self.n[2],
            1 => self.n[2],
            _ => 1,
        }
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        (ijk[0] * self.n[1] + ijk[1]) * self.n[2] + ijk[2]
    }

    #[inline]
    pub fn multi_index(&self, i: usize) -> [usize; 3] {
        let k = i % self.n[2];
        let j = (i / self.n[2]) % self.n[1];
        let l = i / (self.n[1] * self.n[2]);
        [l, j, k]
    }

    /// Physical coordinates of node `i` (unused axes are 0).
    #[inline]
    pub fn coords(&self, i: usize) -> [f64; 3] {
        let ijk = self.multi_index(i);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.origin[k] + ijk[k] as f64 * self.h[k];
        }
        x
    }

    /// Trapezoidal product-rule weights.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let ijk = self.multi_index(i);
                (0..self.dim)
                    .map(|k| {
                        if ijk[k] == 0 || ijk[k] == self.n[k] - 1 {
                            0.5 * self.h[k]
                        } else {
                            self.h[k]
                        }
                    })
                    .product()
            })
            .collect()
    }

    /// Number of cells (products of `n-1`).
    pub fn cell_count(&self) -> usize {
        (0..self.dim).map(|k| self.n[k] - 1).product()
    }

    /// Lowest-corner node index of cell `c` (cells enumerated row-major).
    pub fn cell_origin_node(&self, c: usize) -> usize {
        let mut cn = [1usize; 3];
        for k in 0..self.dim {
            cn[k] = self.n[k] - 1;
        }
        let k2 = c % cn[2];
        let k1 = (c / cn[2]) % cn[1];
        let k0 = c / (cn[1] * cn[2]);
        let mut ijk = [k0, k1, k2];
        for k in self.dim..3 {
            ijk[k] = 0;
        }
        self.index(ijk)
    }

    /// Node indices of the `2^d` corners of cell `c`, corner bit `k` set means
    /// +1 along axis `k`.
    pub fn cell_corners(&self, c: usize) -> ([usize; 8], usize) {
        let base = self.cell_origin_node(c);
        let nc = 1 << self.dim;
        let mut out = [0usize; 8];
        for (corner, slot) in out.iter_mut().enumerate().take(nc) {
            let mut idx = base;
            for k in 0..self.dim {
                if corner & (1 << k) != 0 {
                    idx += self.stride(k);
                }
            }
            *slot = idx;
        }
        (out, nc)
    }

    pub(crate) fn check_field(&self, data: &[f64], ncomp: usize, what: &str) -> Result<()> {
        if data.len() != self.len() * ncomp {
            return Err(contract(format!(
                "{what}: length {} does not match {} nodes x {} components",
                data.len(),
                self.len(),
                ncomp
            )));
        }
        Ok(())
    }
}

/// Tensor rank of a nodal field; the component count is `dim^rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRank {
    Scalar,
    Vector,
    Tensor,
    ThirdOrder,
}

impl FieldRank {
    pub fn components(self, dim: usize) -> usize {
        match self {
            FieldRank::Scalar => 1,
            FieldRank::Vector => dim,
            FieldRank::Tensor => dim * dim,
            FieldRank::ThirdOrder => dim * dim * dim,
        }
    }
}

/// Flat nodal field: `data[node * ncomp + component]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub rank: FieldRank,
    pub dim: usize,
    pub data: Vec<f64>,
    #[serde(default)]
    pub units: String,
}

pub type ScalarField = Field;
pub type VectorField = Field;
pub type TensorField = Field;
pub type ThirdOrderField = Field;

impl Field {
    pub fn zeros(grid: &GridSpec, rank: FieldRank) -> Self {
        let nc = rank.components(grid.dim());
        Field { rank, dim: grid.dim(), data: vec![0.0; grid.len() * nc], units: String::new() }
    }

    pub fn from_data(grid: &GridSpec, rank: FieldRank, data: Vec<f64>) -> Result<Self> {
        grid.check_field(&data, rank.components(grid.dim()), "field")?;
        Ok(Field { rank, dim: grid.dim(), data, units: String::new() })
    }

    /// Build a vector field by evaluating `f` at every node's coordinates.
    pub fn vector_from_fn(grid: &GridSpec, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let d = grid.dim();
        let mut data = Vec::with_capacity(grid.len() * d);
        for i in 0..grid.len() {
            let v = f(grid.coords(i));
            data.extend_from_slice(&v[..d]);
        }
        Field { rank: FieldRank::Vector, dim: d, data, units: String::new() }
    }

    pub fn scalar_from_fn(grid: &GridSpec, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Field { rank: FieldRank::Scalar, dim: grid.dim(), data, units: String::new() }
    }

    pub fn with_units(mut self, units: &str) -> Self {
        self.units = units.to_string();
        self
    }

    #[inline]
    pub fn ncomp(&self) -> usize {
        self.rank.components(self.dim)
    }

    #[inline]
    pub fn node(&self, i: usize) -> &[f64] {
        let nc = self.ncomp();
        &self.data[i * nc..(i + 1) * nc]
    }

    #[inline]
    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        let nc = self.ncomp();
        &mut self.data[i * nc..(i + 1) * nc]
    }

    pub fn node_count(&self) -> usize {
        self.data.len() / self.ncomp()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn conforms(&self, grid: &GridSpec) -> Result<()> {
        if self.dim != grid.dim() {
            return Err(contract(format!("field dimension {} on a {}D grid", self.dim, grid.dim())));
        }
        grid.check_field(&self.data, self.ncomp(), "field")
    }
}

/// One-dimensional three-point stencil: `(node index along axis, coefficient)`.
type Stencil = [(usize, f64); 3];

#[derive(Clone, Debug)]
struct AxisOps {
    first: Vec<Stencil>,
    second: Vec<Stencil>,
}

impl AxisOps {
    fn new(n: usize, h: f64) -> Self {
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let c1 = 1.0 / (2.0 * h);
        let c2 = 1.0 / (h * h);
        for i in 0..n {
            if i == 0 {
                first.push([(0, -3.0 * c1), (1, 4.0 * c1), (2, -c1)]);
                second.push([(0, c2), (1, -2.0 * c2), (2, c2)]);
            } else if i == n - 1 {
                first.push([(n - 1, 3.0 * c1), (n - 2, -4.0 * c1), (n - 3, c1)]);
                second.push([(n - 3, c2), (n - 2, -2.0 * c2), (n - 1, c2)]);
            } else {
                first.push([(i - 1, -c1), (i, 0.0), (i + 1, c1)]);
                second.push([(i - 1, c2), (i, -2.0 * c2), (i + 1, c2)]);
            }
        }
        AxisOps { first, second }
    }
}

/// Finite-difference operators on a grid: second-order central differences
/// in the interior, second-order one-sided stencils on the boundary, and
/// their exact adjoints (used to assemble gradients of discrete energies).
#[derive(Clone, Debug)]
pub struct DiffOps {
    dim: usize,
    n: [usize; 3],
    strides: [usize; 3],
    len: usize,
    axes: Vec<AxisOps>,
}

impl DiffOps {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        let d = grid.dim();
        for k in 0..d {
            if grid.n()[k] < 3 {
                return Err(Error::UnsupportedGrid("finite differences need >= 3 nodes per axis".into()));
            }
        }
        Ok(DiffOps {
            dim: d,
            n: grid.n(),
            strides: [grid.stride(0), grid.stride(1), grid.stride(2)],
            len: grid.len(),
            axes: (0..d).map(|k| AxisOps::new(grid.n()[k], grid.h()[k])).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn axis_pos(&self, node: usize, axis: usize) -> usize {
        (node / self.strides[axis]) % self.n[axis]
    }

    /// `out[node*ncomp + c] += sum_j S(i, j) u[(node + (j - i) * stride)*ncomp + c]`
    fn apply(&self, stencils: &[Stencil], axis: usize, u: &[f64], ncomp: usize, out: &mut [f64], out_stride: usize, out_off: usize) {
        let s = self.strides[axis];
        for node in 0..self.len {
            let i = self.axis_pos(node, axis);
            let base = node - i * s;
            for &(j, w) in &stencils[i] {
                if w == 0.0 {
                    continue;
                }
                let src = (base + j * s) * ncomp;
                for c in 0..ncomp {
                    out[node * out_stride + c * out_off] += w * u[src + c];
                }
            }
        }
    }

    /// Adjoint of [`apply`]: reads with the output layout, scatters into `out`.
    fn apply_t(&self, stencils: &[Stencil], axis: usize, v: &[f64], v_stride: usize, v_off: usize, ncomp: usize, out: &mut [f64]) {
        let s = self.strides[axis];
        for node in 0..self.len {
            let i = self.axis_pos(node, axis);
            let base = node - i * s;
            for &(j, w) in &stencils[i] {
                if w == 0.0 {
                    continue;
                }
                let dst = (base + j * s) * ncomp;
                for c in 0..ncomp {
                    out[dst + c] += w * v[node * v_stride + c * v_off];
                }
            }
        }
    }

    /// Gradient of an `ncomp`-component field: `out[node][c][k] = d u_c / d X_k`.
    pub fn gradient(&self, u: &[f64], ncomp: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.len * ncomp * d];
        for k in 0..d {
            // write into the k-th slot of each [c][k] block
            let mut tmp = vec![0.0; self.len * ncomp];
            self.apply(&self.axes[k].first, k, u, ncomp, &mut tmp, ncomp, 1);
            for node in 0..self.len {
                for c in 0..ncomp {
                    out[(node * ncomp + c) * d + k] = tmp[node * ncomp + c];
                }
            }
        }
        out
    }

    /// Adjoint of [`gradient`]: `out = G^T p` for `p` laid out `[node][c][k]`.
    pub fn gradient_t(&self, p: &[f64], ncomp: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.len * ncomp];
        for k in 0..d {
            let comp: Vec<f64> = (0..self.len * ncomp).map(|q| p[q * d + k]).collect();
            self.apply_t(&self.axes[k].first, k, &comp, ncomp, 1, ncomp, &mut out);
        }
        out
    }

    /// First derivative along one axis.
    pub fn derivative(&self, u: &[f64], ncomp: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len * ncomp];
        self.apply(&self.axes[axis].first, axis, u, ncomp, &mut out, ncomp, 1);
        out
    }

    fn derivative_t(&self, v: &[f64], ncomp: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len * ncomp];
        self.apply_t(&self.axes[axis].first, axis, v, ncomp, 1, ncomp, &mut out);
        out
    }

    fn second(&self, u: &[f64], ncomp: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len * ncomp];
        self.apply(&self.axes[axis].second, axis, u, ncomp, &mut out, ncomp, 1);
        out
    }

    fn second_t(&self, v: &[f64], ncomp: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len * ncomp];
        self.apply_t(&self.axes[axis].second, axis, v, ncomp, 1, ncomp, &mut out);
        out
    }

    /// Second derivatives `out[node][c][a][b] = d^2 u_c / dX_a dX_b`. Pure
    /// derivatives use the compact three-point stencil, mixed ones compose
    /// first-derivative operators (which commute across axes).
    pub fn hessian(&self, u: &[f64], ncomp: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.len * ncomp * d * d];
        let firsts: Vec<Vec<f64>> = (0..d).map(|b| self.derivative(u, ncomp, b)).collect();
        for a in 0..d {
            for b in 0..d {
                let comp = if a == b {
                    self.second(u, ncomp, a)
                } else if a < b {
                    self.derivative(&firsts[b], ncomp, a)
                } else {
                    continue;
                };
                for node in 0..self.len {
                    for c in 0..ncomp {
                        let v = comp[node * ncomp + c];
                        let blk = (node * ncomp + c) * d * d;
                        out[blk + a * d + b] = v;
                        out[blk + b * d + a] = v;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`hessian`] for a (not necessarily symmetric) `[c][a][b]` field.
    pub fn hessian_t(&self, t: &[f64], ncomp: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.len * ncomp];
        for a in 0..d {
            for b in 0..d {
                let comp: Vec<f64> = (0..self.len * ncomp).map(|q| t[q * d * d + a * d + b]).collect();
                let contrib = if a == b {
                    self.second_t(&comp, ncomp, a)
                } else if a < b {
                    let inner = self.derivative_t(&comp, ncomp, a);
                    self.derivative_t(&inner, ncomp, b)
                } else {
                    // entry (a, b) with a > b was written from D_b D_a = D_a D_b
                    let inner = self.derivative_t(&comp, ncomp, b);
                    self.derivative_t(&inner, ncomp, a)
                };
                for (o, c) in out.iter_mut().zip(&contrib) {
                    *o += c;
                }
            }
        }
        out
    }
}

/// Gradient of a field (vector -> tensor, scalar -> vector).
pub fn gradient(field: &Field, grid: &GridSpec) -> Result<Field> {
    field.conforms(grid)?;
    let rank = match field.rank {
        FieldRank::Scalar => FieldRank::Vector,
        FieldRank::Vector => FieldRank::Tensor,
        FieldRank::Tensor => FieldRank::ThirdOrder,
        FieldRank::ThirdOrder => return Err(contract("gradient of a third-order field")),
    };
    let ops = DiffOps::new(grid)?;
    Ok(Field { rank, dim: grid.dim(), data: ops.gradient(&field.data, field.ncomp()), units: String::new() })
}

/// Hessian of a vector field (third-order result `[c][a][b]`).
pub fn hessian(field: &Field, grid: &GridSpec) -> Result<Field> {
    field.conforms(grid)?;
    if field.rank != FieldRank::Vector {
        return Err(contract("hessian expects a vector field"));
    }
    let ops = DiffOps::new(grid)?;
    Ok(Field {
        rank: FieldRank::ThirdOrder,
        dim: grid.dim(),
        data: ops.hessian(&field.data, field.ncomp()),
        units: String::new(),
    })
}

/// Trapezoidal product-rule integral of a scalar field.
pub fn integrate(field: &Field, grid: &GridSpec) -> Result<f64> {
    field.conforms(grid)?;
    if field.rank != FieldRank::Scalar {
        return Err(contract("integrate expects a scalar field"));
    }
    Ok(integrate_values(&field.data, grid))
}

/// Integral of raw nodal values. The dyadic boundary factors are summed
/// first (compensated, in node order) and the cell volume applied once, so
/// constants integrate exactly and results are bitwise reproducible.
pub fn integrate_values(values: &[f64], grid: &GridSpec) -> f64 {
    let d = grid.dim();
    let n = grid.n();
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (i, v) in values.iter().enumerate() {
        let ijk = grid.multi_index(i);
        let mut c = 1.0;
        for k in 0..d {
            if ijk[k] == 0 || ijk[k] == n[k] - 1 {
                c *= 0.5;
            }
        }
        let x = c * v;
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    let cells: f64 = (0..d).map(|k| (n[k] - 1) as f64).product();
    let extent: f64 = (0..d).map(|k| grid.h()[k] * (n[k] - 1) as f64).product();
    (sum + comp) / cells * extent
}
