//! Loading data: body force, external field, initial state, and their time
//! discretizations (mollification and interval averages).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, FieldRank, GridSpec};

/// Scalar time modulation of a data field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    Constant,
    /// `s(t) = rate * t`
    Linear { rate: f64 },
    /// `s(t) = sin(omega t + phase)`
    Sine { omega: f64, #[serde(default)] phase: f64 },
}

impl Default for TimeProfile {
    fn default() -> Self {
        TimeProfile::Constant
    }
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Linear { rate } => rate * t,
            TimeProfile::Sine { omega, phase } => (omega * t + phase).sin(),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 0.0,
            TimeProfile::Linear { rate } => rate,
            TimeProfile::Sine { omega, phase } => omega * (omega * t + phase).cos(),
        }
    }
}

/// Spatial shape of a data field (current-configuration argument).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialField {
    Zero,
    Uniform { value: [f64; 3] },
    /// `value + jacobian x`
    Affine { value: [f64; 3], jacobian: [[f64; 3]; 3] },
    /// `amplitude exp(-|x - center - velocity t|^2 / width^2)`; the only
    /// preset whose spatial shape moves in time.
    TravelingGaussian { amplitude: [f64; 3], center: [f64; 3], velocity: [f64; 3], width: f64 },
    /// Nodal samples on a grid, multilinear in between, zero outside.
    Sampled { grid: GridSpec, values: Vec<f64> },
    /// A field file; configuration loading replaces it by `Sampled`.
    /// Unresolved, it evaluates to zero.
    File { path: String },
}

impl Default for SpatialField {
    fn default() -> Self {
        SpatialField::Zero
    }
}

/// Time-dependent vector data `g(t, x) = s(t) * shape(t, x)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataField {
    pub shape: SpatialField,
    pub profile: TimeProfile,
}

impl DataField {
    pub fn zero() -> Self {
        DataField::default()
    }

    pub fn uniform(value: [f64; 3], profile: TimeProfile) -> Self {
        DataField { shape: SpatialField::Uniform { value }, profile }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.shape, SpatialField::Zero)
    }

    /// Value and spatial Jacobian `J[r][c] = d g_r / d x_c` at `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64], d: usize) -> ([f64; 3], [f64; 9]) {
        let s = self.profile.value(t);
        let (mut v, mut j) = self.shape_eval(t, x, d);
        for a in v.iter_mut() {
            *a *= s;
        }
        for a in j.iter_mut() {
            *a *= s;
        }
        (v, j)
    }

    /// Partial time derivative at `(t, x)`.
    pub fn time_derivative(&self, t: f64, x: &[f64], d: usize) -> [f64; 3] {
        let s = self.profile.value(t);
        let ds = self.profile.derivative(t);
        let (v, _) = self.shape_eval(t, x, d);
        let mut out = [0.0; 3];
        for c in 0..d {
            out[c] = ds * v[c];
        }
        if let SpatialField::TravelingGaussian { amplitude, center, velocity, width } = &self.shape {
            // d/dt of exp(-|x - c - v t|^2 / w^2) = 2 (x - c - v t) . v / w^2 * exp(...)
            let mut r2 = 0.0;
            let mut rv = 0.0;
            for k in 0..d {
                let r = x[k] - center[k] - velocity[k] * t;
                r2 += r * r;
                rv += r * velocity[k];
            }
            let e = (-r2 / (width * width)).exp();
            for c in 0..d {
                out[c] += s * amplitude[c] * 2.0 * rv / (width * width) * e;
            }
        }
        out
    }

    fn shape_eval(&self, t: f64, x: &[f64], d: usize) -> ([f64; 3], [f64; 9]) {
        let mut v = [0.0; 3];
        let mut j = [0.0; 9];
        match &self.shape {
            SpatialField::Zero | SpatialField::File { .. } => {}
            SpatialField::Uniform { value } => v[..d].copy_from_slice(&value[..d]),
            SpatialField::Affine { value, jacobian } => {
                for r in 0..d {
                    v[r] = value[r];
                    for c in 0..d {
                        v[r] += jacobian[r][c] * x[c];
                        j[r * d + c] = jacobian[r][c];
                    }
                }
            }
            SpatialField::TravelingGaussian { amplitude, center, velocity, width } => {
                let mut rr = [0.0; 3];
                let mut r2 = 0.0;
                for k in 0..d {
                    rr[k] = x[k] - center[k] - velocity[k] * t;
                    r2 += rr[k] * rr[k];
                }
                let e = (-r2 / (width * width)).exp();
                for r in 0..d {
                    v[r] = amplitude[r] * e;
                    for c in 0..d {
                        j[r * d + c] = -2.0 * amplitude[r] * rr[c] / (width * width) * e;
                    }
                }
            }
            SpatialField::Sampled { grid, values } => sample_grid(grid, values, x, &mut v, &mut j),
        }
        (v, j)
    }
}

fn sample_grid(grid: &GridSpec, values: &[f64], x: &[f64], v: &mut [f64; 3], jac: &mut [f64; 9]) {
    let d = grid.dim();
    let o = grid.origin();
    let h = grid.h();
    let n = grid.n();
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for k in 0..d {
        let s = (x[k] - o[k]) / h[k];
        if s < 0.0 || s > (n[k] - 1) as f64 {
            return;
        }
        let i = (s.floor() as usize).min(n[k] - 2);
        base[k] = i;
        t[k] = s - i as f64;
    }
    for q in 0..(1usize << d) {
        let mut ijk = base;
        let mut w = 1.0;
        let mut dw = [1.0; 3];
        for k in 0..d {
            let on = q & (1 << k) != 0;
            if on {
                ijk[k] += 1;
            }
            let (f, df) = if on { (t[k], 1.0 / h[k]) } else { (1.0 - t[k], -1.0 / h[k]) };
            w *= f;
            for (a, dwa) in dw.iter_mut().enumerate().take(d) {
                *dwa *= if a == k { df } else { f };
            }
        }
        let node = grid.index(ijk);
        for r in 0..d {
            let val = values[node * d + r];
            v[r] += w * val;
            for c in 0..d {
                jac[r * d + c] += dw[c] * val;
            }
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Smooth unit-mass time mollifier supported on `[-kappa, kappa]`, applied
/// with a window shift that keeps all samples inside `[0, horizon]`.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub kappa: f64,
    pub horizon: f64,
    offsets: Vec<f64>,
    weights: Vec<f64>,
}

pub const MOLLIFIER_POINTS: usize = 33;

impl Mollifier {
    pub fn new(kappa: f64, horizon: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Config("mollifier width kappa must be positive".into()));
        }
        if !(horizon >= 2.0 * kappa) {
            return Err(Error::Config(format!("horizon {horizon} shorter than the mollifier window 2 kappa = {}", 2.0 * kappa)));
        }
        let (x, w) = gauss_legendre(MOLLIFIER_POINTS);
        let bump = |s: f64| if s.abs() < 1.0 { (-1.0 / (1.0 - s * s)).exp() } else { 0.0 };
        let raw: Vec<f64> = x.iter().zip(&w).map(|(s, w)| w * bump(*s)).collect();
        let total: f64 = raw.iter().sum();
        Ok(Mollifier {
            kappa,
            horizon,
            offsets: x.iter().map(|s| s * kappa).collect(),
            weights: raw.iter().map(|r| r / total).collect(),
        })
    }

    /// Window shift `kappa (T - 2t) / T`.
    pub fn shift(&self, t: f64) -> f64 {
        self.kappa * (self.horizon - 2.0 * t) / self.horizon
    }

    /// Sample times and weights used at time `t`.
    pub fn samples(&self, t: f64) -> Result<Vec<(f64, f64)>> {
        if !(t >= 0.0 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::Range(format!("mollifier time {t} outside [0, {}]", self.horizon)));
        }
        let c = t + self.shift(t);
        Ok(self.offsets.iter().zip(&self.weights).map(|(o, w)| ((c - o).clamp(0.0, self.horizon), *w)).collect())
    }

    /// Mollified data at `(t, x)`.
    pub fn apply(&self, f: &DataField, t: f64, x: &[f64], d: usize) -> Result<([f64; 3], [f64; 9])> {
        let mut v = [0.0; 3];
        let mut j = [0.0; 9];
        for (s, w) in self.samples(t)? {
            let (a, b) = f.eval(s, x, d);
            for k in 0..3 {
                v[k] += w * a[k];
            }
            for k in 0..9 {
                j[k] += w * b[k];
            }
        }
        Ok((v, j))
    }
}

/// Mollified value `f_kappa(t, x)`.
pub fn mollify_force(f: &DataField, t: f64, kappa: f64, horizon: f64, x: &[f64], d: usize) -> Result<[f64; 3]> {
    Ok(Mollifier::new(kappa, horizon)?.apply(f, t, x, d)?.0)
}

pub const CLEMENT_POINTS: usize = 5;

/// Interval average `1/dt int_{(k-1)dt}^{k dt} g(s, x) ds` (5-point Gauss).
pub fn clement_average(f: &DataField, k: usize, dt: f64, x: &[f64], d: usize) -> Result<([f64; 3], [f64; 9])> {
    if k == 0 {
        return Err(Error::Range("interval averages start at k = 1".into()));
    }
    let (gx, gw) = gauss_legendre(CLEMENT_POINTS);
    let a = (k - 1) as f64 * dt;
    let mut v = [0.0; 3];
    let mut j = [0.0; 9];
    for (xi, wi) in gx.iter().zip(&gw) {
        let s = a + 0.5 * dt * (xi + 1.0);
        let (p, q) = f.eval(s, x, d);
        for c in 0..3 {
            v[c] += 0.5 * wi * p[c];
        }
        for c in 0..9 {
            j[c] += 0.5 * wi * q[c];
        }
    }
    Ok((v, j))
}

/// `clement_average` value only.
pub fn clement_hext(f: &DataField, k: usize, dt: f64, x: &[f64], d: usize) -> Result<[f64; 3]> {
    Ok(clement_average(f, k, dt, x, d)?.0)
}

/// Initial deformation presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeformationPreset {
    Identity,
    /// `eta(X) = lambda X + shear X_2 e_1`
    Affine { lambda: f64, #[serde(default)] shear: f64 },
    File { path: String },
}

impl Default for DeformationPreset {
    fn default() -> Self {
        DeformationPreset::Identity
    }
}

/// Initial magnetization presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MagnetizationPreset {
    Constant { value: [f64; 3] },
    /// `base + amplitude * smooth random field` (seeded).
    Perturbed { base: [f64; 3], amplitude: f64, #[serde(default)] seed: u64 },
    File { path: String },
}

impl Default for MagnetizationPreset {
    fn default() -> Self {
        MagnetizationPreset::Constant { value: [0.0, 0.0, 1.0] }
    }
}

pub fn initial_deformation(preset: &DeformationPreset, grid: &GridSpec) -> Result<Field> {
    match preset {
        DeformationPreset::Identity => Ok(Field::vector_from_fn(grid, |x| x).with_units("m")),
        DeformationPreset::Affine { lambda, shear } => {
            if !(*lambda > 0.0) {
                return Err(Error::Config("data.eta0.lambda must be positive".into()));
            }
            let (l, s) = (*lambda, *shear);
            Ok(Field::vector_from_fn(grid, |x| [l * x[0] + s * x[1], l * x[1], l * x[2]]).with_units("m"))
        }
        DeformationPreset::File { path } => load_field_for(path, grid, FieldRank::Vector),
    }
}

pub fn initial_magnetization(preset: &MagnetizationPreset, grid: &GridSpec) -> Result<Field> {
    match preset {
        MagnetizationPreset::Constant { value } => Ok(Field::vector_from_fn(grid, |_| *value).with_units("A/m")),
        MagnetizationPreset::Perturbed { base, amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let d = grid.dim();
            let modes: Vec<([f64; 3], f64, f64)> = (0..d * 3)
                .map(|_| {
                    let k = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
                    (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(-1.0..1.0))
                })
                .collect();
            Ok(Field::vector_from_fn(grid, |x| {
                let mut v = *base;
                for c in 0..d {
                    for t in 0..3 {
                        let (k, ph, a) = modes[c * 3 + t];
                        v[c] += amplitude * a * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin() / 3.0;
                    }
                }
                v
            })
            .with_units("A/m"))
        }
        MagnetizationPreset::File { path } => load_field_for(path, grid, FieldRank::Vector),
    }
}

fn load_field_for(path: &str, grid: &GridSpec, rank: FieldRank) -> Result<Field> {
    let (g, f) = crate::io::read_field(std::path::Path::new(path))?;
    if g.n() != grid.n() || g.dim() != grid.dim() || f.rank != rank {
        return Err(Error::Config(format!("field file {path} does not match the configured grid")));
    }
    Ok(f)
}
