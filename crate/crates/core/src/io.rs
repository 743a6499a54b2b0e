//! Run configuration, CSV series, and the binary field format.
//!
//! Field files (`.mmfd`) are a 28-byte little-endian header followed by the
//! nodal values as `f64` LE in the in-memory layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `MMFD` |
//! | 4..8  | format version (`u32`, currently 1) |
//! | 8..12 | dimension `d` (`u32`) |
//! | 12..24| nodes per axis (`3 x u32`, 1 for unused axes) |
//! | 24..28| components per node (`u32`) |
//!
//! Each field file has a JSON sidecar (same stem, `.json`) with the grid,
//! units, rank and time.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{initial_deformation, initial_magnetization, DataField, DeformationPreset, MagnetizationPreset, SpatialField};
use crate::energy::{EnergyModel, MaterialParams};
use crate::error::{Error, Result};
use crate::grid::{Face, Field, FieldRank, GridSpec};
use crate::stepper::{DataProviders, StepConfig};
use crate::trajectory::{Snapshot, StepStatus, TrajectoryStore};

pub const SCHEMA_VERSION: u32 = 1;
pub const FIELD_MAGIC: &[u8; 4] = b"MMFD";
pub const FIELD_VERSION: u32 = 1;

/// Reference grid section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    /// Nodes per axis; one entry applies to every axis.
    pub n: Vec<usize>,
    /// Box side lengths; one entry applies to every axis.
    pub extent: Vec<f64>,
    /// Dirichlet faces such as `"x3-"`; default is the face `X_d = 0`.
    pub dirichlet: Option<Vec<String>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dim: 3, n: vec![9], extent: vec![1.0], dirichlet: None }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<GridSpec> {
        let d = self.dim;
        if d != 2 && d != 3 {
            return Err(Error::Config(format!("grid.dim (d) must be 2 or 3, got {d}")));
        }
        let pick = |v: &[usize], k: usize| if v.len() == 1 { Some(v[0]) } else { v.get(k).copied() };
        let mut n = [1usize; 3];
        let mut ext = [1.0; 3];
        for k in 0..d {
            n[k] = pick(&self.n, k).ok_or_else(|| Error::Config(format!("grid.n (n) needs 1 or {d} entries")))?;
            ext[k] = if self.extent.len() == 1 { self.extent[0] } else {
                *self.extent.get(k).ok_or_else(|| Error::Config(format!("grid.extent (Ω₀) needs 1 or {d} entries")))?
            };
        }
        let faces = match &self.dirichlet {
            Some(labels) => labels.iter().map(|s| Face::parse(s)).collect::<Result<Vec<_>>>().map_err(|e| Error::Config(format!("grid.dirichlet (P): {e}")))?,
            None => vec![Face { axis: d - 1, side: crate::grid::Side::Low }],
        };
        GridSpec::reference(d, n, ext, &faces)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Body force `f`.
    pub force: DataField,
    /// External field `H_ext`.
    pub hext: DataField,
    pub eta0: DeformationPreset,
    pub m0: MagnetizationPreset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write field snapshots every `stride` steps (0 disables them).
    pub stride: usize,
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { stride: 1, dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_default")]
    pub schema_version: u32,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub material: MaterialParams,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub step: StepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn schema_default() -> u32 {
    SCHEMA_VERSION
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            grid: GridConfig::default(),
            material: MaterialParams::default(),
            data: DataConfig::default(),
            step: StepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Model symbol of a configuration key, used in error messages.
pub fn symbol_for(key: &str) -> Option<&'static str> {
    Some(match key {
        "schema_version" => "schema version",
        "dim" => "d",
        "n" => "n",
        "extent" => "Ω₀",
        "dirichlet" => "P",
        "a" => "a",
        "q" => "q",
        "exchange" => "A",
        "beta" => "β",
        "nu" => "ν",
        "mu" => "μ",
        "rho" => "ρ",
        "mu_e" => "μₑ",
        "anisotropy" => "K",
        "easy_axis" => "â",
        "p1" => "p₁",
        "p2" => "p₂",
        "p3" => "p₃",
        "p4" => "p₄",
        "c_det" => "det floor",
        "force" => "f",
        "hext" => "Hₑₓₜ",
        "eta0" => "η₀",
        "m0" => "M̃₀",
        "dt" => "Δt",
        "t_end" => "T_end",
        "kappa" => "κ",
        "grad_tol" => "tol",
        "e_max" => "E_max",
        "inertia" => "ρ (kinetic term)",
        "stride" => "s",
        _ => return None,
    })
}

fn describe_path(path: &str) -> String {
    let last = path.rsplit('.').find(|s| !s.is_empty() && s.parse::<usize>().is_err() && *s != "?").unwrap_or(path);
    match symbol_for(last) {
        Some(sym) => format!("`{path}` ({sym})"),
        None => format!("`{path}`"),
    }
}

/// Parse and validate a configuration document. Returns warnings for
/// overridden model constraints. Relative file paths resolve against `base`.
pub fn parse_config(text: &str, base: Option<&Path>) -> Result<(RunConfig, Vec<String>)> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        // unknown keys name themselves in backticks
        let key = msg.split('`').nth(1).filter(|_| msg.starts_with("unknown field"));
        match key {
            Some(k) if path == "." || path.is_empty() => Error::Config(format!("unknown key {}: {msg}", describe_path(k))),
            Some(k) => Error::Config(format!("unknown key {}: {msg}", describe_path(&format!("{path}.{k}")))),
            None => Error::Config(format!("key {}: {msg}", describe_path(&path))),
        }
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("schema_version {} not supported (expected {SCHEMA_VERSION})", cfg.schema_version)));
    }
    let warnings = cfg.material.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("material: {m}")),
        other => other,
    })?;
    cfg.step.validate()?;
    cfg.grid.build()?;
    let resolve = |p: &mut String| {
        if let Some(b) = base {
            let pb = Path::new(p.as_str());
            if pb.is_relative() {
                *p = b.join(pb).to_string_lossy().into_owned();
            }
        }
    };
    if let DeformationPreset::File { path } = &mut cfg.data.eta0 {
        resolve(path);
        check_exists(path, "data.eta0 (η₀)")?;
    }
    if let MagnetizationPreset::File { path } = &mut cfg.data.m0 {
        resolve(path);
        check_exists(path, "data.m0 (M̃₀)")?;
    }
    for (f, key) in [(&mut cfg.data.force, "data.force (f)"), (&mut cfg.data.hext, "data.hext (Hₑₓₜ)")] {
        if let SpatialField::File { path } = &mut f.shape {
            resolve(path);
            check_exists(path, key)?;
            let (grid, field) = read_field(Path::new(path.as_str()))?;
            if field.rank != FieldRank::Vector {
                return Err(Error::Config(format!("{key}: sampled data must be a vector field")));
            }
            f.shape = SpatialField::Sampled { grid, values: field.data };
        }
    }
    if let (MaterialParams { stray: true, .. }, 2) = (&cfg.material, cfg.grid.dim) {
        log::info!("2D run with stray field: a testing device, not a physical model");
    }
    Ok((cfg, warnings))
}

fn check_exists(path: &str, key: &str) -> Result<()> {
    if Path::new(path).is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: file {path} does not exist")))
    }
}

/// Read and validate a configuration file.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, path.parent())
}

/// Grid, model and data described by a configuration.
pub fn build_problem(cfg: &RunConfig) -> Result<(GridSpec, EnergyModel, DataProviders)> {
    let grid = cfg.grid.build()?;
    let eta0 = initial_deformation(&cfg.data.eta0, &grid)?;
    let m0 = initial_magnetization(&cfg.data.m0, &grid)?;
    let data = DataProviders { force: cfg.data.force.clone(), hext: cfg.data.hext.clone(), eta0, m0 };
    Ok((grid, EnergyModel::new(cfg.material.clone()), data))
}

/// One row of the step series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub k: usize,
    pub t: f64,
    pub elastic_w: f64,
    pub det_penalty: f64,
    pub hessian: f64,
    pub anisotropy: f64,
    pub stray: f64,
    pub exchange: f64,
    pub saturation: f64,
    pub energy: f64,
    pub dissipation: f64,
    pub forcing_work: f64,
    pub functional_prev: f64,
    pub functional_min: f64,
    pub el_residual_deformation: f64,
    pub el_residual_magnetization: f64,
    pub iterations: usize,
    pub min_det: f64,
    pub cn_residual: f64,
    pub cn_tolerance: f64,
    pub injectivity_margin: f64,
    pub status: StepStatus,
}

pub const SERIES_COLUMNS: [&str; 22] = [
    "k",
    "t",
    "elastic_w",
    "det_penalty",
    "hessian",
    "anisotropy",
    "stray",
    "exchange",
    "saturation",
    "energy",
    "dissipation",
    "forcing_work",
    "functional_prev",
    "functional_min",
    "el_residual_deformation",
    "el_residual_magnetization",
    "iterations",
    "min_det",
    "cn_residual",
    "cn_tolerance",
    "injectivity_margin",
    "status",
];

impl SeriesRow {
    pub fn from_snapshot(k: usize, s: &Snapshot) -> Self {
        let e = &s.energy;
        let g = &s.diagnostics;
        SeriesRow {
            k,
            t: s.time,
            elastic_w: e.elastic_w,
            det_penalty: e.det_penalty,
            hessian: e.hessian,
            anisotropy: e.anisotropy,
            stray: e.stray,
            exchange: e.exchange,
            saturation: e.saturation,
            energy: e.total,
            dissipation: s.dissipation,
            forcing_work: g.forcing_work,
            functional_prev: g.functional_prev,
            functional_min: g.functional_min,
            el_residual_deformation: g.el_residual_deformation,
            el_residual_magnetization: g.el_residual_magnetization,
            iterations: g.iterations,
            min_det: g.min_det,
            cn_residual: g.cn_residual,
            cn_tolerance: g.cn_tolerance,
            injectivity_margin: g.injectivity_margin,
            status: s.status,
        }
    }

    fn floats(&self) -> [f64; 19] {
        [
            self.t,
            self.elastic_w,
            self.det_penalty,
            self.hessian,
            self.anisotropy,
            self.stray,
            self.exchange,
            self.saturation,
            self.energy,
            self.dissipation,
            self.forcing_work,
            self.functional_prev,
            self.functional_min,
            self.el_residual_deformation,
            self.el_residual_magnetization,
            self.min_det,
            self.cn_residual,
            self.cn_tolerance,
            self.injectivity_margin,
        ]
    }
}

/// 17 significant digits; parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_row(w: &mut impl Write, r: &SeriesRow) -> std::io::Result<()> {
    let f = r.floats();
    let mut cells: Vec<String> = vec![r.k.to_string()];
    cells.extend(f[..15].iter().map(|v| format_f64(*v)));
    cells.push(r.iterations.to_string());
    cells.extend(f[15..].iter().map(|v| format_f64(*v)));
    cells.push(r.status.as_str().to_string());
    writeln!(w, "{}", cells.join(","))
}

/// Write one row per snapshot (k = 0 included).
pub fn export_series(trajectory: &TrajectoryStore, path: &Path) -> Result<()> {
    let rows: Vec<SeriesRow> = trajectory.snapshots.iter().enumerate().map(|(k, s)| SeriesRow::from_snapshot(k, s)).collect();
    write_series(&rows, path)
}

pub fn write_series(rows: &[SeriesRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", SERIES_COLUMNS.join(","))?;
    for r in rows {
        write_row(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_status(s: &str) -> Result<StepStatus> {
    Ok(match s {
        "accepted" => StepStatus::Accepted,
        "self-contact" => StepStatus::SelfContact,
        "energy-blowup" => StepStatus::EnergyBlowup,
        "solver-failure" => StepStatus::SolverFailure,
        _ => return Err(Error::Format(format!("unknown status {s:?}"))),
    })
}

pub fn read_series(path: &Path) -> Result<Vec<SeriesRow>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty series file".into()))??;
    if header != SERIES_COLUMNS.join(",") {
        return Err(Error::Format("unexpected series header".into()));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != SERIES_COLUMNS.len() {
            return Err(Error::Format(format!("row {}: {} columns", ln + 1, c.len())));
        }
        let fl = |i: usize| c[i].parse::<f64>().map_err(|e| Error::Format(format!("row {}, column {}: {e}", ln + 1, SERIES_COLUMNS[i])));
        let us = |i: usize| c[i].parse::<usize>().map_err(|e| Error::Format(format!("row {}, column {}: {e}", ln + 1, SERIES_COLUMNS[i])));
        out.push(SeriesRow {
            k: us(0)?,
            t: fl(1)?,
            elastic_w: fl(2)?,
            det_penalty: fl(3)?,
            hessian: fl(4)?,
            anisotropy: fl(5)?,
            stray: fl(6)?,
            exchange: fl(7)?,
            saturation: fl(8)?,
            energy: fl(9)?,
            dissipation: fl(10)?,
            forcing_work: fl(11)?,
            functional_prev: fl(12)?,
            functional_min: fl(13)?,
            el_residual_deformation: fl(14)?,
            el_residual_magnetization: fl(15)?,
            iterations: us(16)?,
            min_det: fl(17)?,
            cn_residual: fl(18)?,
            cn_tolerance: fl(19)?,
            injectivity_margin: fl(20)?,
            status: parse_status(c[21])?,
        });
    }
    Ok(out)
}

/// Sidecar metadata of a field file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub name: String,
    pub rank: FieldRank,
    pub units: String,
    pub time: Option<f64>,
    pub step: Option<usize>,
    pub grid: GridSpec,
    /// Set for 2D fields: the planar model is a testing device only.
    pub testing_device_2d: bool,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write a field and its sidecar.
pub fn write_field(path: &Path, grid: &GridSpec, field: &Field, name: &str, time: Option<f64>, step: Option<usize>) -> Result<()> {
    if field.data.len() != grid.len() * field.ncomp() {
        return Err(Error::Contract(format!("field {name} does not match its grid")));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FIELD_VERSION.to_le_bytes())?;
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    for n in grid.n() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(field.ncomp() as u32).to_le_bytes())?;
    for v in &field.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let meta = FieldMeta {
        name: name.to_string(),
        rank: field.rank,
        units: field.units.clone(),
        time,
        step,
        grid: grid.clone(),
        testing_device_2d: grid.dim() == 2,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a field and its grid; the magic and the sidecar must agree.
pub fn read_field(path: &Path) -> Result<(GridSpec, Field)> {
    let (meta, field) = read_field_with_meta(path)?;
    Ok((meta.grid, field))
}

pub fn read_field_with_meta(path: &Path) -> Result<(FieldMeta, Field)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[0..4] != FIELD_MAGIC {
        return Err(Error::Format(format!("{}: not a field file (bad magic)", path.display())));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u(4) as u32 != FIELD_VERSION {
        return Err(Error::Format(format!("{}: unsupported field version {}", path.display(), u(4))));
    }
    let dim = u(8);
    let n = [u(12), u(16), u(20)];
    let ncomp = u(24);
    let count = n[0] * n[1] * n[2] * ncomp;
    if bytes.len() != 28 + 8 * count {
        return Err(Error::Format(format!("{}: truncated payload", path.display())));
    }
    let data: Vec<f64> = bytes[28..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let meta: FieldMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if meta.grid.dim() != dim || meta.grid.n() != n || meta.rank.components(dim) != ncomp {
        return Err(Error::Format(format!("{}: header and sidecar disagree", path.display())));
    }
    let field = Field { rank: meta.rank, dim, data, units: meta.units.clone() };
    Ok((meta, field))
}

/// Fields written for one snapshot; the stray pair lives on its own grid.
pub struct SnapshotFields<'a> {
    pub grid: &'a GridSpec,
    pub eta: &'a Field,
    pub mtilde: &'a Field,
    pub stray: Option<(&'a GridSpec, &'a Field, &'a Field)>,
}

/// Write `eta_k`, `mtilde_k` and, if present, `phi_k` and `h_k` into `dir`.
pub fn export_snapshot(fields: &SnapshotFields<'_>, k: usize, time: f64, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut put = |name: &str, grid: &GridSpec, f: &Field| -> Result<()> {
        let p = dir.join(format!("{name}_{k:06}.mmfd"));
        write_field(&p, grid, f, name, Some(time), Some(k))?;
        out.push(p);
        Ok(())
    };
    put("eta", fields.grid, fields.eta)?;
    put("mtilde", fields.grid, fields.mtilde)?;
    if let Some((g, phi, h)) = fields.stray {
        put("phi", g, phi)?;
        put("h", g, h)?;
    }
    Ok(out)
}
