//! Experiment configuration, run orchestration and the file formats of the
//! `wharmonic` binary.
//!
//! A run directory holds `config.json` (the resolved configuration),
//! `summary.json`, and one CSV table per stored field: `field.csv` (masses,
//! columns `m<j>` per D node), `quantiles.csv` (q = 1 solvers, columns
//! `q<l>`) and `spd.csv` (Bures solver, columns `a<ij>`). Every table has one
//! row per Ω node, the coordinates first (`xi0`, `xi1`).
//!
//! Relative paths inside a config file (`out_dir`, boundary files) are taken
//! relative to the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, HashMapContext, Node, Value};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::analysis::{
    deposit_point, eval_functional, obstruction_defect, sqrt_boundary, subharmonicity_check,
    FunctionalSpec, OBSTRUCTION_SUPPORT_FLOOR,
};
use crate::bbsolver::{solve_dirichlet, BoundaryData, SolverOptions};
use crate::bures::{
    b_fields, bures_velocity, det_min_principle, dual_objective, quadratic_max_principle,
    solve_bures, BuresOptions, SpdField,
};
use crate::energy::{dir_eps, tangent_velocity_elliptic, tangent_velocity_floor};
use crate::grid::{build_discretization, Discretization, GridSpec};
use crate::measures::{
    elliptic_density, from_quantiles, heat_flow, w2_grid, MeasureField, QuantileField,
    ReferenceDensity,
};
use crate::quantile_solver::{
    boundary_quantiles, harmonic_residual, jost_solve, quantile_energy, solve_quantile, JostOptions,
};
use crate::Error;

pub const SUMMARY_SCHEMA: &str = "wharmonic.summary/1";
pub const COMPARE_SCHEMA: &str = "wharmonic.compare/1";
pub const DIR_EPS_SCHEMA: &str = "wharmonic.dir-eps/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub boundary: BoundaryConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub kind: String,
    #[serde(default)]
    pub params: Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Bb,
    Quantile,
    Bures,
    Jost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    #[serde(default)]
    pub options: Json,
}

/// A functional on P(D) given by formulas in the D coordinates: `x` (and `y`)
/// for potentials, `x, u` (q = 1) or `x, y, u, v` (q = 2) for interaction
/// kernels W(x, u).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    Potential { expr: String },
    Entropy,
    Interaction { expr: String },
    QuadraticForm { c: Vec<f64> },
}

fn default_tol() -> f64 {
    1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    /// max over the interior of F∘μ minus its max over the boundary ≤ tol.
    MaxPrinciple {
        functional: FunctionalConfig,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Smallest discrete Laplacian of F∘μ ≥ −tol.
    Subharmonic {
        functional: FunctionalConfig,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Interior minimum of det cov ≥ boundary minimum − tol (Bures).
    DetPrinciple {
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// ⟨cov, C⟩ satisfies the maximum principle (Bures).
    QuadraticMaxPrinciple {
        c: Vec<f64>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Solver residual (Euler-Lagrange, or barycenter for the Jost scheme) ≤ tol.
    ElResidual { tol: f64 },
    /// |energy − dual bound| / energy ≤ tol.
    Gap { tol: f64 },
    /// |energy − expected| / |expected| ≤ tol (absolute when expected = 0).
    Energy { expected: f64, tol: f64 },
    /// Obstruction defect of the velocity field, within [min, max].
    Obstruction {
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
}

impl CheckKind {
    fn default_name(&self) -> &'static str {
        match self {
            CheckKind::MaxPrinciple { .. } => "max_principle",
            CheckKind::Subharmonic { .. } => "subharmonic",
            CheckKind::DetPrinciple { .. } => "det_principle",
            CheckKind::QuadraticMaxPrinciple { .. } => "quadratic_max_principle",
            CheckKind::ElResidual { .. } => "el_residual",
            CheckKind::Gap { .. } => "gap",
            CheckKind::Energy { .. } => "energy",
            CheckKind::Obstruction { .. } => "obstruction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: CheckKind,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct QuantileConfig {
    levels: usize,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { levels: 256 }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JostConfig {
    eps: f64,
    #[serde(default)]
    lambda: f64,
    #[serde(default)]
    functional: Option<FunctionalConfig>,
    #[serde(default = "default_sweeps")]
    max_sweeps: usize,
    #[serde(default = "default_jost_tol")]
    tol: f64,
    #[serde(default = "default_levels")]
    levels: usize,
    #[serde(default)]
    reverse: bool,
}

fn default_sweeps() -> usize {
    500
}

fn default_jost_tol() -> f64 {
    1e-10
}

fn default_levels() -> usize {
    256
}

fn default_k() -> u32 {
    2
}

fn default_smoothing() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Gaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConstantParams {
    Gaussian(Gaussian),
    Spd(SpdParams),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpdParams {
    a: Vec<f64>,
    #[serde(default = "default_k")]
    k: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianPair {
    mu0: Gaussian,
    mu1: Gaussian,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpdPair {
    a0: Vec<f64>,
    a1: Vec<f64>,
    #[serde(default = "default_k")]
    k: u32,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PairParams {
    Gaussian(GaussianPair),
    Spd(SpdPair),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiracParams {
    f: Vec<String>,
    #[serde(default = "default_smoothing")]
    smoothing: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipticParams {
    a: Vec<String>,
    #[serde(default = "default_k")]
    k: u32,
}

#[derive(Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum FileFormat {
    Measure,
    Spd,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileParams {
    path: PathBuf,
    #[serde(default = "default_format")]
    format: FileFormat,
    #[serde(default = "default_k")]
    k: u32,
}

fn default_format() -> FileFormat {
    FileFormat::Measure
}

fn params<T: serde::de::DeserializeOwned>(what: &str, v: &Json) -> CliResult<T> {
    let v = if v.is_null() {
        Json::Object(Default::default())
    } else {
        v.clone()
    };
    serde_json::from_value(v).map_err(|e| config_err(format!("{what}: {e}")))
}

// ---------------------------------------------------------------------------
// Formulas

struct Formula {
    node: Node,
    names: &'static [&'static str],
    src: String,
}

impl Formula {
    fn parse(src: &str, names: &'static [&'static str]) -> CliResult<Self> {
        let node =
            build_operator_tree(src).map_err(|e| config_err(format!("formula `{src}`: {e}")))?;
        for id in node.iter_variable_identifiers() {
            if !names.contains(&id) {
                return Err(config_err(format!(
                    "formula `{src}`: unknown variable `{id}` (expected one of {names:?})"
                )));
            }
        }
        Ok(Formula {
            node,
            names,
            src: src.to_string(),
        })
    }

    fn eval(&self, vals: &[f64]) -> CliResult<f64> {
        let mut ctx = HashMapContext::new();
        for (n, v) in self.names.iter().zip(vals) {
            ctx.set_value((*n).to_string(), Value::Float(*v))
                .map_err(|e| config_err(e.to_string()))?;
        }
        let v = self
            .node
            .eval_number_with_context(&ctx)
            .map_err(|e| config_err(format!("formula `{}`: {e}", self.src)))?;
        if !v.is_finite() {
            return Err(config_err(format!(
                "formula `{}` is not finite at {vals:?}",
                self.src
            )));
        }
        Ok(v)
    }
}

fn coord_names(dim: usize) -> &'static [&'static str] {
    if dim == 1 {
        &["x"]
    } else {
        &["x", "y"]
    }
}

fn build_functional(disc: &Discretization, f: &FunctionalConfig) -> CliResult<FunctionalSpec> {
    let q = disc.q();
    let spec = match f {
        FunctionalConfig::Potential { expr } => {
            let fm = Formula::parse(expr, coord_names(q))?;
            let v = disc
                .d_coords
                .iter()
                .map(|c| fm.eval(&c[..q]))
                .collect::<CliResult<Vec<_>>>()?;
            FunctionalSpec::potential(v)
        }
        FunctionalConfig::Entropy => FunctionalSpec::entropy(),
        FunctionalConfig::Interaction { expr } => {
            let names: &'static [&'static str] = if q == 1 {
                &["x", "u"]
            } else {
                &["x", "y", "u", "v"]
            };
            let fm = Formula::parse(expr, names)?;
            let mut w = Vec::with_capacity(disc.n_d * disc.n_d);
            for a in &disc.d_coords {
                for b in &disc.d_coords {
                    let vals: Vec<f64> = a[..q].iter().chain(&b[..q]).copied().collect();
                    w.push(fm.eval(&vals)?);
                }
            }
            FunctionalSpec::interaction(w)
        }
        FunctionalConfig::QuadraticForm { c } => FunctionalSpec::quadratic_form(c.clone())?,
    };
    spec.check(disc)?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Boundary data

/// Boundary data as generated: densities, or matrices of an elliptic family.
#[derive(Clone, Debug)]
pub enum Boundary {
    Measures(BoundaryData),
    Elliptic {
        rows: SpdField,
        rho: ReferenceDensity,
    },
}

impl Boundary {
    /// Densities at the boundary nodes, lifting elliptic data onto the D grid.
    pub fn measures(&self, disc: &Discretization) -> CliResult<BoundaryData> {
        match self {
            Boundary::Measures(bc) => Ok(bc.clone()),
            Boundary::Elliptic { rows, rho } => {
                let slices = (0..rows.len())
                    .map(|b| elliptic_density(disc, rows.get(b), rho))
                    .collect::<crate::Result<Vec<_>>>()?;
                Ok(BoundaryData {
                    n_d: disc.n_d,
                    slices,
                })
            }
        }
    }
}

fn gaussian_slice(disc: &Discretization, g: &Gaussian) -> CliResult<Vec<f64>> {
    let q = disc.q();
    if g.mean.len() != q || g.cov.len() != q * q {
        return Err(config_err(format!(
            "gaussian needs {q} mean entries and {} covariance entries",
            q * q
        )));
    }
    let cov = DMatrix::from_row_slice(q, q, &g.cov);
    let prec = cov
        .clone()
        .cholesky()
        .ok_or_else(|| config_err("gaussian covariance is not positive definite"))?
        .inverse();
    let mut out = Vec::with_capacity(disc.n_d);
    for (c, w) in disc.d_coords.iter().zip(&disc.d_weights) {
        let mut e = 0.0;
        for i in 0..q {
            for j in 0..q {
                e += (c[i] - g.mean[i]) * prec[(i, j)] * (c[j] - g.mean[j]);
            }
        }
        out.push((-0.5 * e).exp() * w);
    }
    let s: f64 = out.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(config_err("gaussian has no mass on the D grid"));
    }
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

fn spd_rows(
    disc: &Discretization,
    q: usize,
    f: impl FnMut(usize) -> Vec<f64>,
) -> CliResult<SpdField> {
    let rows = SpdField::from_fn(disc.boundary.len(), q, f)?;
    rows.check(0.0)?;
    Ok(rows)
}

/// Builds the boundary data named in the config. `base` resolves relative
/// file paths.
pub fn generate_boundary(
    disc: &Discretization,
    cfg: &BoundaryConfig,
    base: &Path,
) -> CliResult<Boundary> {
    let q = disc.q();
    let p = disc.p();
    let nb = disc.boundary.len();
    match cfg.kind.as_str() {
        "constant" => match params::<ConstantParams>("constant", &cfg.params)? {
            ConstantParams::Gaussian(g) => {
                let s = gaussian_slice(disc, &g)?;
                Ok(Boundary::Measures(BoundaryData { n_d: disc.n_d, slices: vec![s; nb] }))
            }
            ConstantParams::Spd(sp) => {
                check_len("a", &sp.a, q * q)?;
                Ok(Boundary::Elliptic { rows: spd_rows(disc, q, |_| sp.a.clone())?, rho: ReferenceDensity { q, k: sp.k } })
            }
        },
        "pair-geodesic" => {
            if p != 1 {
                return Err(config_err("pair-geodesic data needs p = 1"));
            }
            // In p = 1 the outward normal tells the two ends apart.
            let first = |b: usize| disc.normals[b][0] < 0.0;
            match params::<PairParams>("pair-geodesic", &cfg.params)? {
                PairParams::Gaussian(g) => {
                    let (s0, s1) = (gaussian_slice(disc, &g.mu0)?, gaussian_slice(disc, &g.mu1)?);
                    let slices = (0..nb).map(|b| if first(b) { s0.clone() } else { s1.clone() }).collect();
                    Ok(Boundary::Measures(BoundaryData { n_d: disc.n_d, slices }))
                }
                PairParams::Spd(sp) => {
                    check_len("a0", &sp.a0, q * q)?;
                    check_len("a1", &sp.a1, q * q)?;
                    let rows = spd_rows(disc, q, |b| if first(b) { sp.a0.clone() } else { sp.a1.clone() })?;
                    Ok(Boundary::Elliptic { rows, rho: ReferenceDensity { q, k: sp.k } })
                }
            }
        }
        "dirac-of-map" => {
            let dp: DiracParams = params("dirac-of-map", &cfg.params)?;
            if dp.f.len() != q {
                return Err(config_err(format!("dirac-of-map needs {q} component formulas")));
            }
            if !(dp.smoothing >= 0.0) {
                return Err(config_err("smoothing must be nonnegative"));
            }
            let fs = dp.f.iter().map(|s| Formula::parse(s, coord_names(p))).collect::<CliResult<Vec<_>>>()?;
            let hd = disc.max_d_spacing();
            let mut slices = Vec::with_capacity(nb);
            for &k in &disc.boundary {
                let xi = &disc.omega_coords[k][..p];
                let y = fs.iter().map(|f| f.eval(xi)).collect::<CliResult<Vec<_>>>()?;
                let inside = disc.d_axes.iter().zip(&y).all(|(a, &v)| v >= a.lo && v <= a.hi);
                if !inside {
                    return Err(Error::SupportOverflow.into());
                }
                let mut out = vec![0.0; disc.n_d];
                deposit_point(disc, &y, 1.0, &mut out);
                if dp.smoothing > 0.0 {
                    out = heat_flow(disc, &out, dp.smoothing * hd * hd)?;
                }
                slices.push(out);
            }
            Ok(Boundary::Measures(BoundaryData { n_d: disc.n_d, slices }))
        }
        "elliptic" => {
            let ep: EllipticParams = params("elliptic", &cfg.params)?;
            if ep.a.len() != q * q {
                return Err(config_err(format!("elliptic data needs {} entry formulas", q * q)));
            }
            let fs = ep.a.iter().map(|s| Formula::parse(s, coord_names(p))).collect::<CliResult<Vec<_>>>()?;
            let mut values = Vec::with_capacity(nb * q * q);
            for &k in &disc.boundary {
                let xi = &disc.omega_coords[k][..p];
                for f in &fs {
                    values.push(f.eval(xi)?);
                }
            }
            let rows = SpdField { q, values };
            rows.check(0.0)?;
            Ok(Boundary::Elliptic { rows, rho: ReferenceDensity { q, k: ep.k } })
        }
        "sqrt-circle" => {
            if !(cfg.params.is_null() || cfg.params.as_object().map_or(false, |o| o.is_empty())) {
                return Err(config_err("sqrt-circle takes no parameters"));
            }
            if p != 2 {
                return Err(config_err("sqrt-circle data needs p = 2"));
            }
            Ok(Boundary::Measures(sqrt_boundary(disc)?))
        }
        "file" => {
            let fp: FileParams = params("file", &cfg.params)?;
            let path = if fp.path.is_absolute() { fp.path.clone() } else { base.join(&fp.path) };
            let coords: Vec<[f64; 2]> = disc.boundary.iter().map(|&k| disc.omega_coords[k]).collect();
            match fp.format {
                FileFormat::Measure => {
                    let values = read_table(&path, p, &coords, disc.n_d)?;
                    let slices = values.chunks(disc.n_d).map(|c| c.to_vec()).collect();
                    Ok(Boundary::Measures(BoundaryData { n_d: disc.n_d, slices }))
                }
                FileFormat::Spd => {
                    let values = read_table(&path, p, &coords, q * q)?;
                    let rows = SpdField { q, values };
                    rows.check(0.0)?;
                    Ok(Boundary::Elliptic { rows, rho: ReferenceDensity { q, k: fp.k } })
                }
            }
        }
        other => Err(config_err(format!(
            "unknown boundary generator `{other}` (expected constant, pair-geodesic, dirac-of-map, elliptic, sqrt-circle or file)"
        ))),
    }
}

fn check_len(name: &str, v: &[f64], n: usize) -> CliResult<()> {
    if v.len() != n {
        return Err(config_err(format!(
            "`{name}` needs {n} entries, got {}",
            v.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Prepared experiments

#[derive(Clone, Debug)]
enum Solver {
    Bb(SolverOptions),
    Quantile { levels: usize },
    Jost { opts: JostOptions, levels: usize },
    Bures(BuresOptions),
}

#[derive(Clone, Debug)]
enum Check {
    MaxPrinciple { f: FunctionalSpec, tol: f64 },
    Subharmonic { f: FunctionalSpec, tol: f64 },
    Det { tol: f64 },
    QuadMax { c: DMatrix<f64>, tol: f64 },
    El { tol: f64 },
    Gap { tol: f64 },
    Energy { expected: f64, tol: f64 },
    Obstruction { min: Option<f64>, max: Option<f64> },
}

/// A validated configuration with its grid, boundary data and checks built.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub disc: Discretization,
    pub boundary: Boundary,
    pub out_dir: PathBuf,
    solver: Solver,
    checks: Vec<(String, Check)>,
}

pub fn read_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

impl Experiment {
    pub fn load(path: &Path) -> CliResult<Self> {
        let config = read_config(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::prepare(config, &base)
    }

    pub fn prepare(config: ExperimentConfig, base: &Path) -> CliResult<Self> {
        config.grid.validate()?;
        let disc = build_discretization(&config.grid)?;
        let boundary = generate_boundary(&disc, &config.boundary, base)?;
        let q = disc.q();
        let solver = match config.solver.kind {
            SolverKind::Bb => {
                let o: SolverOptions = params("bb options", &config.solver.options)?;
                o.validate()?;
                Solver::Bb(o)
            }
            SolverKind::Quantile => {
                let o: QuantileConfig = params("quantile options", &config.solver.options)?;
                if o.levels == 0 {
                    return Err(config_err("levels must be positive"));
                }
                Solver::Quantile { levels: o.levels }
            }
            SolverKind::Jost => {
                let o: JostConfig = params("jost options", &config.solver.options)?;
                if o.levels == 0 || o.max_sweeps == 0 {
                    return Err(config_err("levels and max_sweeps must be positive"));
                }
                let functional = o
                    .functional
                    .as_ref()
                    .map(|f| build_functional(&disc, f))
                    .transpose()?;
                let opts = JostOptions {
                    eps: o.eps,
                    lambda: o.lambda,
                    functional,
                    max_sweeps: o.max_sweeps,
                    tol: o.tol,
                    reverse: o.reverse,
                };
                Solver::Jost {
                    opts,
                    levels: o.levels,
                }
            }
            SolverKind::Bures => {
                let o: BuresOptions = params("bures options", &config.solver.options)?;
                if !matches!(boundary, Boundary::Elliptic { .. }) {
                    return Err(config_err("the bures solver needs elliptic boundary data (constant/pair-geodesic with `a`, elliptic, or an spd file)"));
                }
                Solver::Bures(o)
            }
        };
        if matches!(solver, Solver::Quantile { .. } | Solver::Jost { .. }) && q != 1 {
            return Err(config_err("the quantile and jost solvers need q = 1"));
        }
        let kind = config.solver.kind;
        let mut checks: Vec<(String, Check)> = Vec::new();
        for c in &config.checks {
            let name = c
                .name
                .clone()
                .unwrap_or_else(|| c.kind.default_name().to_string());
            if checks.iter().any(|(n, _)| *n == name) {
                return Err(config_err(format!(
                    "duplicate check name `{name}`; give each check a distinct `name`"
                )));
            }
            let need = |ok: bool, what: &str| {
                if ok {
                    Ok(())
                } else {
                    Err(config_err(format!("check `{name}` {what}")))
                }
            };
            let tol_ok = |t: f64| need(t >= 0.0 && t.is_finite(), "needs a finite tolerance ≥ 0");
            let check = match &c.kind {
                CheckKind::MaxPrinciple { functional, tol } => {
                    tol_ok(*tol)?;
                    Check::MaxPrinciple {
                        f: build_functional(&disc, functional)?,
                        tol: *tol,
                    }
                }
                CheckKind::Subharmonic { functional, tol } => {
                    tol_ok(*tol)?;
                    Check::Subharmonic {
                        f: build_functional(&disc, functional)?,
                        tol: *tol,
                    }
                }
                CheckKind::DetPrinciple { tol } => {
                    tol_ok(*tol)?;
                    need(kind == SolverKind::Bures, "needs the bures solver")?;
                    Check::Det { tol: *tol }
                }
                CheckKind::QuadraticMaxPrinciple { c, tol } => {
                    tol_ok(*tol)?;
                    need(kind == SolverKind::Bures, "needs the bures solver")?;
                    FunctionalSpec::quadratic_form(c.clone())?.check(&disc)?;
                    Check::QuadMax {
                        c: DMatrix::from_row_slice(q, q, c),
                        tol: *tol,
                    }
                }
                CheckKind::ElResidual { tol } => {
                    tol_ok(*tol)?;
                    need(
                        kind != SolverKind::Bb,
                        "has no Euler-Lagrange residual for the bb solver",
                    )?;
                    Check::El { tol: *tol }
                }
                CheckKind::Gap { tol } => {
                    tol_ok(*tol)?;
                    need(
                        matches!(kind, SolverKind::Bb | SolverKind::Bures),
                        "needs a solver with a dual bound (bb or bures)",
                    )?;
                    Check::Gap { tol: *tol }
                }
                CheckKind::Energy { expected, tol } => {
                    tol_ok(*tol)?;
                    need(expected.is_finite(), "needs a finite expected value")?;
                    Check::Energy {
                        expected: *expected,
                        tol: *tol,
                    }
                }
                CheckKind::Obstruction { min, max } => {
                    need(disc.p() == 2, "needs p = 2")?;
                    Check::Obstruction {
                        min: *min,
                        max: *max,
                    }
                }
            };
            checks.push((name, check));
        }
        let out_dir = if config.out_dir.is_absolute() {
            config.out_dir.clone()
        } else {
            base.join(&config.out_dir)
        };
        Ok(Experiment {
            config,
            disc,
            boundary,
            out_dir,
            solver,
            checks,
        })
    }

    /// Runs the configured solver.
    pub fn solve(&self) -> CliResult<Solution> {
        let disc = &self.disc;
        let start = Instant::now();
        let mut residuals = BTreeMap::new();
        let mut sol = match &self.solver {
            Solver::Bb(opts) => {
                let bc = self.boundary.measures(disc)?;
                let (mu, e, rep) = solve_dirichlet(&bc, disc, opts)?;
                residuals.insert("continuity".to_string(), rep.residual);
                // The momentum is not stored, so the defect of its velocity is
                // kept with the residuals.
                if disc.p() == 2
                    && self
                        .checks
                        .iter()
                        .any(|(_, c)| matches!(c, Check::Obstruction { .. }))
                {
                    let v = tangent_velocity_floor(disc, &mu, &e, OBSTRUCTION_SUPPORT_FLOOR)?;
                    residuals.insert(
                        "obstruction".to_string(),
                        obstruction_defect(disc, &v, &mu)?,
                    );
                }
                residuals.insert("renormalization".to_string(), rep.renormalization);
                Solution::new(rep.energy, Some(rep.dual_bound), rep.iters, rep.converged)
                    .with_measure(mu)
            }
            Solver::Quantile { levels } => {
                let bq = boundary_quantiles(disc, &self.boundary.measures(disc)?, *levels)?;
                let qf = solve_quantile(&bq, disc)?;
                residuals.insert("el".to_string(), harmonic_residual(disc, &qf)?);
                let mu = from_quantiles(disc, &qf)?;
                let mut s =
                    Solution::new(quantile_energy(disc, &qf)?, None, 1, true).with_measure(mu);
                s.quantiles = Some(qf);
                s
            }
            Solver::Jost { opts, levels } => {
                let bq = boundary_quantiles(disc, &self.boundary.measures(disc)?, *levels)?;
                let (qf, rep) = jost_solve(disc, &bq, opts)?;
                let bary = rep
                    .barycenter_residual
                    .iter()
                    .fold(0.0f64, |a, &b| a.max(b));
                residuals.insert("barycenter".to_string(), bary);
                residuals.insert("last_change".to_string(), rep.last_change);
                let mu = from_quantiles(disc, &qf)?;
                let mut s =
                    Solution::new(quantile_energy(disc, &qf)?, None, rep.sweeps, rep.converged)
                        .with_measure(mu);
                s.quantiles = Some(qf);
                s
            }
            Solver::Bures(opts) => {
                let Boundary::Elliptic { rows, rho } = &self.boundary else {
                    return Err(config_err("the bures solver needs elliptic boundary data"));
                };
                let (a, rep) = solve_bures(disc, rows, opts)?;
                residuals.insert("el".to_string(), rep.el_residual);
                let b = b_fields(disc, &a)?;
                let dual = dual_objective(disc, &a, &b)?;
                let mut s = Solution::new(rep.energy, Some(dual), rep.iters, rep.converged);
                let lifted = a.lift(disc, rho);
                if disc.p() == 2
                    && self
                        .checks
                        .iter()
                        .any(|(_, c)| matches!(c, Check::Obstruction { .. }))
                {
                    let v = bures_velocity(disc, &b)?;
                    let mu = match &lifted {
                        Ok(mu) => mu.clone(),
                        Err(e) => {
                            return Err(config_err(format!(
                                "the obstruction check needs the lifted densities: {e}"
                            )))
                        }
                    };
                    residuals.insert(
                        "obstruction".to_string(),
                        obstruction_defect(disc, &v, &mu)?,
                    );
                }
                // The lift needs D to contain every pushed support; without it
                // only the matrices are stored.
                match lifted {
                    Ok(mu) => s.measure = Some(mu),
                    Err(e) => s.missing_measure = Some(e.to_string()),
                }
                s.spd = Some(a);
                s
            }
        };
        sol.residuals = residuals;
        sol.seconds = start.elapsed().as_secs_f64();
        Ok(sol)
    }

    /// Evaluates every configured check on a solution.
    pub fn evaluate_checks(&self, sol: &Solution) -> CliResult<BTreeMap<String, CheckOutcome>> {
        let disc = &self.disc;
        let mut out = BTreeMap::new();
        for (name, check) in &self.checks {
            let measure = || {
                sol.measure.as_ref().ok_or_else(|| {
                    let why = sol.missing_measure.as_deref().unwrap_or("none stored");
                    config_err(format!("check `{name}` needs a measure field ({why})"))
                })
            };
            let spd = || {
                sol.spd
                    .as_ref()
                    .ok_or_else(|| config_err(format!("check `{name}` needs an SPD field")))
            };
            let outcome = match check {
                Check::MaxPrinciple { f, tol } => {
                    let r =
                        subharmonicity_check(disc, &eval_functional(disc, measure()?, f)?, *tol);
                    CheckOutcome {
                        pass: r.max_gap <= *tol,
                        value: r.max_gap,
                        tol: *tol,
                    }
                }
                Check::Subharmonic { f, tol } => {
                    let r =
                        subharmonicity_check(disc, &eval_functional(disc, measure()?, f)?, *tol);
                    CheckOutcome {
                        pass: r.min_laplacian >= -*tol,
                        value: r.min_laplacian,
                        tol: *tol,
                    }
                }
                Check::Det { tol } => {
                    let r = det_min_principle(disc, spd()?, *tol)?;
                    CheckOutcome {
                        pass: r.pass,
                        value: r.interior_min - r.boundary_min,
                        tol: *tol,
                    }
                }
                Check::QuadMax { c, tol } => {
                    let r = quadratic_max_principle(disc, spd()?, c, *tol)?;
                    CheckOutcome {
                        pass: r.pass,
                        value: r.max_gap,
                        tol: *tol,
                    }
                }
                Check::El { tol } => {
                    let v = sol
                        .residuals
                        .get("el")
                        .or_else(|| sol.residuals.get("barycenter"))
                        .copied()
                        .ok_or_else(|| {
                            config_err(format!("check `{name}`: the solution has no residual"))
                        })?;
                    CheckOutcome {
                        pass: v <= *tol,
                        value: v,
                        tol: *tol,
                    }
                }
                Check::Gap { tol } => {
                    let dual = sol.dual_bound.ok_or_else(|| {
                        config_err(format!("check `{name}`: the solution has no dual bound"))
                    })?;
                    let gap = (sol.energy - dual).abs();
                    let v = if sol.energy != 0.0 {
                        gap / sol.energy.abs()
                    } else {
                        gap
                    };
                    CheckOutcome {
                        pass: v <= *tol,
                        value: v,
                        tol: *tol,
                    }
                }
                Check::Energy { expected, tol } => {
                    let d = (sol.energy - expected).abs();
                    let v = if *expected != 0.0 {
                        d / expected.abs()
                    } else {
                        d
                    };
                    CheckOutcome {
                        pass: v <= *tol,
                        value: v,
                        tol: *tol,
                    }
                }
                Check::Obstruction { min, max } => {
                    let v = match sol.residuals.get("obstruction") {
                        Some(v) => *v,
                        None => {
                            let mu = measure()?;
                            obstruction_defect(disc, &tangent_velocity_elliptic(disc, mu)?, mu)?
                        }
                    };
                    let pass = min.map_or(true, |m| v >= m) && max.map_or(true, |m| v <= m);
                    CheckOutcome {
                        pass,
                        value: v,
                        tol: min.or(*max).unwrap_or(0.0),
                    }
                }
            };
            out.insert(name.clone(), outcome);
        }
        Ok(out)
    }

    /// Writes the config copy, the field tables and the summary.
    pub fn write_artifacts(&self, sol: &Solution, summary: &RunSummary) -> CliResult<()> {
        let dir = &self.out_dir;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        let disc = &self.disc;
        if let Some(mu) = &sol.measure {
            write_node_table(&dir.join("field.csv"), disc, "m", disc.n_d, &mu.values)?;
        }
        if let Some(qf) = &sol.quantiles {
            write_node_table(&dir.join("quantiles.csv"), disc, "q", qf.m, &qf.values)?;
        }
        if let Some(a) = &sol.spd {
            write_node_table(&dir.join("spd.csv"), disc, "a", a.q * a.q, &a.values)?;
        }
        write_json(&dir.join("summary.json"), summary)
    }

    /// Reads a stored solution back from the output directory.
    pub fn load_solution(&self) -> CliResult<Solution> {
        let dir = &self.out_dir;
        let summary: RunSummary = read_json(&dir.join("summary.json"))?;
        let disc = &self.disc;
        let coords: Vec<[f64; 2]> = disc.omega_coords.clone();
        let p = disc.p();
        let mut sol = Solution::new(summary.energy, summary.dual_bound, summary.iters, true);
        sol.residuals = summary.residuals;
        sol.seconds = summary.seconds;
        let field = dir.join("field.csv");
        if field.exists() {
            let values = read_table(&field, p, &coords, disc.n_d)?;
            sol.measure = Some(MeasureField {
                n_omega: disc.n_omega,
                n_d: disc.n_d,
                values,
            });
        }
        let quant = dir.join("quantiles.csv");
        if quant.exists() {
            let (m, values) = read_table_any(&quant, p, &coords)?;
            sol.quantiles = Some(QuantileField {
                n_omega: disc.n_omega,
                m,
                values,
            });
        }
        let spd = dir.join("spd.csv");
        if spd.exists() {
            let values = read_table(&spd, p, &coords, disc.q() * disc.q())?;
            sol.spd = Some(SpdField {
                q: disc.q(),
                values,
            });
        }
        Ok(sol)
    }
}

// ---------------------------------------------------------------------------
// Solutions and summaries

#[derive(Clone, Debug, Default)]
pub struct Solution {
    pub energy: f64,
    pub dual_bound: Option<f64>,
    pub residuals: BTreeMap<String, f64>,
    pub iters: usize,
    pub converged: bool,
    pub seconds: f64,
    pub measure: Option<MeasureField>,
    pub quantiles: Option<QuantileField>,
    pub spd: Option<SpdField>,
    /// Why `measure` is absent, when it could not be formed.
    pub missing_measure: Option<String>,
}

impl Solution {
    fn new(energy: f64, dual_bound: Option<f64>, iters: usize, converged: bool) -> Self {
        Solution {
            energy,
            dual_bound,
            iters,
            converged,
            ..Default::default()
        }
    }

    fn with_measure(mut self, mu: MeasureField) -> Self {
        self.measure = Some(mu);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub value: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub energy: f64,
    pub dual_bound: Option<f64>,
    /// energy − dual_bound.
    pub gap: Option<f64>,
    pub residuals: BTreeMap<String, f64>,
    pub checks: BTreeMap<String, CheckOutcome>,
    pub iters: usize,
    pub seconds: f64,
}

impl RunSummary {
    pub fn new(sol: &Solution, checks: BTreeMap<String, CheckOutcome>) -> Self {
        RunSummary {
            schema: SUMMARY_SCHEMA.to_string(),
            energy: sol.energy,
            dual_bound: sol.dual_bound,
            gap: sol.dual_bound.map(|d| sol.energy - d),
            residuals: sol.residuals.clone(),
            checks,
            iters: sol.iters,
            seconds: sol.seconds,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.values().all(|c| c.pass)
    }
}

// ---------------------------------------------------------------------------
// Files

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Shortest decimal that parses back to the same f64.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// One row per Ω node: the p coordinates, then `width` values named
/// `<prefix><j>`.
pub fn write_node_table(
    path: &Path,
    disc: &Discretization,
    prefix: &str,
    width: usize,
    values: &[f64],
) -> CliResult<()> {
    write_table(path, disc.p(), &disc.omega_coords, prefix, width, values)
}

pub fn write_table(
    path: &Path,
    p: usize,
    coords: &[[f64; 2]],
    prefix: &str,
    width: usize,
    values: &[f64],
) -> CliResult<()> {
    if values.len() != coords.len() * width {
        return Err(Error::Shape(format!(
            "{} values for {} rows of width {width}",
            values.len(),
            coords.len()
        ))
        .into());
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = (0..p)
        .map(|a| format!("xi{a}"))
        .chain((0..width).map(|j| format!("{prefix}{j}")))
        .collect();
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (c, row) in coords.iter().zip(values.chunks(width.max(1))) {
        let rec: Vec<String> = c[..p].iter().chain(row).map(|v| format_f64(*v)).collect();
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a table written by [`write_table`], checking the coordinate
/// columns against `coords` and the value width against `width`.
pub fn read_table(path: &Path, p: usize, coords: &[[f64; 2]], width: usize) -> CliResult<Vec<f64>> {
    let (w, values) = read_table_any(path, p, coords)?;
    if w != width {
        return Err(io_err(
            path,
            format!("expected {width} value columns, found {w}"),
        ));
    }
    Ok(values)
}

fn read_table_any(path: &Path, p: usize, coords: &[[f64; 2]]) -> CliResult<(usize, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let ncols = r.headers().map_err(|e| io_err(path, e))?.len();
    if ncols <= p {
        return Err(io_err(path, "no value columns"));
    }
    let width = ncols - p;
    let mut values = Vec::with_capacity(coords.len() * width);
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let nums = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| io_err(path, format!("row {}: `{s}`: {e}", i + 1)))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        let c = coords
            .get(i)
            .ok_or_else(|| io_err(path, format!("more than {} rows", coords.len())))?;
        for a in 0..p {
            if (nums[a] - c[a]).abs() > 1e-9 * (1.0 + c[a].abs()) {
                return Err(io_err(
                    path,
                    format!(
                        "row {}: coordinate {} does not match the grid node {}",
                        i + 1,
                        nums[a],
                        c[a]
                    ),
                ));
            }
        }
        values.extend_from_slice(&nums[p..]);
        rows += 1;
    }
    if rows != coords.len() {
        return Err(io_err(
            path,
            format!("expected {} rows, found {rows}", coords.len()),
        ));
    }
    Ok((width, values))
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    #[serde(skip)]
    pub code: i32,
    #[serde(flatten)]
    pub summary: RunSummary,
}

fn exit_code(converged: bool, summary: &RunSummary) -> i32 {
    if !converged {
        EXIT_NOT_CONVERGED
    } else if !summary.all_pass() {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    }
}

fn run_experiment(exp: &Experiment) -> CliResult<(Solution, RunSummary)> {
    let sol = exp.solve()?;
    let checks = exp.evaluate_checks(&sol)?;
    let summary = RunSummary::new(&sol, checks);
    exp.write_artifacts(&sol, &summary)?;
    Ok((sol, summary))
}

/// `wharmonic run`: solve, check, write artifacts.
pub fn run(config: &Path) -> CliResult<RunOutcome> {
    let exp = Experiment::load(config)?;
    let (sol, summary) = run_experiment(&exp)?;
    Ok(RunOutcome {
        code: exit_code(sol.converged, &summary),
        summary,
    })
}

/// `wharmonic check`: re-evaluates the checks on the stored solution and
/// updates the stored summary.
pub fn check(config: &Path) -> CliResult<RunOutcome> {
    let exp = Experiment::load(config)?;
    let sol = exp.load_solution()?;
    let mut summary: RunSummary = read_json(&exp.out_dir.join("summary.json"))?;
    summary.checks = exp.evaluate_checks(&sol)?;
    write_json(&exp.out_dir.join("summary.json"), &summary)?;
    let code = if summary.all_pass() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    };
    Ok(RunOutcome { code, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirEpsReport {
    pub schema: String,
    pub energy: f64,
    pub eps: Vec<f64>,
    pub dir_eps: Vec<f64>,
    /// (Dir_ε − energy) / energy.
    pub rel_diff: Vec<f64>,
}

/// `wharmonic dir-eps`: approximate energies of the stored solution (solved
/// first when the output directory holds none).
pub fn dir_eps_command(config: &Path, eps: &[f64]) -> CliResult<DirEpsReport> {
    let exp = Experiment::load(config)?;
    if eps.is_empty() {
        return Err(config_err("no ε values given"));
    }
    let sol = if exp.out_dir.join("summary.json").exists() && exp.out_dir.join("field.csv").exists()
    {
        exp.load_solution()?
    } else {
        run_experiment(&exp)?.0
    };
    let mu = sol
        .measure
        .as_ref()
        .ok_or_else(|| config_err("dir-eps needs a measure field"))?;
    let values = eps
        .iter()
        .map(|&e| dir_eps(&exp.disc, mu, e).map(|d| d.value))
        .collect::<crate::Result<Vec<_>>>()?;
    let rel = values
        .iter()
        .map(|v| {
            if sol.energy != 0.0 {
                (v - sol.energy) / sol.energy
            } else {
                *v
            }
        })
        .collect();
    let report = DirEpsReport {
        schema: DIR_EPS_SCHEMA.to_string(),
        energy: sol.energy,
        eps: eps.to_vec(),
        dir_eps: values,
        rel_diff: rel,
    };
    write_json(&exp.out_dir.join("dir_eps.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    pub energy_a: f64,
    pub energy_b: f64,
    /// energy_b − energy_a.
    pub energy_delta: f64,
    /// energy_delta / energy_a (absolute delta when energy_a = 0).
    pub energy_rel_delta: f64,
    pub w2_max: f64,
    pub w2_mean: f64,
    /// w2_max in units of the largest D spacing.
    pub w2_max_cells: f64,
    /// W2 between the two measures at every Ω node.
    pub w2: Vec<f64>,
}

/// `wharmonic compare`: node-wise W2 and energy deltas between two run
/// directories on the same grid.
pub fn compare(dir_a: &Path, dir_b: &Path) -> CliResult<CompareReport> {
    let load = |dir: &Path| -> CliResult<Experiment> {
        let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
        let mut exp = Experiment::prepare(cfg, dir)?;
        exp.out_dir = dir.to_path_buf();
        Ok(exp)
    };
    let (ea, eb) = (load(dir_a)?, load(dir_b)?);
    if ea.config.grid != eb.config.grid {
        return Err(config_err("the two runs use different grids"));
    }
    let (sa, sb) = (ea.load_solution()?, eb.load_solution()?);
    let (ma, mb) = match (&sa.measure, &sb.measure) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(config_err("both runs need a stored field.csv")),
    };
    let disc = &ea.disc;
    let w2 = (0..disc.n_omega)
        .map(|k| w2_grid(disc, &normalized(ma.slice(k)), &normalized(mb.slice(k))))
        .collect::<crate::Result<Vec<_>>>()?;
    let w2_max = w2.iter().fold(0.0f64, |a, &b| a.max(b));
    let w2_mean = w2.iter().sum::<f64>() / w2.len() as f64;
    let delta = sb.energy - sa.energy;
    Ok(CompareReport {
        schema: COMPARE_SCHEMA.to_string(),
        energy_a: sa.energy,
        energy_b: sb.energy,
        energy_delta: delta,
        energy_rel_delta: if sa.energy != 0.0 {
            delta / sa.energy.abs()
        } else {
            delta
        },
        w2_max,
        w2_mean,
        w2_max_cells: w2_max / disc.max_d_spacing(),
        w2,
    })
}

fn normalized(s: &[f64]) -> Vec<f64> {
    let t: f64 = s.iter().map(|v| v.max(0.0)).sum();
    s.iter().map(|v| v.max(0.0) / t).collect()
}
