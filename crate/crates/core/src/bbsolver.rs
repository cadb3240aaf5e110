//! Discrete Dirichlet problem min Dir(μ, E) subject to the continuity
//! equation and fixed ∂Ω slices, by the Chambolle-Pock primal-dual method.
//!
//! Primal variables are the interior slices of μ and the momentum on interior
//! D-faces. The kinetic term is F(Ku), K interpolating μ to the staggered
//! cells; the affine continuity set is handled by an exact projection, which
//! diagonalizes AAᵀ = GGᵀ⊗I + I⊗L_D in cosine modes along D and sine modes
//! along the interior of Ω.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::{edge_dual_bound, face_links, face_mass, kinetic_energy, FaceLink};
use crate::error::{Error, Result};
use crate::grid::{apply_continuity_operator, continuity_residual, Discretization, MomentumField};
use crate::measures::{deposit_linear, MeasureField};

/// One probability vector on the D-grid per ∂Ω node, in the order of `disc.boundary`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub n_d: usize,
    pub slices: Vec<Vec<f64>>,
}

impl BoundaryData {
    pub fn from_fn(disc: &Discretization, mut f: impl FnMut(usize) -> Vec<f64>) -> Self {
        BoundaryData {
            n_d: disc.n_d,
            slices: disc.boundary.iter().map(|&k| f(k)).collect(),
        }
    }

    pub fn check_shape(&self, disc: &Discretization) -> Result<()> {
        if self.slices.len() != disc.boundary.len()
            || self.slices.iter().any(|s| s.len() != disc.n_d)
        {
            return Err(Error::Shape("boundary data does not match the grid".into()));
        }
        Ok(())
    }

    pub fn slice(&self, b: usize) -> &[f64] {
        &self.slices[b]
    }

    /// Shape, nonnegativity and unit mass (within `tol`) of every slice.
    pub fn validate(&self, disc: &Discretization, tol: f64) -> Result<()> {
        self.check_shape(disc)?;
        for (b, s) in self.slices.iter().enumerate() {
            if s.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidMeasure(format!(
                    "boundary slice {b} has a negative or non-finite entry"
                )));
            }
            let m: f64 = s.iter().sum();
            if m == 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "boundary slice {b} has zero mass"
                )));
            }
            if (m - 1.0).abs() > tol {
                return Err(Error::InvalidMeasure(format!(
                    "boundary slice {b} has mass {m}"
                )));
            }
        }
        Ok(())
    }

    /// Rescales every slice to unit mass.
    pub fn normalized(mut self) -> Self {
        for s in self.slices.iter_mut() {
            let m: f64 = s.iter().sum();
            if m > 0.0 {
                s.iter_mut().for_each(|v| *v /= m);
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitStrategy {
    Flat,
    Radial { x0: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Primal step; derived from the operator norm when absent.
    pub tau: Option<f64>,
    /// Dual step; derived from the operator norm when absent.
    pub sigma: Option<f64>,
    /// Ratio τ/σ used when the steps are derived.
    pub step_ratio: f64,
    pub tol_residual: f64,
    pub tol_energy: f64,
    pub mu_floor: f64,
    pub theta: f64,
    pub seed: u64,
    pub init: InitStrategy,
    /// Iterations between convergence checks.
    pub check_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 20_000,
            tau: None,
            sigma: None,
            step_ratio: 1.0,
            tol_residual: 1e-6,
            tol_energy: 1e-7,
            mu_floor: 1e-12,
            theta: 1.0,
            seed: 0,
            init: InitStrategy::Flat,
            check_every: 50,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iters == 0 || self.check_every == 0 {
            return Err(Error::Invalid(
                "max_iters and check_every must be positive".into(),
            ));
        }
        if !pos(self.step_ratio)
            || !pos(self.tol_residual)
            || !pos(self.tol_energy)
            || !(self.mu_floor >= 0.0)
        {
            return Err(Error::Invalid(
                "solver tolerances and step ratio must be positive".into(),
            ));
        }
        if !(self.theta >= 0.0 && self.theta <= 1.0) {
            return Err(Error::Invalid(
                "over-relaxation θ must lie in [0, 1]".into(),
            ));
        }
        if self.tau.map_or(false, |t| !pos(t)) || self.sigma.map_or(false, |s| !pos(s)) {
            return Err(Error::Invalid("step sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub energy: f64,
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
    /// Energy at every convergence check.
    pub energy_trace: Vec<f64>,
    /// Lower bound from the multiplier of the continuity constraint.
    pub dual_bound: f64,
    pub gap: f64,
    /// Total mass moved by the final clipping and renormalization.
    pub renormalization: f64,
    pub tau: f64,
    pub sigma: f64,
    pub op_norm: f64,
    pub seconds: f64,
}

/// Proximal point of γ·|e|²/(2m) (+∞ for m < 0, 0 at (0,0)) at (m, e).
///
/// With s = m' + γ the optimality system reduces to the cubic
/// (s − γ − m)s² = γ|e|²/2 on s > γ, solved by Newton from above, where the
/// cubic is increasing and convex; then e' = e·m'/(m' + γ).
pub fn prox_kinetic(m: f64, e: &[f64], gamma: f64, out_e: &mut [f64]) -> f64 {
    let e2: f64 = e.iter().map(|v| v * v).sum();
    if e2 == 0.0 {
        out_e.iter_mut().for_each(|v| *v = 0.0);
        return m.max(0.0);
    }
    if m <= -e2 / (2.0 * gamma) {
        out_e.iter_mut().for_each(|v| *v = 0.0);
        return 0.0;
    }
    let c = 0.5 * gamma * e2;
    // Upper bounds for t = s − γ − m: t·s² = c with s ≥ γ, and s ≥ t when m ≥ 0.
    let t_max = if m >= 0.0 {
        (e2 / (2.0 * gamma)).min(c.cbrt())
    } else {
        e2 / (2.0 * gamma)
    };
    let mut s = gamma + m + t_max;
    for _ in 0..100 {
        let g = (s - gamma - m) * s * s - c;
        let dg = 3.0 * s * s - 2.0 * (gamma + m) * s;
        let step = g / dg;
        let next = (s - step).max(gamma);
        if (s - next).abs() <= 1e-15 * s {
            s = next;
            break;
        }
        s = next;
    }
    let mp = (s - gamma).max(0.0);
    let r = mp / s;
    for (o, v) in out_e.iter_mut().zip(e) {
        *o = v * r;
    }
    mp
}

/// Orthonormal eigenvectors (columns, row-major n×n) and eigenvalues of the
/// Neumann path Laplacian with spacing h (cosine modes).
fn cosine_basis(n: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut m = vec![0.0; n * n];
    let mut lam = vec![0.0; n];
    for k in 0..n {
        let c = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for x in 0..n {
            m[x * n + k] = c * (PI * k as f64 * (x as f64 + 0.5) / n as f64).cos();
        }
        lam[k] = (2.0 - 2.0 * (PI * k as f64 / n as f64).cos()) / (h * h);
    }
    (m, lam)
}

/// Same for the Dirichlet path Laplacian on n interior nodes (sine modes).
fn sine_basis(n: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut m = vec![0.0; n * n];
    let mut lam = vec![0.0; n];
    let c = (2.0 / (n as f64 + 1.0)).sqrt();
    for k in 0..n {
        for x in 0..n {
            m[x * n + k] = c * (PI * (k as f64 + 1.0) * (x as f64 + 1.0) / (n as f64 + 1.0)).sin();
        }
        lam[k] = (2.0 - 2.0 * (PI * (k as f64 + 1.0) / (n as f64 + 1.0)).cos()) / (h * h);
    }
    (m, lam)
}

/// Orthonormal basis matrix (columns are modes) with its transpose.
struct Basis {
    m: Vec<f64>,
    mt: Vec<f64>,
}

impl Basis {
    fn new(m: Vec<f64>, n: usize) -> Self {
        let mut mt = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                mt[b * n + a] = m[a * n + b];
            }
        }
        Basis { m, mt }
    }
}

/// Applies an n×n basis along one axis of a row-major tensor: forward gives
/// mode coefficients (Mᵀv), inverse reconstructs (Mv).
fn apply_axis(
    data: &mut [f64],
    dims: &[usize],
    axis: usize,
    basis: &Basis,
    forward: bool,
    buf: &mut Vec<f64>,
) {
    use nalgebra::{DMatrixView, DMatrixViewMut};
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    // Read column-major, `m` is Mᵀ and `mt` is M.
    let (as_mt, as_m) = (
        DMatrixView::from_slice(&basis.m, n, n),
        DMatrixView::from_slice(&basis.mt, n, n),
    );
    if inner == 1 {
        // Rows of the tensor are the columns of an n × outer matrix X: X ← MᵀX or MX.
        buf.resize(n * outer, 0.0);
        let x = DMatrixView::from_slice(data, n, outer);
        let mut out = DMatrixViewMut::from_slice(&mut buf[..], n, outer);
        out.gemm(1.0, if forward { &as_mt } else { &as_m }, &x, 0.0);
        data.copy_from_slice(&buf[..n * outer]);
        return;
    }
    // Each outer block is the transpose Yᵀ (inner × n) of the n × inner slab Y:
    // Yᵀ ← YᵀM (forward) or YᵀMᵀ (inverse).
    buf.resize(n * inner, 0.0);
    for o in 0..outer {
        let block = &mut data[o * n * inner..(o + 1) * n * inner];
        {
            let y = DMatrixView::from_slice(block, inner, n);
            let mut out = DMatrixViewMut::from_slice(&mut buf[..], inner, n);
            out.gemm(1.0, &y, if forward { &as_m } else { &as_mt }, 0.0);
        }
        block.copy_from_slice(&buf[..n * inner]);
    }
}

/// Exact solver for AAᵀz = r, A the continuity operator restricted to the
/// interior slices of μ and the interior D-faces of E.
pub(crate) struct ContinuityProjector {
    p: usize,
    q: usize,
    nd: usize,
    d_dims: Vec<usize>,
    d_mats: Vec<Basis>,
    d_lam: Vec<f64>,
    o_dims: Vec<usize>,
    o_mats: Vec<Basis>,
    o_lam: Vec<f64>,
    /// Position of each Ω node among the interior nodes.
    interior_pos: Vec<Option<usize>>,
}

impl ContinuityProjector {
    pub(crate) fn new(disc: &Discretization) -> Self {
        let q = disc.q();
        let p = disc.p();
        let mut d_mats = Vec::new();
        let mut d_lams = Vec::new();
        for ax in &disc.d_axes {
            let (m, l) = cosine_basis(ax.n, ax.h);
            d_mats.push(Basis::new(m, ax.n));
            d_lams.push(l);
        }
        let d_lam: Vec<f64> = (0..disc.n_d)
            .map(|k| {
                let idx = disc.d_multi(k);
                (0..q).map(|i| d_lams[i][idx[i]]).sum()
            })
            .collect();
        let mut o_mats = Vec::new();
        let mut o_lams = Vec::new();
        let mut o_dims = Vec::new();
        for ax in &disc.omega_axes {
            let (m, l) = sine_basis(ax.n - 2, ax.h);
            o_mats.push(Basis::new(m, ax.n - 2));
            o_lams.push(l);
            o_dims.push(ax.n - 2);
        }
        let n_int: usize = o_dims.iter().product();
        let o_lam: Vec<f64> = (0..n_int)
            .map(|k| {
                if p == 1 {
                    o_lams[0][k]
                } else {
                    o_lams[0][k / o_dims[1]] + o_lams[1][k % o_dims[1]]
                }
            })
            .collect();
        let mut interior_pos = vec![None; disc.n_omega];
        for (j, &k) in disc.interior.iter().enumerate() {
            interior_pos[k] = Some(j);
        }
        ContinuityProjector {
            p,
            q,
            nd: disc.n_d,
            d_dims: disc.spec.n_d.clone(),
            d_mats,
            d_lam,
            o_dims,
            o_mats,
            o_lam,
            interior_pos,
        }
    }

    fn d_transform(&self, rows: &mut [f64], forward: bool, buf: &mut Vec<f64>) {
        let count = rows.len() / self.nd;
        let mut dims = vec![count];
        dims.extend(&self.d_dims);
        for i in 0..self.q {
            apply_axis(rows, &dims, i + 1, &self.d_mats[i], forward, buf);
        }
    }

    /// Solves AAᵀz = r. Returns (Aᵀz restricted to μ, z); the momentum part
    /// of Aᵀz is Dᵀz, applied by the caller.
    pub(crate) fn solve(&self, disc: &Discretization, r: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let nd = self.nd;
        let mut buf = Vec::new();
        let mut rhat: Vec<Vec<f64>> = r.to_vec();
        for a in 0..self.p {
            self.d_transform(&mut rhat[a], true, &mut buf);
        }
        let n_int = disc.interior.len();
        // g = Gᵀ r̂ on interior nodes.
        let mut g = vec![0.0; n_int * nd];
        for a in 0..self.p {
            let h = disc.omega_axes[a].h;
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let row = &rhat[a][ei * nd..(ei + 1) * nd];
                if let Some(j) = self.interior_pos[edge.end] {
                    for (gv, rv) in g[j * nd..(j + 1) * nd].iter_mut().zip(row) {
                        *gv += rv / h;
                    }
                }
                if let Some(j) = self.interior_pos[edge.start] {
                    for (gv, rv) in g[j * nd..(j + 1) * nd].iter_mut().zip(row) {
                        *gv -= rv / h;
                    }
                }
            }
        }
        // (GᵀG + λ_k) δ = g in sine modes along Ω.
        let mut dims = self.o_dims.clone();
        dims.push(nd);
        for a in 0..self.p {
            apply_axis(&mut g, &dims, a, &self.o_mats[a], true, &mut buf);
        }
        for j in 0..n_int {
            for k in 0..nd {
                g[j * nd + k] /= self.o_lam[j] + self.d_lam[k];
            }
        }
        for a in 0..self.p {
            apply_axis(&mut g, &dims, a, &self.o_mats[a], false, &mut buf);
        }
        // z_k = (r̂_k − G δ_k)/λ_k, zero in the constant mode.
        let mut z = rhat;
        for a in 0..self.p {
            let h = disc.omega_axes[a].h;
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let row = &mut z[a][ei * nd..(ei + 1) * nd];
                if let Some(j) = self.interior_pos[edge.end] {
                    for (zv, dv) in row.iter_mut().zip(&g[j * nd..(j + 1) * nd]) {
                        *zv -= dv / h;
                    }
                }
                if let Some(j) = self.interior_pos[edge.start] {
                    for (zv, dv) in row.iter_mut().zip(&g[j * nd..(j + 1) * nd]) {
                        *zv += dv / h;
                    }
                }
                for k in 0..nd {
                    row[k] = if self.d_lam[k] > 0.0 {
                        row[k] / self.d_lam[k]
                    } else {
                        0.0
                    };
                }
            }
            self.d_transform(&mut z[a], false, &mut buf);
        }
        self.d_transform(&mut g, false, &mut buf);
        (g, z)
    }
}

/// Dᵀz on interior faces: the momentum part of Aᵀz.
fn momentum_adjoint(disc: &Discretization, z: &[Vec<f64>], out: &mut MomentumField) {
    let nd = disc.n_d;
    for a in 0..disc.p() {
        for i in 0..disc.q() {
            let hi = disc.d_axes[i].h;
            let nf = disc.faces[i].len();
            let c = out.comp_mut(a, i);
            for ei in 0..disc.edges[a].len() {
                let row = &z[a][ei * nd..(ei + 1) * nd];
                for &f in &disc.interior_faces[i] {
                    let face = disc.faces[i][f];
                    c[ei * nf + f] = (row[face.lo.unwrap()] - row[face.hi.unwrap()]) / hi;
                }
            }
        }
    }
}

fn full_measure(disc: &Discretization, bc: &BoundaryData, interior: &[f64]) -> MeasureField {
    let nd = disc.n_d;
    let mut mu = MeasureField::zeros(disc);
    for (b, &k) in disc.boundary.iter().enumerate() {
        mu.slice_mut(k).copy_from_slice(bc.slice(b));
    }
    for (j, &k) in disc.interior.iter().enumerate() {
        mu.slice_mut(k)
            .copy_from_slice(&interior[j * nd..(j + 1) * nd]);
    }
    mu
}

fn interior_values(disc: &Discretization, mu: &MeasureField) -> Vec<f64> {
    let mut out = Vec::with_capacity(disc.interior.len() * disc.n_d);
    for &k in &disc.interior {
        out.extend_from_slice(mu.slice(k));
    }
    out
}

/// Orthogonal projection of (μ_int, E) onto the continuity constraint.
fn project(
    disc: &Discretization,
    proj: &ContinuityProjector,
    bc: &BoundaryData,
    mu_int: &mut [f64],
    e: &mut MomentumField,
) {
    let full = full_measure(disc, bc, mu_int);
    let r = apply_continuity_operator(disc, &full.values, e).expect("shapes are consistent");
    let (dmu, z) = proj.solve(disc, &r.values);
    for (m, d) in mu_int.iter_mut().zip(&dmu) {
        *m -= d;
    }
    let mut de = MomentumField::zeros(disc);
    momentum_adjoint(disc, &z, &mut de);
    for (ev, dv) in e
        .components
        .iter_mut()
        .flatten()
        .zip(de.components.iter().flatten())
    {
        *ev -= dv;
    }
}

/// Discrete harmonic extension (5-point / 3-point Laplacian with Dirichlet
/// data) of `width` values per boundary node; returns the interior rows in
/// the order of `disc.interior`.
pub(crate) fn harmonic_extension<'a>(
    disc: &Discretization,
    width: usize,
    boundary: impl Fn(usize) -> &'a [f64],
) -> Vec<f64> {
    let n_int = disc.interior.len();
    let mut pos = vec![None; disc.n_omega];
    for (j, &k) in disc.interior.iter().enumerate() {
        pos[k] = Some(j);
    }
    let mut rhs = vec![0.0; n_int * width];
    for a in 0..disc.p() {
        let h2 = disc.omega_axes[a].h.powi(2);
        for edge in &disc.edges[a] {
            for (x, y) in [(edge.start, edge.end), (edge.end, edge.start)] {
                if let (Some(j), Some(b)) = (pos[x], disc.boundary_pos[y]) {
                    for (r, v) in rhs[j * width..(j + 1) * width].iter_mut().zip(boundary(b)) {
                        *r += v / h2;
                    }
                }
            }
        }
    }
    let mut dims = Vec::new();
    let mut mats = Vec::new();
    let mut lams = Vec::new();
    for ax in &disc.omega_axes {
        let (m, l) = sine_basis(ax.n - 2, ax.h);
        mats.push(Basis::new(m, ax.n - 2));
        lams.push(l);
        dims.push(ax.n - 2);
    }
    dims.push(width);
    let mut buf = Vec::new();
    for a in 0..disc.p() {
        apply_axis(&mut rhs, &dims, a, &mats[a], true, &mut buf);
    }
    for (j, row) in rhs.chunks_mut(width).enumerate() {
        let lam = if disc.p() == 1 {
            lams[0][j]
        } else {
            lams[0][j / dims[1]] + lams[1][j % dims[1]]
        };
        row.iter_mut().for_each(|v| *v /= lam);
    }
    for a in 0..disc.p() {
        apply_axis(&mut rhs, &dims, a, &mats[a], false, &mut buf);
    }
    rhs
}

/// Starting point of the solver. "flat": per D-node discrete harmonic
/// extension of the boundary slices; "radial": T_r-pushforward of the nearest
/// boundary slice toward x₀, with 1 − r the normalized distance to ∂Ω.
pub fn initialize(
    bc: &BoundaryData,
    disc: &Discretization,
    strategy: &InitStrategy,
) -> Result<(MeasureField, MomentumField)> {
    bc.validate(disc, 1e-9)?;
    let nd = disc.n_d;
    let mut mu = full_measure(disc, bc, &vec![0.0; disc.interior.len() * nd]);
    match strategy {
        InitStrategy::Flat => {
            let ext = harmonic_extension(disc, nd, |b| bc.slice(b));
            for (j, &k) in disc.interior.iter().enumerate() {
                let row: Vec<f64> = ext[j * nd..(j + 1) * nd]
                    .iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let s: f64 = row.iter().sum();
                mu.slice_mut(k)
                    .copy_from_slice(&row.iter().map(|v| v / s).collect::<Vec<_>>());
            }
        }
        InitStrategy::Radial { x0 } => {
            let dist = |k: usize| -> f64 {
                let c = disc.omega_coords[k];
                (0..disc.p())
                    .map(|a| {
                        let ax = &disc.omega_axes[a];
                        (c[a] - ax.lo).min(ax.hi - c[a])
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let dmax = (0..disc.n_omega).map(dist).fold(0.0, f64::max);
            for &k in &disc.interior {
                let c = disc.omega_coords[k];
                let nearest = (0..disc.boundary.len())
                    .min_by(|&a, &b| {
                        let da = sq_dist(c, disc.omega_coords[disc.boundary[a]]);
                        let db = sq_dist(c, disc.omega_coords[disc.boundary[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                let r = 1.0 - dist(k) / dmax;
                let out = push_toward(disc, bc.slice(nearest), r, *x0);
                mu.slice_mut(k).copy_from_slice(&out);
            }
        }
    }
    Ok((mu, MomentumField::zeros(disc)))
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Pushforward of a grid measure by T_r(x) = r x + (1 − r) x₀, deposited
/// multilinearly on the grid.
pub fn push_toward(disc: &Discretization, slice: &[f64], r: f64, x0: [f64; 2]) -> Vec<f64> {
    let q = disc.q();
    let mut out = vec![0.0; disc.n_d];
    for (x, &m) in slice.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let c = disc.d_coords[x];
        let y = [r * c[0] + (1.0 - r) * x0[0], r * c[1] + (1.0 - r) * x0[1]];
        if q == 1 {
            deposit_linear(&disc.d_axes[0], y[0], m, &mut out);
        } else {
            let mut w0 = vec![0.0; disc.spec.n_d[0]];
            let mut w1 = vec![0.0; disc.spec.n_d[1]];
            deposit_linear(&disc.d_axes[0], y[0], 1.0, &mut w0);
            deposit_linear(&disc.d_axes[1], y[1], 1.0, &mut w1);
            for (a, &u) in w0.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                for (b, &v) in w1.iter().enumerate() {
                    if v != 0.0 {
                        out[disc.d_index(&[a, b])] += m * u * v;
                    }
                }
            }
        }
    }
    out
}

/// Cell interpolation K and its adjoint: m_c = ½(M_f(μ_start) + M_f(μ_end)).
struct CellMap {
    links: Vec<Vec<FaceLink>>,
}

impl CellMap {
    fn masses(&self, disc: &Discretization, mu: &MeasureField, out: &mut [Vec<f64>]) {
        let q = disc.q();
        for a in 0..disc.p() {
            for i in 0..q {
                let nf = disc.faces[i].len();
                let o = &mut out[a * q + i];
                for (ei, edge) in disc.edges[a].iter().enumerate() {
                    let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                    for l in &self.links[i] {
                        o[ei * nf + l.f] = 0.5 * (face_mass(l, s) + face_mass(l, t));
                    }
                }
            }
        }
    }

    /// Adds Kᵀ_m y to the interior-slice gradient.
    fn adjoint(
        &self,
        disc: &Discretization,
        pos: &[Option<usize>],
        y: &[Vec<f64>],
        out: &mut [f64],
    ) {
        let q = disc.q();
        let nd = disc.n_d;
        for a in 0..disc.p() {
            for i in 0..q {
                let nf = disc.faces[i].len();
                let src = &y[a * q + i];
                for (ei, edge) in disc.edges[a].iter().enumerate() {
                    for n in [edge.start, edge.end] {
                        if let Some(j) = pos[n] {
                            let row = &mut out[j * nd..(j + 1) * nd];
                            for l in &self.links[i] {
                                let v = 0.5 * src[ei * nf + l.f];
                                row[l.lo] += v * l.a_lo;
                                row[l.hi] += v * l.a_hi;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn estimate_norm(disc: &Discretization, cells: &CellMap, pos: &[Option<usize>], seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nd = disc.n_d;
    let n_int = disc.interior.len();
    let mut x: Vec<f64> = (0..n_int * nd).map(|_| rng.gen::<f64>()).collect();
    let zero_bc = BoundaryData {
        n_d: nd,
        slices: vec![vec![0.0; nd]; disc.boundary.len()],
    };
    let mut m: Vec<Vec<f64>> = (0..disc.p() * disc.q())
        .map(|c| vec![0.0; disc.component_len(c / disc.q(), c % disc.q())])
        .collect();
    let mut est = 0.0;
    for _ in 0..60 {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= n);
        let full = full_measure(disc, &zero_bc, &x);
        cells.masses(disc, &full, &mut m);
        let mut back = vec![0.0; n_int * nd];
        cells.adjoint(disc, pos, &m, &mut back);
        est = back.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = back;
    }
    // The momentum block of K is the identity.
    est.sqrt().max(1.0)
}

/// Chambolle-Pock iterations for the discrete Dirichlet problem.
pub fn solve_dirichlet(
    bc: &BoundaryData,
    disc: &Discretization,
    opts: &SolverOptions,
) -> Result<(MeasureField, MomentumField, SolveReport)> {
    let start = Instant::now();
    opts.validate()?;
    bc.validate(disc, 1e-9)?;
    let bc = bc.clone().normalized();
    let nd = disc.n_d;
    let q = disc.q();
    let proj = ContinuityProjector::new(disc);
    let cells = CellMap {
        links: face_links(disc),
    };
    let pos = proj.interior_pos.clone();
    let op_norm = estimate_norm(disc, &cells, &pos, opts.seed);
    let (tau, sigma) = match (opts.tau, opts.sigma) {
        (Some(t), Some(s)) => (t, s),
        (Some(t), None) => (t, 0.99 / (t * op_norm * op_norm)),
        (None, Some(s)) => (0.99 / (s * op_norm * op_norm), s),
        (None, None) => {
            let t = opts.step_ratio.sqrt() * 0.99 / op_norm;
            (t, 0.99 / (t * op_norm * op_norm))
        }
    };
    if tau * sigma * op_norm * op_norm >= 1.0 {
        return Err(Error::Invalid(format!(
            "step sizes violate τσ‖K‖² < 1 (‖K‖ ≈ {op_norm:.4})"
        )));
    }

    let (mu0, mut e) = initialize(&bc, disc, &opts.init)?;
    let mut mu_int = interior_values(disc, &mu0);
    project(disc, &proj, &bc, &mut mu_int, &mut e);
    let mut mu_bar = mu_int.clone();
    let mut e_bar = e.clone();
    let ncomp = disc.p() * q;
    let comp_len = |c: usize| disc.component_len(c / q, c % q);
    let mut ym: Vec<Vec<f64>> = (0..ncomp).map(|c| vec![0.0; comp_len(c)]).collect();
    let mut ye: Vec<Vec<f64>> = ym.clone();
    let mut m_cells = ym.clone();
    let mut trace = Vec::new();
    let mut last_energy = f64::NAN;
    let mut iters = 0;
    let mut converged = false;
    // Energies below this are zero to round-off; relative changes are taken
    // against it so constant data can converge.
    let d_diam2: f64 = disc.d_axes.iter().map(|a| a.length().powi(2)).sum();
    let o_len = disc
        .omega_axes
        .iter()
        .map(|a| a.length())
        .fold(f64::INFINITY, f64::min);
    let energy_floor = 1e-12 * disc.omega_volume() * d_diam2 / (o_len * o_len);
    let mut grad_mu = vec![0.0; mu_int.len()];
    let mut pe = [0.0];

    while iters < opts.max_iters {
        // Dual step: y ← σ(w − prox_{F/σ}(w)), w = y/σ + K ū.
        let full = full_measure(disc, &bc, &mu_bar);
        cells.masses(disc, &full, &mut m_cells);
        for a in 0..disc.p() {
            for i in 0..q {
                let c = a * q + i;
                let nf = disc.faces[i].len();
                let eb = e_bar.comp(a, i);
                for (ei, edge) in disc.edges[a].iter().enumerate() {
                    let gamma = edge.weight / sigma;
                    for &f in &disc.interior_faces[i] {
                        let k = ei * nf + f;
                        let wm = ym[c][k] / sigma + m_cells[c][k];
                        let we = ye[c][k] / sigma + eb[k];
                        let pm = prox_kinetic(wm, &[we], gamma, &mut pe);
                        ym[c][k] = sigma * (wm - pm);
                        ye[c][k] = sigma * (we - pe[0]);
                    }
                }
            }
        }
        // Primal step: u ← Proj(u − τ Kᵀy), then extrapolate.
        grad_mu.iter_mut().for_each(|v| *v = 0.0);
        cells.adjoint(disc, &pos, &ym, &mut grad_mu);
        let mu_prev = mu_int.clone();
        let e_prev = e.clone();
        for (m, g) in mu_int.iter_mut().zip(&grad_mu) {
            *m -= tau * g;
        }
        for (comp, yc) in e.components.iter_mut().zip(&ye) {
            for (v, y) in comp.iter_mut().zip(yc) {
                *v -= tau * y;
            }
        }
        project(disc, &proj, &bc, &mut mu_int, &mut e);
        for k in 0..mu_int.len() {
            mu_bar[k] = mu_int[k] + opts.theta * (mu_int[k] - mu_prev[k]);
        }
        for (c, comp) in e_bar.components.iter_mut().enumerate() {
            for (k, v) in comp.iter_mut().enumerate() {
                *v = e.components[c][k]
                    + opts.theta * (e.components[c][k] - e_prev.components[c][k]);
            }
        }
        iters += 1;

        if iters % opts.check_every == 0 {
            let en = cell_energy(disc, &full_measure(disc, &bc, &mu_int), &e, opts.mu_floor);
            trace.push(en);
            let rel = ((en - last_energy) / en.abs().max(energy_floor)).abs();
            last_energy = en;
            if rel <= opts.tol_energy {
                converged = true;
                break;
            }
        }
    }

    // Cleanup: clip, renormalize, and restore the constraint through E alone.
    let mut renorm = 0.0;
    for row in mu_int.chunks_mut(nd) {
        let mut moved = 0.0;
        for v in row.iter_mut() {
            if *v < 0.0 {
                moved -= *v;
                *v = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        moved += (s - 1.0).abs();
        row.iter_mut().for_each(|v| *v /= s);
        renorm += moved;
    }
    let mu = full_measure(disc, &bc, &mu_int);
    repair_momentum(disc, &proj, &mu, &mut e);
    let residual = continuity_residual(disc, &mu, &e, &bc)?.max_norm;
    let ke = kinetic_energy(disc, &mu, &e)?;
    let energy = if ke.flagged > 0 {
        cell_energy(disc, &mu, &e, opts.mu_floor)
    } else {
        ke.value
    };

    // Multiplier of the continuity constraint: Aᵀλ = −Kᵀy.
    let mut kty = vec![0.0; mu_int.len()];
    cells.adjoint(disc, &pos, &ym, &mut kty);
    let mut ky = MomentumField::zeros(disc);
    for (c, comp) in ky.components.iter_mut().enumerate() {
        comp.copy_from_slice(&ye[c]);
    }
    let zero_bc = BoundaryData {
        n_d: nd,
        slices: vec![vec![0.0; nd]; disc.boundary.len()],
    };
    let r = apply_continuity_operator(disc, &full_measure(disc, &zero_bc, &kty).values, &ky)?;
    let (_, z) = proj.solve(disc, &r.values);
    let psi: Vec<Vec<f64>> = (0..disc.p())
        .map(|a| {
            let mut out = Vec::with_capacity(disc.constraint_len(a));
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                for x in 0..nd {
                    out.push(-z[a][ei * nd + x] / edge.weight);
                }
            }
            out
        })
        .collect();
    let dual_bound = edge_dual_bound(disc, &bc, &psi)?;
    let converged = converged && residual <= opts.tol_residual;
    let report = SolveReport {
        energy,
        residual,
        iters,
        converged,
        energy_trace: trace,
        dual_bound,
        gap: energy - dual_bound,
        renormalization: renorm,
        tau,
        sigma,
        op_norm,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((mu, e, report))
}

/// Kinetic energy with cells at or below the floor skipped (used while μ
/// may be slightly negative inside the iteration).
fn cell_energy(disc: &Discretization, mu: &MeasureField, e: &MomentumField, floor: f64) -> f64 {
    let links = face_links(disc);
    let mut value = 0.0;
    for a in 0..disc.p() {
        for i in 0..disc.q() {
            let nf = disc.faces[i].len();
            let c = e.comp(a, i);
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                let mut acc = 0.0;
                for l in &links[i] {
                    let m = 0.5 * (face_mass(l, s) + face_mass(l, t));
                    let v = c[ei * nf + l.f];
                    if m > floor {
                        acc += v * v / (2.0 * m);
                    }
                }
                value += edge.weight * acc;
            }
        }
    }
    value
}

/// Least-norm correction of E restoring the continuity constraint for fixed
/// μ whose slices all carry unit mass.
fn repair_momentum(
    disc: &Discretization,
    proj: &ContinuityProjector,
    mu: &MeasureField,
    e: &mut MomentumField,
) {
    let nd = disc.n_d;
    let r = apply_continuity_operator(disc, &mu.values, e).expect("shapes are consistent");
    let mut buf = Vec::new();
    let mut z = r.values;
    for a in 0..disc.p() {
        proj.d_transform(&mut z[a], true, &mut buf);
        for row in z[a].chunks_mut(nd) {
            for k in 0..nd {
                row[k] = if proj.d_lam[k] > 0.0 {
                    row[k] / proj.d_lam[k]
                } else {
                    0.0
                };
            }
        }
        proj.d_transform(&mut z[a], false, &mut buf);
    }
    let mut de = MomentumField::zeros(disc);
    momentum_adjoint(disc, &z, &mut de);
    for (ev, dv) in e
        .components
        .iter_mut()
        .flatten()
        .zip(de.components.iter().flatten())
    {
        *ev -= dv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_discretization, GridSpec};
    use crate::measures::{w2_quantile, Levels};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prox_examples() {
        let mut out = [0.0];
        assert_eq!(prox_kinetic(0.3, &[0.0], 0.7, &mut out), 0.3);
        assert_eq!(out[0], 0.0);
        let m = prox_kinetic(1e3, &[0.5], 1e-9, &mut out);
        assert!((m - 1e3).abs() < 1e-9 && (out[0] - 0.5).abs() < 1e-9);
        assert_eq!(prox_kinetic(-1.0, &[0.1], 1.0, &mut out), 0.0);
    }

    /// KKT conditions of the prox: m' − m = γ|e'|²/(2m'²), e' − e = −γe'/m'.
    #[test]
    fn prox_kkt_on_random_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = [0.0, 0.0];
        for _ in 0..1000 {
            let m = 4.0 * rng.gen::<f64>() - 1.0;
            let e = [2.0 * rng.gen::<f64>() - 1.0, 2.0 * rng.gen::<f64>() - 1.0];
            let g = 10f64.powf(3.0 * rng.gen::<f64>() - 2.0);
            let mp = prox_kinetic(m, &e, g, &mut out);
            if mp > 0.0 {
                let e2 = out[0] * out[0] + out[1] * out[1];
                let r1 = (mp - m) - g * e2 / (2.0 * mp * mp);
                let r2 = (out[0] - e[0]) + g * out[0] / mp;
                assert!(
                    r1.abs() < 1e-10 * (1.0 + m.abs()) && r2.abs() < 1e-10,
                    "{r1} {r2}"
                );
            } else {
                assert!(m <= -(e[0] * e[0] + e[1] * e[1]) / (2.0 * g) + 1e-12);
            }
        }
    }

    /// Compares the prox with a brute-force scan of the 1-D reduced objective.
    #[test]
    fn prox_matches_scalar_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut out = [0.0];
        for _ in 0..50 {
            let m = 2.0 * rng.gen::<f64>() - 0.5;
            let e = 2.0 * rng.gen::<f64>() - 1.0;
            let g = 0.1 + rng.gen::<f64>();
            let mp = prox_kinetic(m, &[e], g, &mut out);
            let obj = |mm: f64| {
                let ee = e * mm / (mm + g);
                g * ee * ee / (2.0 * mm) + 0.5 * (mm - m).powi(2) + 0.5 * (ee - e).powi(2)
            };
            let best = mp.max(1e-300);
            let mut lo = 1e-9;
            let mut hi = 5.0;
            // Golden-section search.
            for _ in 0..200 {
                let a = lo + 0.382 * (hi - lo);
                let b = lo + 0.618 * (hi - lo);
                if obj(a) < obj(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let ms = 0.5 * (lo + hi);
            assert!(obj(best) <= obj(ms) + 1e-10, "{mp} vs {ms}");
        }
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        for (p, q) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            let d = build_discretization(&GridSpec::unit(p, q, 5, 6)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let bc = BoundaryData::from_fn(&d, |_| (0..d.n_d).map(|_| rng.gen::<f64>()).collect())
                .normalized();
            let proj = ContinuityProjector::new(&d);
            let mut mu: Vec<f64> = (0..d.interior.len() * d.n_d)
                .map(|_| rng.gen::<f64>())
                .collect();
            let mut e = MomentumField::zeros(&d);
            for i in 0..q {
                for a in 0..p {
                    let nf = d.faces[i].len();
                    for (k, v) in e.comp_mut(a, i).iter_mut().enumerate() {
                        if !d.faces[i][k % nf].is_boundary() {
                            *v = rng.gen::<f64>() - 0.5;
                        }
                    }
                }
            }
            project(&d, &proj, &bc, &mut mu, &mut e);
            let full = full_measure(&d, &bc, &mu);
            let r = continuity_residual(&d, &full, &e, &bc).unwrap().max_norm;
            assert!(r < 1e-10, "p={p} q={q}: {r}");
            let (mu1, e1) = (mu.clone(), e.clone());
            project(&d, &proj, &bc, &mut mu, &mut e);
            assert!(mu.iter().zip(&mu1).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(e
                .components
                .iter()
                .flatten()
                .zip(e1.components.iter().flatten())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn radial_initialization_examples() {
        let d = build_discretization(&GridSpec::unit(1, 1, 5, 21)).unwrap();
        let mut dirac = vec![0.0; d.n_d];
        dirac[15] = 1.0;
        let bc = BoundaryData::from_fn(&d, |_| dirac.clone());
        let (mu, _) = initialize(&bc, &d, &InitStrategy::Radial { x0: [0.25, 0.0] }).unwrap();
        assert_eq!(mu.slice(0), &dirac[..]);
        assert_eq!(mu.slice(4), &dirac[..]);
        // Centre: r = 0, all mass at x₀ = 0.25 (node 5).
        assert!((mu.slice(2)[5] - 1.0).abs() < 1e-12);
        // Node 1: distance 0.25 of 0.5 → r = ½, image ½·0.75 + ½·0.25 = 0.5 (node 10).
        assert!((mu.slice(1)[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_boundary_gives_zero_energy() {
        let d = build_discretization(&GridSpec::unit(2, 1, 5, 12)).unwrap();
        let s: Vec<f64> = (0..d.n_d)
            .map(|x| 1.0 + (x as f64 * 0.7).sin().abs())
            .collect();
        let bc = BoundaryData::from_fn(&d, |_| s.clone()).normalized();
        let (mu, _, rep) = solve_dirichlet(
            &bc,
            &d,
            &SolverOptions {
                max_iters: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.energy < 1e-14, "{}", rep.energy);
        for k in 0..d.n_omega {
            assert!(mu
                .slice(k)
                .iter()
                .zip(bc.slice(0))
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    fn smooth_density(d: &Discretization, c: f64, w: f64) -> Vec<f64> {
        let v: Vec<f64> = d
            .d_coords
            .iter()
            .zip(&d.d_weights)
            .map(|(x, wt)| wt * ((-(x[0] - c).powi(2) / (2.0 * w * w)).exp() + 0.05))
            .collect();
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    #[test]
    fn geodesic_energy_small_grid() {
        let d = build_discretization(&GridSpec::unit(1, 1, 17, 32)).unwrap();
        let a = smooth_density(&d, 0.3, 0.08);
        let b = smooth_density(&d, 0.65, 0.12);
        let bc = BoundaryData {
            n_d: d.n_d,
            slices: vec![a.clone(), b.clone()],
        };
        let (_, _, rep) = solve_dirichlet(&bc, &d, &SolverOptions::default()).unwrap();
        let x: Vec<f64> = d.d_coords.iter().map(|c| c[0]).collect();
        let w = w2_quantile(&x, &a, &b, Levels::Exact).unwrap();
        let want = 0.5 * w * w;
        assert!(rep.dual_bound <= rep.energy + 1e-9);
        assert!(
            (rep.energy - want).abs() < 0.05 * want,
            "{} vs {want} ({rep:?})",
            rep.energy
        );
    }
}
