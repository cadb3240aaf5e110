//! Elliptic families ρ_A = A#ρ: the Bures-Wasserstein geometry on SPD
//! matrices, the reduced Dirichlet problem and its maximum principles.

use crate::analysis::{subharmonicity_check, SubharmonicReport};
use crate::bbsolver::harmonic_extension;
use crate::energy::{DualPotential, VelocityField};
use crate::grid::Discretization;
use crate::measures::{elliptic_density, MeasureField, ReferenceDensity};
use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Largest matrix size accepted by the matrix routines.
pub const MAX_Q: usize = 6;

fn check_square(a: &DMatrix<f64>) -> Result<usize> {
    let q = a.nrows();
    if q == 0 || q != a.ncols() || q > MAX_Q {
        return Err(Error::Shape(format!(
            "expected a square matrix of size ≤ {MAX_Q}, got {}×{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("matrix has non-finite entries".into()));
    }
    Ok(q)
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix that must be positive definite
/// with smallest eigenvalue above `floor`.
fn spd_eigen(a: &DMatrix<f64>, floor: f64) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_square(a)?;
    let asym = (a - a.transpose()).amax();
    if asym > 1e-10 * (1.0 + a.amax()) {
        return Err(Error::Invalid(format!(
            "matrix is not symmetric (defect {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let lmin = eig.eigenvalues.min();
    if !(lmin > floor) {
        return Err(Error::NotSpd(lmin));
    }
    Ok(eig)
}

fn eig_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(u * d * u.transpose()))
}

/// Relative floor below which an eigenvalue counts as singular in the
/// Lyapunov and square-root routines.
const REL_FLOOR: f64 = 1e-14;

fn rel_floor(a: &DMatrix<f64>) -> f64 {
    REL_FLOOR * a.amax()
}

/// The SPD square root.
pub fn spd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(eig_map(&spd_eigen(a, rel_floor(a))?, f64::sqrt))
}

/// Square root of a symmetric PSD matrix (negative round-off eigenvalues are
/// clipped). Sizes 1 and 2 use closed forms, which are smooth in the entries;
/// eigen-solvers add round-off noise that spoils energy comparisons.
fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.nrows() {
        1 => DMatrix::from_element(1, 1, a[(0, 0)].max(0.0).sqrt()),
        2 => {
            let a = symmetrize(a);
            let sd = a.determinant().max(0.0).sqrt();
            let denom = (a.trace() + 2.0 * sd).max(0.0).sqrt();
            if denom == 0.0 {
                return DMatrix::zeros(2, 2);
            }
            (a + DMatrix::identity(2, 2) * sd) / denom
        }
        _ => eig_map(&SymmetricEigen::new(symmetrize(a)), |l| l.max(0.0).sqrt()),
    }
}

/// W2(ρ_A, ρ_B) = (Tr(A² + B² − 2(AB²A)^{1/2}))^{1/2}.
pub fn w2_bures(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    spd_eigen(a, 0.0)?;
    spd_eigen(b, 0.0)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape("matrices differ in size".into()));
    }
    let b2 = b * b;
    let cross = psd_sqrt(&(a * &b2 * a)).trace();
    let d2 = (a * a).trace() + b2.trace() - 2.0 * cross;
    Ok(d2.max(0.0).sqrt())
}

/// L_A(H) = AH + HA.
pub fn lyap_apply(a: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    a * h + h * a
}

/// The X with SX + XS = H, through the eigenbasis of S.
pub fn lyap_solve(s: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = spd_eigen(s, rel_floor(s))?;
    if h.shape() != s.shape() {
        return Err(Error::Shape("matrices differ in size".into()));
    }
    let u = &eig.eigenvectors;
    let mut ht = u.transpose() * h * u;
    let l = &eig.eigenvalues;
    for i in 0..ht.nrows() {
        for j in 0..ht.ncols() {
            ht[(i, j)] /= l[i] + l[j];
        }
    }
    Ok(u * ht * u.transpose())
}

/// g_A(H) = ½ L_A(L_A(L_{A²}⁻¹ H)).
pub fn metric_apply(a: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = lyap_solve(&(a * a), h)?;
    Ok(lyap_apply(a, &lyap_apply(a, &x)) * 0.5)
}

/// Optimal map matrix T with T C₀ T = C₁ between covariances C₀, C₁.
fn transport_matrix(c0: &DMatrix<f64>, c1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_eigen(c0, rel_floor(c0))?;
    let s = psd_sqrt(c0);
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("covariance square root".into()))?;
    let m = psd_sqrt(&(&s * c1 * &s));
    Ok(symmetrize(&(&s_inv * m * &s_inv)))
}

/// Per-node symmetric q×q matrices, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdField {
    pub q: usize,
    pub values: Vec<f64>,
}

impl SpdField {
    pub fn from_fn(n: usize, q: usize, mut f: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(n * q * q);
        for k in 0..n {
            let m = f(k);
            if m.len() != q * q {
                return Err(Error::Shape(format!(
                    "node {k}: expected {} entries",
                    q * q
                )));
            }
            values.extend(m);
        }
        Ok(SpdField { q, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / (self.q * self.q)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        let s = self.q * self.q;
        &self.values[k * s..(k + 1) * s]
    }

    pub fn mat(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.q, self.q, self.get(k))
    }

    fn set(&mut self, k: usize, m: &DMatrix<f64>) {
        let q = self.q;
        let s = q * q;
        for i in 0..q {
            for j in 0..q {
                self.values[k * s + i * q + j] = m[(i, j)];
            }
        }
    }

    /// Smallest eigenvalue over all nodes; errors on asymmetry or a value
    /// at or below `floor`.
    pub fn check(&self, floor: f64) -> Result<f64> {
        if self.q == 0 || self.q > MAX_Q || self.values.len() % (self.q * self.q) != 0 {
            return Err(Error::Shape("SPD field layout".into()));
        }
        let mut lmin = f64::INFINITY;
        for k in 0..self.len() {
            let eig = spd_eigen(&self.mat(k), floor)?;
            lmin = lmin.min(eig.eigenvalues.min());
        }
        Ok(lmin)
    }

    /// Densities A#ρ on the D grid at every node.
    pub fn lift(&self, disc: &Discretization, rho: &ReferenceDensity) -> Result<MeasureField> {
        if self.len() != disc.n_omega {
            return Err(Error::Shape("SPD field does not match the grid".into()));
        }
        let mut values = Vec::with_capacity(disc.n_omega * disc.n_d);
        for k in 0..disc.n_omega {
            values.extend(elliptic_density(disc, self.get(k), rho)?);
        }
        Ok(MeasureField {
            n_omega: disc.n_omega,
            n_d: disc.n_d,
            values,
        })
    }

    /// Rows at the boundary nodes, in the order of `disc.boundary`.
    pub fn boundary_rows(&self, disc: &Discretization) -> SpdField {
        let mut values = Vec::with_capacity(disc.boundary.len() * self.q * self.q);
        for &k in &disc.boundary {
            values.extend_from_slice(self.get(k));
        }
        SpdField { q: self.q, values }
    }
}

/// B^α at every node, row-major, indexed [α][node].
#[derive(Clone, Debug, PartialEq)]
pub struct BField {
    pub p: usize,
    pub q: usize,
    pub values: Vec<Vec<f64>>,
}

impl BField {
    pub fn mat(&self, alpha: usize, k: usize) -> DMatrix<f64> {
        let s = self.q * self.q;
        DMatrix::from_row_slice(self.q, self.q, &self.values[alpha][k * s..(k + 1) * s])
    }
}

fn check_field(disc: &Discretization, a: &SpdField) -> Result<()> {
    if a.len() != disc.n_omega || a.values.len() != disc.n_omega * a.q * a.q {
        return Err(Error::Shape("SPD field does not match the grid".into()));
    }
    a.check(0.0)?;
    Ok(())
}

/// ½ Σ_edges (w_e/h²) W2²(ρ_{A_start}, ρ_{A_end}), the geodesic-distance
/// discretization of ½ ∫ Σ_α ⟨∂_α A, g_A(∂_α A)⟩.
pub fn riemannian_energy(disc: &Discretization, afield: &SpdField) -> Result<f64> {
    check_field(disc, afield)?;
    let mut total = 0.0;
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        for e in &disc.edges[a] {
            total +=
                e.weight / (h * h) * w2_bures(&afield.mat(e.start), &afield.mat(e.end))?.powi(2);
        }
    }
    Ok(0.5 * total)
}

/// Covariance-field version of the energy and its gradient with respect to
/// every C_k (boundary entries included).
fn energy_and_gradient(
    disc: &Discretization,
    c: &[DMatrix<f64>],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let q = c[0].nrows();
    let mut grad = vec![DMatrix::zeros(q, q); c.len()];
    let mut total = 0.0;
    let id = DMatrix::<f64>::identity(q, q);
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        for e in &disc.edges[a] {
            let (c0, c1) = (&c[e.start], &c[e.end]);
            let t = transport_matrix(c0, c1)?;
            // W2² = Tr((I − T) C₀ (I − T)), free of the cancellation in the trace formula.
            let m = &id - &t;
            let d2 = (&m * c0 * &m).trace().max(0.0);
            let s = 0.5 * e.weight / (h * h);
            total += s * d2;
            let t_inv = lyap_inverse_free(&t)?;
            grad[e.start] += (&id - &t) * s;
            grad[e.end] += (&id - t_inv) * s;
        }
    }
    Ok((total, grad))
}

fn lyap_inverse_free(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = spd_eigen(t, rel_floor(t))?;
    Ok(eig_map(&eig, |l| 1.0 / l))
}

/// Discrete Euler-Lagrange residual: at interior node k,
/// (1/W_k) Σ_edges (w_e/h²)(T_{k→nbr} − I), which tends to Σ_α ∂_α B^α + (B^α)².
#[derive(Clone, Debug)]
pub struct ElResidual {
    /// Row-major q×q residual per Ω node (zero on the boundary).
    pub field: Vec<f64>,
    pub max_norm: f64,
}

pub fn el_residual(disc: &Discretization, afield: &SpdField) -> Result<ElResidual> {
    check_field(disc, afield)?;
    let c: Vec<DMatrix<f64>> = (0..disc.n_omega).map(|k| afield.mat(k).pow(2)).collect();
    let (_, grad) = energy_and_gradient(disc, &c)?;
    Ok(residual_from_gradient(disc, afield.q, &grad))
}

fn residual_from_gradient(disc: &Discretization, q: usize, grad: &[DMatrix<f64>]) -> ElResidual {
    let mut field = vec![0.0; disc.n_omega * q * q];
    let mut max_norm = 0.0f64;
    for &k in &disc.interior {
        let r = &grad[k] * (-2.0 / disc.node_weights[k]);
        max_norm = max_norm.max(r.amax());
        for i in 0..q {
            for j in 0..q {
                field[k * q * q + i * q + j] = r[(i, j)];
            }
        }
    }
    ElResidual { field, max_norm }
}

/// B^α = L_A L_{A²}⁻¹(∂_α A) with second-order differences.
pub fn b_fields(disc: &Discretization, afield: &SpdField) -> Result<BField> {
    check_field(disc, afield)?;
    let q = afield.q;
    let s = q * q;
    let mut values = vec![vec![0.0; disc.n_omega * s]; disc.p()];
    for a in 0..disc.p() {
        for k in 0..disc.n_omega {
            let da = DMatrix::from_row_slice(q, q, &derivative2(disc, &afield.values, s, a, k));
            let am = afield.mat(k);
            let b = lyap_apply(&am, &lyap_solve(&(&am * &am), &symmetrize(&da))?);
            let b = symmetrize(&b);
            for i in 0..q {
                for j in 0..q {
                    values[a][k * s + i * q + j] = b[(i, j)];
                }
            }
        }
    }
    Ok(BField {
        p: disc.p(),
        q,
        values,
    })
}

/// Second-order derivative along Ω-axis α: centered inside, three-point
/// one-sided on ∂Ω.
fn derivative2(
    disc: &Discretization,
    values: &[f64],
    width: usize,
    alpha: usize,
    k: usize,
) -> Vec<f64> {
    let idx = disc.omega_multi(k);
    let ax = &disc.omega_axes[alpha];
    let at = |j: usize, x: usize| {
        let mut m = idx;
        m[alpha] = j;
        values[disc.omega_index(&m[..disc.p()]) * width + x]
    };
    let j = idx[alpha];
    let h = ax.h;
    (0..width)
        .map(|x| {
            if ax.n < 3 {
                (at(1, x) - at(0, x)) / h
            } else if j == 0 {
                (-3.0 * at(0, x) + 4.0 * at(1, x) - at(2, x)) / (2.0 * h)
            } else if j + 1 == ax.n {
                (3.0 * at(j, x) - 4.0 * at(j - 1, x) + at(j - 2, x)) / (2.0 * h)
            } else {
                (at(j + 1, x) - at(j - 1, x)) / (2.0 * h)
            }
        })
        .collect()
}

/// φ^α(ξ, x) = ½ B^α(ξ) x·x on the Ω × D grid.
pub fn dual_from_bures(disc: &Discretization, b: &BField) -> Result<DualPotential> {
    if b.p != disc.p()
        || b.q != disc.q()
        || b.values.iter().any(|v| v.len() != disc.n_omega * b.q * b.q)
    {
        return Err(Error::Shape("B field does not match the grid".into()));
    }
    let q = b.q;
    let mut phi = DualPotential::zeros(disc);
    for a in 0..disc.p() {
        for k in 0..disc.n_omega {
            let bm = &b.values[a][k * q * q..(k + 1) * q * q];
            for (x, c) in disc.d_coords.iter().enumerate() {
                let mut v = 0.0;
                for i in 0..q {
                    for j in 0..q {
                        v += bm[i * q + j] * c[i] * c[j];
                    }
                }
                phi.values[a][k * disc.n_d + x] = 0.5 * v;
            }
        }
    }
    Ok(phi)
}

/// The tangent velocity v^α(ξ, x) = B^α(ξ) x at the D nodes.
pub fn bures_velocity(disc: &Discretization, b: &BField) -> Result<VelocityField> {
    let q = b.q;
    if b.p != disc.p() || q != disc.q() || b.values.iter().any(|v| v.len() != disc.n_omega * q * q)
    {
        return Err(Error::Shape("B field does not match the grid".into()));
    }
    let nd = disc.n_d;
    let mut nodes = vec![vec![0.0; disc.n_omega * nd]; disc.p() * q];
    for a in 0..disc.p() {
        for k in 0..disc.n_omega {
            let bm = &b.values[a][k * q * q..(k + 1) * q * q];
            for (x, c) in disc.d_coords.iter().enumerate() {
                for i in 0..q {
                    nodes[a * q + i][k * nd + x] = (0..q).map(|j| bm[i * q + j] * c[j]).sum();
                }
            }
        }
    }
    Ok(VelocityField {
        p: disc.p(),
        q,
        faces: Vec::new(),
        nodes,
        flagged: 0,
    })
}

/// Boundary term of φ = ½B·x·x evaluated on the elliptic boundary data
/// itself: Σ_∂Ω w_b Σ_α n_α ½ tr(B^α A²). Differs from the grid boundary
/// term only by the quadrature of the lifted densities.
pub fn dual_objective(disc: &Discretization, afield: &SpdField, b: &BField) -> Result<f64> {
    check_field(disc, afield)?;
    if b.p != disc.p() || b.q != afield.q {
        return Err(Error::Shape("B field does not match the grid".into()));
    }
    let mut total = 0.0;
    for (bi, &k) in disc.boundary.iter().enumerate() {
        let n = disc.normals[bi];
        let c = afield.mat(k).pow(2);
        for a in 0..disc.p() {
            if n[a] != 0.0 {
                total += disc.boundary_weights[bi] * n[a] * 0.5 * (b.mat(a, k) * &c).trace();
            }
        }
    }
    Ok(total)
}

/// Relative level below which energy differences are not resolved; accepted
/// steps never raise the energy by more than this fraction.
pub const ENERGY_ROUNDOFF: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuresOptions {
    pub max_iters: usize,
    /// Iterations stop once the Euler-Lagrange residual max-norm falls below
    /// this, or when the line search stalls at round-off level.
    pub tol: f64,
    /// Residual max-norm (relative to the largest boundary eigenvalue) up to
    /// which a run counts as converged.
    pub accept: f64,
    /// Eigenvalue floor relative to the largest boundary eigenvalue.
    pub floor: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for BuresOptions {
    fn default() -> Self {
        BuresOptions {
            max_iters: 5000,
            tol: 1e-10,
            accept: 1e-6,
            floor: 1e-8,
            memory: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuresReport {
    pub energy: f64,
    pub el_residual: f64,
    pub iters: usize,
    pub converged: bool,
    pub energy_trace: Vec<f64>,
    /// Line-search steps rejected because an eigenvalue fell below the floor.
    pub floor_hits: usize,
}

/// Minimizes the discrete energy over the interior covariances C = A² with
/// L-BFGS and an Armijo backtracking line search; trial steps leaving the
/// SPD floor are shortened. The energy is jointly convex in the C_k, so the
/// stationary point found is the discrete minimizer.
pub fn solve_bures(
    disc: &Discretization,
    bc: &SpdField,
    opts: &BuresOptions,
) -> Result<(SpdField, BuresReport)> {
    let q = bc.q;
    if bc.len() != disc.boundary.len() {
        return Err(Error::Shape(format!(
            "expected {} boundary matrices, got {}",
            disc.boundary.len(),
            bc.len()
        )));
    }
    if !(opts.tol > 0.0) || !(opts.accept > 0.0) || opts.memory == 0 {
        return Err(Error::Invalid(
            "tolerance must be positive and memory nonzero".into(),
        ));
    }
    let bc_min = bc.check(0.0)?;
    let scale = (0..bc.len())
        .map(|b| bc.mat(b).amax())
        .fold(0.0, f64::max)
        .powi(2);
    let floor = opts.floor * scale;
    if bc_min * bc_min <= floor {
        return Err(Error::NotSpd(bc_min));
    }
    // Start from the entrywise harmonic extension of the boundary covariances,
    // a positive combination of SPD matrices.
    let s = q * q;
    let bc_cov: Vec<Vec<f64>> = (0..bc.len())
        .map(|b| {
            let c = bc.mat(b).pow(2);
            (0..s).map(|j| c[(j / q, j % q)]).collect()
        })
        .collect();
    let ext = harmonic_extension(disc, s, |b| &bc_cov[b]);
    let mut c: Vec<DMatrix<f64>> = vec![DMatrix::zeros(q, q); disc.n_omega];
    for (b, &k) in disc.boundary.iter().enumerate() {
        c[k] = DMatrix::from_row_slice(q, q, &bc_cov[b]);
    }
    for (j, &k) in disc.interior.iter().enumerate() {
        c[k] = symmetrize(&DMatrix::from_row_slice(q, q, &ext[j * s..(j + 1) * s]));
    }
    let interior = &disc.interior;
    let pack = |g: &[DMatrix<f64>]| -> Vec<f64> {
        interior
            .iter()
            .flat_map(|&k| g[k].iter().copied().collect::<Vec<_>>())
            .collect()
    };
    let apply = |c: &[DMatrix<f64>], dir: &[f64], t: f64| -> Vec<DMatrix<f64>> {
        let mut out = c.to_vec();
        for (j, &k) in interior.iter().enumerate() {
            let d = DMatrix::from_column_slice(q, q, &dir[j * s..(j + 1) * s]);
            out[k] = symmetrize(&(&c[k] + d * t));
        }
        out
    };
    let admissible = |c: &[DMatrix<f64>]| {
        interior
            .iter()
            .all(|&k| SymmetricEigen::new(c[k].clone()).eigenvalues.min() > floor)
    };

    let (mut e, mut grad) = energy_and_gradient(disc, &c)?;
    let mut trace = vec![e];
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut floor_hits = 0;
    let mut iters = 0;
    let mut res = residual_from_gradient(disc, q, &grad);
    // Newton-like scaling for the first step: the energy Hessian behaves like
    // Σ w/h², so a unit-size step in the weighted residual is a good guess.
    let h_min = disc.min_omega_spacing();
    while res.max_norm > opts.tol && iters < opts.max_iters {
        iters += 1;
        let g = pack(&grad);
        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (sv, yv, rho) in hist.iter().rev() {
            let al = rho * dot(sv, &d);
            axpy(-al, yv, &mut d);
            alphas.push(al);
        }
        let gamma = match hist.last() {
            Some((sv, yv, _)) => dot(sv, yv) / dot(yv, yv),
            None => {
                let wmax = disc.node_weights.iter().cloned().fold(0.0, f64::max);
                0.25 * h_min * h_min / wmax
            }
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((sv, yv, rho), al) in hist.iter().zip(alphas.iter().rev()) {
            let be = rho * dot(yv, &d);
            axpy(al - be, sv, &mut d);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v * gamma.abs().max(1e-300)).collect();
            slope = dot(&g, &d);
        }
        let mut t = 1.0;
        let accepted = loop {
            let trial = apply(&c, &d, t);
            if admissible(&trial) {
                let (et, gt) = energy_and_gradient(disc, &trial)?;
                // Armijo, or the approximate Wolfe test on the directional
                // derivative once energy differences reach round-off; the
                // latter may not raise the energy beyond the round-off
                // allowance.
                let dslope = dot(&pack(&gt), &d);
                let approx_wolfe = et <= e + ENERGY_ROUNDOFF * e.abs()
                    && dslope >= 0.9 * slope
                    && dslope <= -0.8 * slope;
                if et <= e + 1e-4 * t * slope || approx_wolfe {
                    break Some((trial, et, gt));
                }
            } else {
                floor_hits += 1;
            }
            t *= 0.5;
            // Below this the energy decrease is lost in round-off.
            if t < 1e-10 {
                break None;
            }
        };
        let Some((trial, et, gt)) = accepted else {
            if hist.is_empty() {
                break;
            }
            // Stale curvature pairs: restart from a scaled gradient step.
            hist.clear();
            continue;
        };
        let gn = pack(&gt);
        let sv: Vec<f64> = d.iter().map(|v| v * t).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-300 {
            hist.push((sv, yv, 1.0 / sy));
            if hist.len() > opts.memory {
                hist.remove(0);
            }
        }
        c = trial;
        e = et;
        grad = gt;
        trace.push(e);
        res = residual_from_gradient(disc, q, &grad);
    }
    let mut out = SpdField {
        q,
        values: vec![0.0; disc.n_omega * s],
    };
    for k in 0..disc.n_omega {
        out.set(k, &spd_sqrt(&c[k])?);
    }
    let converged = res.max_norm <= opts.accept * scale.sqrt();
    Ok((
        out,
        BuresReport {
            energy: e,
            el_residual: res.max_norm,
            iters,
            converged,
            energy_trace: trace,
            floor_hits,
        },
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// f(ξ) = Tr(A(ξ)² C) and its discrete subharmonicity.
pub fn quadratic_max_principle(
    disc: &Discretization,
    afield: &SpdField,
    c: &DMatrix<f64>,
    tol: f64,
) -> Result<SubharmonicReport> {
    check_field(disc, afield)?;
    check_square(c)?;
    if c.nrows() != afield.q {
        return Err(Error::Shape("C must be q×q".into()));
    }
    let lmin = SymmetricEigen::new(symmetrize(c)).eigenvalues.min();
    if lmin < -1e-12 * (1.0 + c.amax()) {
        return Err(Error::NotPsd(lmin));
    }
    let f: Vec<f64> = (0..disc.n_omega)
        .map(|k| (afield.mat(k).pow(2) * c).trace())
        .collect();
    Ok(subharmonicity_check(disc, &f, tol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetReport {
    /// min over interior nodes of det cov = det(A)².
    pub interior_min: f64,
    pub boundary_min: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Entropy bound −ln det cov ≤ sup_∂Ω(−ln det cov), checked as
/// det cov ≥ min over the boundary of det cov.
pub fn det_min_principle(disc: &Discretization, afield: &SpdField, tol: f64) -> Result<DetReport> {
    check_field(disc, afield)?;
    let det = |k: usize| afield.mat(k).determinant().powi(2);
    let interior_min = disc
        .interior
        .iter()
        .map(|&k| det(k))
        .fold(f64::INFINITY, f64::min);
    let boundary_min = disc
        .boundary
        .iter()
        .map(|&k| det(k))
        .fold(f64::INFINITY, f64::min);
    Ok(DetReport {
        interior_min,
        boundary_min,
        tol,
        pass: disc.interior.is_empty() || interior_min >= boundary_min - tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_discretization, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, b, c])
    }

    fn random_spd(rng: &mut ChaCha8Rng, q: usize, lmin: f64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(q, q, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(q, q) * lmin
    }

    fn random_sym(rng: &mut ChaCha8Rng, q: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(q, q, |_, _| rng.gen_range(-1.0..1.0));
        symmetrize(&g)
    }

    fn grid(p: usize, q: usize, n: usize) -> Discretization {
        build_discretization(&GridSpec::unit(p, q, n, 4)).unwrap()
    }

    #[test]
    fn w2_examples() {
        let a = m2(1.0, 0.2, 0.8);
        assert!(w2_bures(&a, &a).unwrap() < 1e-7);
        let d = w2_bures(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-14);
        // Commuting matrices: Tr((A − B)²).
        let (a, b) = (m2(1.0, 0.0, 2.0), m2(2.0, 0.0, 1.0));
        assert!((w2_bures(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-14);
        assert!(w2_bures(&m2(1.0, 2.0, 1.0), &a).is_err());
    }

    #[test]
    fn w2_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b, c) = (
                random_spd(&mut rng, 3, 0.1),
                random_spd(&mut rng, 3, 0.1),
                random_spd(&mut rng, 3, 0.1),
            );
            let (ab, ba) = (w2_bures(&a, &b).unwrap(), w2_bures(&b, &a).unwrap());
            assert!((ab - ba).abs() < 1e-10);
            assert!(ab <= w2_bures(&a, &c).unwrap() + w2_bures(&c, &b).unwrap() + 1e-8);
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_sym(&mut rng, 3);
        let id = DMatrix::identity(3, 3);
        assert_eq!(lyap_apply(&id, &h), &h * 2.0);
        assert!((lyap_solve(&id, &h).unwrap() - &h * 0.5).amax() < 1e-15);
        for _ in 0..20 {
            let s = random_spd(&mut rng, 4, 0.05);
            let h = random_sym(&mut rng, 4);
            let x = lyap_solve(&s, &h).unwrap();
            assert!((lyap_apply(&s, &x) - &h).norm() <= 1e-10 * h.norm());
        }
        assert!(lyap_solve(&m2(1.0, 0.0, -1.0), &h.view((0, 0), (2, 2)).into_owned()).is_err());
    }

    #[test]
    fn metric_examples() {
        let g = metric_apply(
            &DMatrix::from_element(1, 1, 3.0),
            &DMatrix::from_element(1, 1, 0.7),
        )
        .unwrap();
        assert!((g[(0, 0)] - 0.7).abs() < 1e-15);
        let (l1, l2) = (1.0f64, 3.0f64);
        let e12 = m2(0.0, 1.0, 0.0);
        let g = metric_apply(&m2(l1, 0.0, l2), &e12).unwrap();
        let want = 0.5 * (l1 + l2).powi(2) / (l1 * l1 + l2 * l2);
        assert!((g - e12 * want).amax() < 1e-14);
    }

    #[test]
    fn metric_matches_finite_differences_of_w2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_spd(&mut rng, 2, 0.5);
            let h = random_sym(&mut rng, 2);
            let exact = (&h.transpose() * metric_apply(&a, &h).unwrap()).trace();
            let f = |t: f64| w2_bures(&a, &(&a + &h * t)).unwrap().powi(2) / (t * t);
            // Error is O(t²): extrapolate from t and t/10.
            let rich = (100.0 * f(1e-4) - f(1e-3)) / 99.0;
            assert!((rich - exact).abs() <= 1e-4 * exact, "{rich} vs {exact}");
            assert!(exact > 0.0);
        }
    }

    #[test]
    fn transport_matrix_pushes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c0, c1) = (random_spd(&mut rng, 3, 0.2), random_spd(&mut rng, 3, 0.2));
        let t = transport_matrix(&c0, &c1).unwrap();
        assert!((&t * &c0 * &t - &c1).amax() < 1e-10);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let d = grid(2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<DMatrix<f64>> = (0..d.n_omega)
            .map(|_| random_spd(&mut rng, 2, 0.3))
            .collect();
        let (_, g) = energy_and_gradient(&d, &c).unwrap();
        let k = d.interior[0];
        let dir = random_sym(&mut rng, 2);
        let t = 1e-6;
        let mut cp = c.clone();
        cp[k] += &dir * t;
        let mut cm = c.clone();
        cm[k] -= &dir * t;
        let fd = (energy_and_gradient(&d, &cp).unwrap().0
            - energy_and_gradient(&d, &cm).unwrap().0)
            / (2.0 * t);
        let an = (&g[k].transpose() * &dir).trace();
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
    }

    #[test]
    fn constant_field_has_no_energy_or_residual() {
        let d = grid(2, 2, 5);
        let a = SpdField::from_fn(d.n_omega, 2, |_| vec![1.0, 0.2, 0.2, 0.7]).unwrap();
        assert!(riemannian_energy(&d, &a).unwrap() < 1e-14);
        assert!(el_residual(&d, &a).unwrap().max_norm < 1e-10);
        let b = b_fields(&d, &a).unwrap();
        assert!(b.values.iter().flatten().all(|v| v.abs() < 1e-12));
        let phi = dual_from_bures(&d, &b).unwrap();
        assert!(phi.values.iter().flatten().all(|v| v.abs() < 1e-12));
        let bc = a.boundary_rows(&d);
        let (sol, rep) = solve_bures(&d, &bc, &BuresOptions::default()).unwrap();
        assert!(rep.energy < 1e-14 && rep.iters == 0);
        assert!((sol.values.iter().zip(&a.values)).all(|(x, y)| (x - y).abs() < 1e-12));
        let r = quadratic_max_principle(&d, &a, &DMatrix::identity(2, 2), 1e-12).unwrap();
        assert!(r.pass && r.min_laplacian.abs() < 1e-9);
        let r = det_min_principle(&d, &a, 1e-12).unwrap();
        assert!(r.pass && (r.interior_min - r.boundary_min).abs() < 1e-12);
    }

    #[test]
    fn scalar_field_reduces_to_flat_geometry() {
        let d = grid(1, 1, 11);
        let a =
            SpdField::from_fn(d.n_omega, 1, |k| vec![1.0 + d.omega_coords[k][0].powi(2)]).unwrap();
        // Flat energy ½ Σ w (Δa/h)² computed directly.
        let h = d.omega_axes[0].h;
        let flat: f64 = d.edges[0]
            .iter()
            .map(|e| 0.5 * e.weight * ((a.get(e.end)[0] - a.get(e.start)[0]) / h).powi(2))
            .sum();
        assert!((riemannian_energy(&d, &a).unwrap() - flat).abs() < 1e-12);
        // B = a'/a with a centered difference for a'.
        let b = b_fields(&d, &a).unwrap();
        let k = 4;
        let da = (a.get(k + 1)[0] - a.get(k - 1)[0]) / (2.0 * h);
        assert!((b.values[0][k] - da / a.get(k)[0]).abs() < 1e-12);
        // Affine a solves the discrete Euler-Lagrange equation.
        let lin = SpdField::from_fn(d.n_omega, 1, |k| vec![1.0 + d.omega_coords[k][0]]).unwrap();
        assert!(el_residual(&d, &lin).unwrap().max_norm < 1e-10);
    }

    #[test]
    fn diagonal_b_field_is_log_derivative() {
        let d = grid(1, 2, 9);
        let a = SpdField::from_fn(d.n_omega, 2, |k| {
            let t = d.omega_coords[k][0];
            vec![1.0 + t, 0.0, 0.0, 2.0 - t * t]
        })
        .unwrap();
        let b = b_fields(&d, &a).unwrap();
        let h = d.omega_axes[0].h;
        for k in 1..d.n_omega - 1 {
            let bm = b.mat(0, k);
            for i in 0..2 {
                let di = (a.mat(k + 1)[(i, i)] - a.mat(k - 1)[(i, i)]) / (2.0 * h);
                assert!((bm[(i, i)] - di / a.mat(k)[(i, i)]).abs() < 1e-12);
            }
            assert!(bm[(0, 1)].abs() < 1e-14);
        }
    }

    #[test]
    fn interval_solutions() {
        // q = 1: linear interpolation of a.
        let d = grid(1, 1, 9);
        let bc = SpdField {
            q: 1,
            values: vec![0.5, 2.0],
        };
        let (sol, rep) = solve_bures(&d, &bc, &BuresOptions::default()).unwrap();
        assert!(
            rep.converged,
            "{} {} {} {}",
            rep.iters, rep.el_residual, rep.energy, rep.floor_hits
        );
        for k in 0..d.n_omega {
            let t = d.omega_coords[k][0];
            assert!((sol.get(k)[0] - (0.5 + 1.5 * t)).abs() < 1e-7);
        }
        assert!((rep.energy - 0.5 * 1.5f64.powi(2)).abs() < 1e-10);
        // Commuting endpoints diag(1,2) → diag(2,1): per-eigenvalue interpolation, energy 1.
        let d = grid(1, 2, 9);
        let bc = SpdField {
            q: 2,
            values: vec![1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0],
        };
        let (sol, rep) = solve_bures(&d, &bc, &BuresOptions::default()).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep
            .energy_trace
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + ENERGY_ROUNDOFF)));
        for k in 0..d.n_omega {
            let t = d.omega_coords[k][0];
            let want = m2(1.0 + t, 0.0, 2.0 - t);
            assert!((sol.mat(k) - want).amax() < 1e-6);
        }
        assert!((rep.energy - 1.0).abs() < 1e-10);
        let w = w2_bures(&bc.mat(0), &bc.mat(1)).unwrap();
        assert!((rep.energy - 0.5 * w * w).abs() < 1e-10);
        let r = det_min_principle(&d, &sol, 1e-9).unwrap();
        assert!(r.pass);
    }
}
