//! Functionals on P(D), maximum-principle checks, the radial Lipschitz
//! extension, and the square-root obstruction.

use crate::bbsolver::BoundaryData;
use crate::energy::{omega_derivative, VelocityField};
use crate::grid::Discretization;
use crate::measures::{deposit_linear, heat_flow, moments, MeasureField};
use crate::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalKind {
    /// F(μ) = Σ_x V(x) μ(x), one value per D node.
    Potential { v: Vec<f64> },
    /// F(μ) = ∫ ρ ln ρ with ρ the density w.r.t. the dual-cell volumes.
    Entropy,
    /// F(μ) = Σ_{x,y} W(x,y) μ(x) μ(y), row-major n_d × n_d.
    Interaction { w: Vec<f64> },
    /// F(μ) = ⟨cov(μ), C⟩ with C a row-major q×q PSD matrix.
    QuadraticForm { c: Vec<f64> },
}

/// Convexity class the caller vouches for. Only `Convex` functionals are
/// expected to compose subharmonically with harmonic maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convexity {
    Convex,
    Unclaimed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    #[serde(flatten)]
    pub kind: FunctionalKind,
    #[serde(default = "default_convexity")]
    pub convexity: Convexity,
}

fn default_convexity() -> Convexity {
    Convexity::Convex
}

impl FunctionalSpec {
    pub fn potential(v: Vec<f64>) -> Self {
        FunctionalSpec {
            kind: FunctionalKind::Potential { v },
            convexity: Convexity::Convex,
        }
    }

    pub fn potential_fn(disc: &Discretization, v: impl Fn(&[f64]) -> f64) -> Self {
        Self::potential(disc.d_coords.iter().map(|c| v(&c[..disc.q()])).collect())
    }

    pub fn entropy() -> Self {
        FunctionalSpec {
            kind: FunctionalKind::Entropy,
            convexity: Convexity::Convex,
        }
    }

    pub fn interaction(w: Vec<f64>) -> Self {
        FunctionalSpec {
            kind: FunctionalKind::Interaction { w },
            convexity: Convexity::Unclaimed,
        }
    }

    pub fn quadratic_form(c: Vec<f64>) -> Result<Self> {
        let q = (c.len() as f64).sqrt().round() as usize;
        if q * q != c.len() || q == 0 {
            return Err(Error::Shape("quadratic form needs a square matrix".into()));
        }
        let m = DMatrix::from_row_slice(q, q, &c);
        if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
            return Err(Error::Invalid(
                "quadratic form matrix is not symmetric".into(),
            ));
        }
        let lmin = SymmetricEigen::new(m).eigenvalues.min();
        if lmin < -1e-12 {
            return Err(Error::NotPsd(lmin));
        }
        Ok(FunctionalSpec {
            kind: FunctionalKind::QuadraticForm { c },
            convexity: Convexity::Convex,
        })
    }

    /// Checks that the data matches the grid.
    pub fn check(&self, disc: &Discretization) -> Result<()> {
        match &self.kind {
            FunctionalKind::Potential { v } => {
                if v.len() != disc.n_d {
                    return Err(Error::Shape(format!(
                        "potential has {} values for {} D nodes",
                        v.len(),
                        disc.n_d
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid(
                        "potential must be finite on the grid".into(),
                    ));
                }
            }
            FunctionalKind::Interaction { w } => {
                if w.len() != disc.n_d * disc.n_d {
                    return Err(Error::Shape("interaction kernel needs n_d² values".into()));
                }
            }
            FunctionalKind::QuadraticForm { c } => {
                if c.len() != disc.q() * disc.q() {
                    return Err(Error::Shape("quadratic form must be q×q".into()));
                }
            }
            FunctionalKind::Entropy => {}
        }
        Ok(())
    }
}

/// F(μ(ξ)) at every Ω node.
pub fn eval_functional(
    disc: &Discretization,
    mu: &MeasureField,
    f: &FunctionalSpec,
) -> Result<Vec<f64>> {
    mu.check_shape(disc)?;
    f.check(disc)?;
    let q = disc.q();
    Ok((0..disc.n_omega)
        .map(|k| {
            let s = mu.slice(k);
            match &f.kind {
                FunctionalKind::Potential { v } => v.iter().zip(s).map(|(a, b)| a * b).sum(),
                FunctionalKind::Entropy => s
                    .iter()
                    .zip(&disc.d_weights)
                    .map(|(&m, &w)| if m > 0.0 { m * (m / w).ln() } else { 0.0 })
                    .sum(),
                FunctionalKind::Interaction { w } => {
                    let n = disc.n_d;
                    (0..n)
                        .map(|x| s[x] * (0..n).map(|y| w[x * n + y] * s[y]).sum::<f64>())
                        .sum()
                }
                FunctionalKind::QuadraticForm { c } => {
                    let (_, cov) = moments(disc, s);
                    (0..q * q).map(|j| cov[j] * c[j]).sum()
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubharmonicReport {
    /// Smallest discrete Laplacian over interior nodes.
    pub min_laplacian: f64,
    /// max over the interior minus max over the boundary.
    pub max_gap: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Discrete Laplacian at an interior node.
pub fn discrete_laplacian(disc: &Discretization, values: &[f64], k: usize) -> f64 {
    let idx = disc.omega_multi(k);
    let mut lap = 0.0;
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        let mut lo = idx;
        let mut hi = idx;
        lo[a] -= 1;
        hi[a] += 1;
        lap += (values[disc.omega_index(&lo[..disc.p()])] - 2.0 * values[k]
            + values[disc.omega_index(&hi[..disc.p()])])
            / (h * h);
    }
    lap
}

/// Centered 3-/5-point Laplacian at interior nodes and the interior versus
/// boundary maximum.
pub fn subharmonicity_check(disc: &Discretization, values: &[f64], tol: f64) -> SubharmonicReport {
    let min_laplacian = disc
        .interior
        .iter()
        .map(|&k| discrete_laplacian(disc, values, k))
        .fold(f64::INFINITY, f64::min);
    let max_in = disc
        .interior
        .iter()
        .map(|&k| values[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let max_bd = disc
        .boundary
        .iter()
        .map(|&k| values[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let max_gap = max_in - max_bd;
    let min_laplacian = if disc.interior.is_empty() {
        0.0
    } else {
        min_laplacian
    };
    let max_gap = if disc.interior.is_empty() {
        f64::NEG_INFINITY
    } else {
        max_gap
    };
    SubharmonicReport {
        min_laplacian,
        max_gap,
        tol,
        pass: min_laplacian >= -tol && max_gap <= tol,
    }
}

/// Deposits a point mass on the D grid by multilinear splitting.
pub(crate) fn deposit_point(disc: &Discretization, y: &[f64], mass: f64, out: &mut [f64]) {
    let q = disc.q();
    let mut parts: Vec<Vec<f64>> = Vec::with_capacity(q);
    for i in 0..q {
        let mut v = vec![0.0; disc.d_axes[i].n];
        deposit_linear(&disc.d_axes[i], y[i], 1.0, &mut v);
        parts.push(v);
    }
    if q == 1 {
        for (o, v) in out.iter_mut().zip(&parts[0]) {
            *o += mass * v;
        }
        return;
    }
    let n1 = disc.d_axes[1].n;
    for (a, va) in parts[0].iter().enumerate().filter(|(_, v)| **v != 0.0) {
        for (b, vb) in parts[1].iter().enumerate().filter(|(_, v)| **v != 0.0) {
            out[a * n1 + b] += mass * va * vb;
        }
    }
}

fn inside_d(disc: &Discretization, y: &[f64]) -> bool {
    disc.d_axes
        .iter()
        .zip(y)
        .all(|(ax, &v)| v >= ax.lo - 1e-12 && v <= ax.hi + 1e-12)
}

#[derive(Clone, Debug)]
pub struct BallExtension {
    pub field: MeasureField,
    /// Whether each Ω node lies in the closed unit ball.
    pub inside: Vec<bool>,
    /// Radius and unit direction of each Ω node (direction (1,0) at the centre).
    pub polar: Vec<(f64, [f64; 2])>,
}

/// μ(rθ) = T_r#μ(θ) with T_r(x) = r x + (1 − r) x₀ on the unit ball of Ω.
/// `bc` gives the boundary measure at a unit direction θ. Nodes outside the
/// ball receive the boundary value of their direction.
pub fn lipschitz_extend_ball(
    disc: &Discretization,
    bc: impl Fn(&[f64; 2]) -> Vec<f64>,
    x0: &[f64],
) -> Result<BallExtension> {
    let q = disc.q();
    if x0.len() != q {
        return Err(Error::Shape("x₀ must be a point of D".into()));
    }
    if !inside_d(disc, x0) {
        return Err(Error::SupportOverflow);
    }
    let p = disc.p();
    let mut values = Vec::with_capacity(disc.n_omega * disc.n_d);
    let mut inside = Vec::with_capacity(disc.n_omega);
    let mut polar = Vec::with_capacity(disc.n_omega);
    for c in &disc.omega_coords {
        let r = (0..p).map(|a| c[a] * c[a]).sum::<f64>().sqrt();
        let dir = if r > 1e-14 {
            let mut d = [0.0; 2];
            for a in 0..p {
                d[a] = c[a] / r;
            }
            d
        } else {
            [1.0, 0.0]
        };
        inside.push(r <= 1.0 + 1e-12);
        polar.push((r, dir));
        let rr = r.min(1.0);
        let nu = bc(&dir);
        if nu.len() != disc.n_d {
            return Err(Error::Shape("boundary measure length".into()));
        }
        let mut out = vec![0.0; disc.n_d];
        for (x, &m) in disc.d_coords.iter().zip(&nu) {
            if m == 0.0 {
                continue;
            }
            let mut y = [0.0; 2];
            for i in 0..q {
                y[i] = rr * x[i] + (1.0 - rr) * x0[i];
            }
            deposit_point(disc, &y[..q], m, &mut out);
        }
        values.extend(out);
    }
    Ok(BallExtension {
        field: MeasureField {
            n_omega: disc.n_omega,
            n_d: disc.n_d,
            values,
        },
        inside,
        polar,
    })
}

/// Arc-length parameter t ∈ [0, 2π) of each boundary node of a square Ω,
/// counter-clockwise from the midpoint of the right side.
pub fn boundary_angles(disc: &Discretization) -> Result<Vec<f64>> {
    if disc.p() != 2 {
        return Err(Error::Dimension("boundary loop needs p = 2".into()));
    }
    let (ax, ay) = (&disc.omega_axes[0], &disc.omega_axes[1]);
    let (w, h) = (ax.length(), ay.length());
    let perimeter = 2.0 * (w + h);
    Ok(disc
        .boundary
        .iter()
        .map(|&k| {
            let c = disc.omega_coords[k];
            let (x, y) = (c[0] - ax.lo, c[1] - ay.lo);
            // Arc length from the bottom-left corner, counter-clockwise.
            let s = if y <= 1e-12 * h {
                x
            } else if (x - w).abs() <= 1e-12 * w {
                w + y
            } else if (y - h).abs() <= 1e-12 * h {
                w + h + (w - x)
            } else {
                2.0 * w + h + (h - y)
            };
            let s0 = w + 0.5 * h;
            2.0 * PI * ((s - s0).rem_euclid(perimeter) / perimeter)
        })
        .collect())
}

/// Boundary data ½(δ_{e^{it/2}} + δ_{−e^{it/2}}) at the arc parameter t of
/// each boundary node, heat-smoothed for time h_D².
pub fn sqrt_boundary(disc: &Discretization) -> Result<BoundaryData> {
    if disc.q() != 2 {
        return Err(Error::Dimension(
            "the square-root data lives in q = 2".into(),
        ));
    }
    if disc.d_axes.iter().any(|a| a.lo > -1.0 || a.hi < 1.0) {
        return Err(Error::SupportOverflow);
    }
    let t = boundary_angles(disc)?;
    let hd = disc.d_axes.iter().map(|a| a.h).fold(0.0, f64::max);
    let mut slices = Vec::with_capacity(t.len());
    for &tb in &t {
        let z = [(tb / 2.0).cos(), (tb / 2.0).sin()];
        let mut out = vec![0.0; disc.n_d];
        deposit_point(disc, &z, 0.5, &mut out);
        deposit_point(disc, &[-z[0], -z[1]], 0.5, &mut out);
        slices.push(heat_flow(disc, &out, hd * hd)?);
    }
    Ok(BoundaryData {
        n_d: disc.n_d,
        slices,
    })
}

/// Relative mass floor for momentum velocities fed to [`obstruction_defect`]:
/// cells lighter than this fraction of the heaviest cell on their Ω-edge are
/// treated as empty, so solver tails do not dominate the statistic.
pub const OBSTRUCTION_SUPPORT_FLOOR: f64 = 1e-4;

/// μ-weighted L² norm of the antisymmetric part
/// D^i = ∂₁v^{2i} + Σ_j v^{1j}∂_j v^{2i} − (1 ↔ 2).
pub fn obstruction_defect(
    disc: &Discretization,
    v: &VelocityField,
    mu: &MeasureField,
) -> Result<f64> {
    if disc.p() != 2 || v.p != 2 {
        return Err(Error::Dimension("the obstruction needs p = 2".into()));
    }
    mu.check_shape(disc)?;
    let q = disc.q();
    let nd = disc.n_d;
    if v.q != q || v.nodes.len() != 2 * q || v.nodes.iter().any(|c| c.len() != disc.n_omega * nd) {
        return Err(Error::Shape(
            "velocity field does not match the grid".into(),
        ));
    }
    let mut total = 0.0;
    for k in 0..disc.n_omega {
        // ∂_α v^{βi} at node k, indexed [α][β*q+i].
        let mut d_omega = [
            [vec![], vec![], vec![], vec![]],
            [vec![], vec![], vec![], vec![]],
        ];
        for a in 0..2 {
            for bi in 0..2 * q {
                d_omega[a][bi] = omega_derivative(disc, &v.nodes[bi], nd, a, k);
            }
        }
        let s = mu.slice(k);
        for x in 0..nd {
            if s[x] == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for i in 0..q {
                let mut d = d_omega[0][q + i][x] - d_omega[1][i][x];
                for j in 0..q {
                    let v1j = v.nodes[j][k * nd + x];
                    let v2j = v.nodes[q + j][k * nd + x];
                    d += v1j * d_derivative(disc, &v.nodes[q + i][k * nd..(k + 1) * nd], j, x)
                        - v2j * d_derivative(disc, &v.nodes[i][k * nd..(k + 1) * nd], j, x);
                }
                sq += d * d;
            }
            total += disc.node_weights[k] * s[x] * sq;
        }
    }
    Ok(total.sqrt())
}

/// ∂_j of a D-slice at node x: centered inside, one-sided at the edges.
fn d_derivative(disc: &Discretization, slice: &[f64], j: usize, x: usize) -> f64 {
    let idx = disc.d_multi(x);
    let ax = &disc.d_axes[j];
    let at = |t: usize| {
        let mut m = idx;
        m[j] = t;
        slice[disc.d_index(&m[..disc.q()])]
    };
    let t = idx[j];
    if t == 0 {
        (at(1) - at(0)) / ax.h
    } else if t + 1 == ax.n {
        (at(t) - at(t - 1)) / ax.h
    } else {
        (at(t + 1) - at(t - 1)) / (2.0 * ax.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_discretization, GridSpec};
    use crate::measures::{elliptic_density, w2_lp, ReferenceDensity};

    fn disc(p: usize, q: usize, n: usize, nd: usize, d: [f64; 2]) -> Discretization {
        let mut spec = GridSpec::unit(p, q, n, nd);
        spec.d = vec![d; q];
        build_discretization(&spec).unwrap()
    }

    #[test]
    fn potential_constant_and_uniform_entropy() {
        let d = disc(2, 2, 5, 12, [-1.0, 2.0]);
        let mu = MeasureField::from_slices(&d, |k| {
            let v: Vec<f64> = d
                .d_weights
                .iter()
                .map(|w| w * (1.0 + k as f64 * 0.0))
                .collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        });
        let vals = eval_functional(&d, &mu, &FunctionalSpec::potential(vec![2.5; d.n_d])).unwrap();
        assert!(vals.iter().all(|v| (v - 2.5).abs() < 1e-14));
        // Uniform density 1/|D| with |D| = 9 has entropy −ln 9.
        let h = eval_functional(&d, &mu, &FunctionalSpec::entropy()).unwrap();
        assert!(h.iter().all(|v| (v + 9f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn quadratic_form_on_elliptic_density() {
        let d = disc(1, 2, 3, 121, [-4.0, 4.0]);
        let a = [1.0, 0.3, 0.3, 0.7];
        let rho = ReferenceDensity { q: 2, k: 2 };
        let mu = MeasureField::from_slices(&d, |_| elliptic_density(&d, &a, &rho).unwrap());
        let c = vec![1.0, 0.2, 0.2, 0.5];
        let f =
            eval_functional(&d, &mu, &FunctionalSpec::quadratic_form(c.clone()).unwrap()).unwrap();
        // Tr(A²C) computed by hand.
        let a2 = [
            a[0] * a[0] + a[1] * a[2],
            a[0] * a[1] + a[1] * a[3],
            a[2] * a[0] + a[3] * a[2],
            a[2] * a[1] + a[3] * a[3],
        ];
        let want = a2[0] * c[0] + a2[1] * c[2] + a2[2] * c[1] + a2[3] * c[3];
        assert!((f[0] - want).abs() < 0.01 * want, "{} vs {want}", f[0]);
        assert!(FunctionalSpec::quadratic_form(vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let d = disc(2, 1, 9, 4, [0.0, 1.0]);
        let affine: Vec<f64> = d
            .omega_coords
            .iter()
            .map(|c| 2.0 * c[0] - c[1] + 0.5)
            .collect();
        let r = subharmonicity_check(&d, &affine, 1e-9);
        assert!(r.min_laplacian.abs() < 1e-9 && r.pass);
        let sq: Vec<f64> = d
            .omega_coords
            .iter()
            .map(|c| c[0] * c[0] + c[1] * c[1])
            .collect();
        let r = subharmonicity_check(&d, &sq, 1e-9);
        assert!((r.min_laplacian - 4.0).abs() < 1e-9 && r.pass);
        let neg: Vec<f64> = sq.iter().map(|v| -v).collect();
        assert!(!subharmonicity_check(&d, &neg, 1e-9).pass);
    }

    #[test]
    fn convex_potential_of_harmonic_map_is_subharmonic() {
        let d = disc(2, 1, 11, 4, [0.0, 1.0]);
        // V(f(ξ)) with V(y) = y² and f affine: second differences give 2|∇f|².
        let f = |c: &[f64; 2]| 0.3 * c[0] + 0.4 * c[1];
        let vals: Vec<f64> = d.omega_coords.iter().map(|c| f(c).powi(2)).collect();
        let r = subharmonicity_check(&d, &vals, 1e-12);
        assert!((r.min_laplacian - 2.0 * 0.25).abs() < 1e-9);
    }

    #[test]
    fn ball_extension_examples() {
        let mut spec = GridSpec::unit(2, 2, 9, 41);
        spec.omega = vec![[-1.0, 1.0]; 2];
        spec.d = vec![[-2.0, 2.0]; 2];
        let d = build_discretization(&spec).unwrap();
        let g = |t: &[f64; 2]| [t[0] + 0.2 * t[1], 0.5 * t[1]];
        let bc = |t: &[f64; 2]| {
            let mut out = vec![0.0; d.n_d];
            deposit_point(&d, &g(t), 1.0, &mut out);
            out
        };
        let x0 = [0.1, -0.2];
        let ext = lipschitz_extend_ball(&d, bc, &x0).unwrap();
        for k in 0..d.n_omega {
            let (r, dir) = ext.polar[k];
            let (_, cov) = moments(&d, ext.field.slice(k));
            let (mean, _) = moments(&d, ext.field.slice(k));
            let rr = r.min(1.0);
            let want = g(&dir);
            for i in 0..2 {
                assert!((mean[i] - (rr * want[i] + (1.0 - rr) * x0[i])).abs() < 1e-12);
            }
            // Linear splitting spreads the point by at most one cell.
            assert!(cov[0] <= d.d_axes[0].h.powi(2));
        }
    }

    #[test]
    fn sqrt_boundary_examples() {
        let mut spec = GridSpec::unit(2, 2, 9, 25);
        spec.d = vec![[-1.5, 1.5]; 2];
        let d = build_discretization(&spec).unwrap();
        let t = boundary_angles(&d).unwrap();
        let bc = sqrt_boundary(&d).unwrap();
        let b0 = t.iter().position(|&x| x.abs() < 1e-12).unwrap();
        let (mean, cov) = moments(&d, bc.slice(b0));
        assert!(mean[0].abs() < 1e-12 && mean[1].abs() < 1e-12);
        assert!(cov[0] > 0.9 && cov[3] < 0.1);
        // Adjacent boundary nodes: W2 ≤ 2·(arc in t) + slack from smoothing.
        let n = t.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| t[a].partial_cmp(&t[b]).unwrap());
        for w in 0..n {
            let (a, b) = (order[w], order[(w + 1) % n]);
            let arc = (t[b] - t[a]).rem_euclid(2.0 * PI);
            let pts: Vec<[f64; 2]> = d.d_coords.clone();
            let (w2, _) = w2_lp(&pts, bc.slice(a), bc.slice(b)).unwrap();
            assert!(w2 <= 2.0 * arc + 2.0 * d.d_axes[0].h, "{w2} vs arc {arc}");
        }
    }

    #[test]
    fn defect_vanishes_for_gradient_fields() {
        let d = disc(2, 2, 7, 9, [-1.0, 1.0]);
        let mu = MeasureField::from_slices(&d, |_| d.d_weights.iter().map(|w| w / 4.0).collect());
        let nodes = |f: &dyn Fn(&[f64; 2], usize, usize) -> f64| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; d.n_omega * d.n_d]; 4];
            for a in 0..2 {
                for i in 0..2 {
                    for k in 0..d.n_omega {
                        for x in 0..d.n_d {
                            out[a * 2 + i][k * d.n_d + x] = f(&d.omega_coords[k], a, i);
                        }
                    }
                }
            }
            out
        };
        // v^α = ∂_α f with f(ξ) = (ξ₁ξ₂, ξ₁² − ξ₂²): both second differences commute.
        let grad = |c: &[f64; 2], a: usize, i: usize| match (a, i) {
            (0, 0) => c[1],
            (1, 0) => c[0],
            (0, 1) => 2.0 * c[0],
            _ => -2.0 * c[1],
        };
        let v = VelocityField {
            p: 2,
            q: 2,
            faces: vec![],
            nodes: nodes(&grad),
            flagged: 0,
        };
        assert!(obstruction_defect(&d, &v, &mu).unwrap() < 1e-12);
        let v = VelocityField {
            p: 2,
            q: 2,
            faces: vec![],
            nodes: nodes(&|_, a, i| (a + 2 * i) as f64),
            flagged: 0,
        };
        assert!(obstruction_defect(&d, &v, &mu).unwrap() < 1e-12);
        // A rotational field does not commute.
        let rot = |c: &[f64; 2], a: usize, i: usize| if a == 0 && i == 0 { c[1] } else { 0.0 };
        let v = VelocityField {
            p: 2,
            q: 2,
            faces: vec![],
            nodes: nodes(&rot),
            flagged: 0,
        };
        assert!(obstruction_defect(&d, &v, &mu).unwrap() > 0.1);
    }
}
