//! Dirichlet energy of a (measure, momentum) pair, tangent velocities, the
//! approximate energies Dir_ε, boundary terms and dual certificates.

use std::f64::consts::PI;

use crate::bbsolver::BoundaryData;
use crate::error::{Error, Result};
use crate::grid::{Discretization, MomentumField};
use crate::measures::{cell_quantiles, w2_lp, MeasureField};

/// Densities below this (per unit mass) carry no velocity.
pub const MU_FLOOR: f64 = 1e-12;

/// Interior D-face with the two coefficients turning node masses into the
/// face mass: M_f = a_lo·m_lo + a_hi·m_hi. A node at the end of its axis has a
/// half-width dual cell, so its density is doubled.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FaceLink {
    pub f: usize,
    pub lo: usize,
    pub hi: usize,
    pub a_lo: f64,
    pub a_hi: f64,
}

pub(crate) fn face_links(disc: &Discretization) -> Vec<Vec<FaceLink>> {
    (0..disc.q())
        .map(|i| {
            let ax = &disc.d_axes[i];
            disc.interior_faces[i]
                .iter()
                .map(|&f| {
                    let face = disc.faces[i][f];
                    let (lo, hi) = (face.lo.unwrap(), face.hi.unwrap());
                    let coef = |x: usize| 0.5 * ax.h / ax.trap(disc.d_multi(x)[i]);
                    FaceLink {
                        f,
                        lo,
                        hi,
                        a_lo: coef(lo),
                        a_hi: coef(hi),
                    }
                })
                .collect()
        })
        .collect()
}

#[inline]
pub(crate) fn face_mass(l: &FaceLink, slice: &[f64]) -> f64 {
    l.a_lo * slice[l.lo] + l.a_hi * slice[l.hi]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KineticEnergy {
    /// +∞ when some cell carries momentum without mass.
    pub value: f64,
    pub flagged: usize,
}

/// Σ over α, Ω-edges and interior D-faces of w_e·E²/(2M̄), M̄ the face mass
/// averaged over the two ends of the edge.
pub fn kinetic_energy(
    disc: &Discretization,
    mu: &MeasureField,
    e: &MomentumField,
) -> Result<KineticEnergy> {
    mu.check_shape(disc)?;
    e.check_shape(disc)?;
    e.check_no_flux(disc)?;
    let links = face_links(disc);
    let mut value = 0.0;
    let mut flagged = 0;
    for a in 0..disc.p() {
        for i in 0..disc.q() {
            let nf = disc.faces[i].len();
            let c = e.comp(a, i);
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                let mut acc = 0.0;
                for l in &links[i] {
                    let v = c[ei * nf + l.f];
                    if v == 0.0 {
                        continue;
                    }
                    let m = 0.5 * (face_mass(l, s) + face_mass(l, t));
                    if m <= 0.0 {
                        flagged += 1;
                    } else {
                        acc += v * v / (2.0 * m);
                    }
                }
                value += edge.weight * acc;
            }
        }
    }
    if flagged > 0 {
        value = f64::INFINITY;
    }
    Ok(KineticEnergy { value, flagged })
}

/// Velocity both on the staggered momentum layout (`faces`, E/M̄) and
/// colocated with μ (`nodes`, averages of the adjacent staggered values).
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub p: usize,
    pub q: usize,
    pub faces: Vec<Vec<f64>>,
    pub nodes: Vec<Vec<f64>>,
    /// Cells with momentum but mass below the floor.
    pub flagged: usize,
}

impl VelocityField {
    pub fn node(&self, alpha: usize, i: usize) -> &[f64] {
        &self.nodes[alpha * self.q + i]
    }
}

fn colocate(disc: &Discretization, faces: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let nd = disc.n_d;
    let q = disc.q();
    let mut nodes = Vec::with_capacity(faces.len());
    for a in 0..disc.p() {
        for i in 0..q {
            let nf = disc.faces[i].len();
            let src = &faces[a * q + i];
            let mut sum = vec![0.0; disc.n_omega * nd];
            let mut cnt = vec![0.0; disc.n_omega * nd];
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                for &f in &disc.interior_faces[i] {
                    let face = disc.faces[i][f];
                    let v = src[ei * nf + f];
                    for n in [edge.start, edge.end] {
                        for x in [face.lo.unwrap(), face.hi.unwrap()] {
                            sum[n * nd + x] += v;
                            cnt[n * nd + x] += 1.0;
                        }
                    }
                }
            }
            nodes.push(
                sum.iter()
                    .zip(&cnt)
                    .map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 })
                    .collect(),
            );
        }
    }
    nodes
}

/// v = E/M̄ on every staggered cell, then averaged to the nodes.
pub fn tangent_velocity(
    disc: &Discretization,
    mu: &MeasureField,
    e: &MomentumField,
) -> Result<VelocityField> {
    tangent_velocity_floor(disc, mu, e, 0.0)
}

/// [`tangent_velocity`] restricted to the bulk of the support: cells whose
/// mass is below `rel_floor` times the largest cell mass on the same Ω-edge
/// get v = 0. Cleaner derivatives of v where the solver leaves thin tails.
pub fn tangent_velocity_floor(
    disc: &Discretization,
    mu: &MeasureField,
    e: &MomentumField,
    rel_floor: f64,
) -> Result<VelocityField> {
    mu.check_shape(disc)?;
    e.check_shape(disc)?;
    e.check_no_flux(disc)?;
    let links = face_links(disc);
    let mut faces = Vec::new();
    let mut flagged = 0;
    for a in 0..disc.p() {
        for i in 0..disc.q() {
            let nf = disc.faces[i].len();
            let c = e.comp(a, i);
            let mut out = vec![0.0; c.len()];
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                let mass = |l: &FaceLink| 0.5 * (face_mass(l, s) + face_mass(l, t));
                let floor = if rel_floor > 0.0 {
                    MU_FLOOR.max(rel_floor * links[i].iter().map(mass).fold(0.0, f64::max))
                } else {
                    MU_FLOOR
                };
                for l in &links[i] {
                    let m = mass(l);
                    let v = c[ei * nf + l.f];
                    if m > floor {
                        out[ei * nf + l.f] = v / m;
                    } else if v.abs() > MU_FLOOR {
                        flagged += 1;
                    }
                }
            }
            faces.push(out);
        }
    }
    let nodes = colocate(disc, &faces);
    Ok(VelocityField {
        p: disc.p(),
        q: disc.q(),
        faces,
        nodes,
        flagged,
    })
}

/// Inverse of [`tangent_velocity`] on unflagged cells: E = v·M̄.
pub fn momentum_from_velocity(
    disc: &Discretization,
    mu: &MeasureField,
    v: &VelocityField,
) -> Result<MomentumField> {
    mu.check_shape(disc)?;
    let links = face_links(disc);
    let mut e = MomentumField::zeros(disc);
    for a in 0..disc.p() {
        for i in 0..disc.q() {
            let nf = disc.faces[i].len();
            let src = &v.faces[a * disc.q() + i];
            if src.len() != disc.component_len(a, i) {
                return Err(Error::Shape("velocity layout".into()));
            }
            let c = e.comp_mut(a, i);
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                for l in &links[i] {
                    let m = 0.5 * (face_mass(l, s) + face_mass(l, t));
                    c[ei * nf + l.f] = src[ei * nf + l.f] * m;
                }
            }
        }
    }
    Ok(e)
}

/// Weighted graph Laplacian L φ = Σ_f c_f (φ_hi − φ_lo) (±) on the D-grid,
/// solved on the mean-zero subspace by Jacobi-preconditioned CG.
fn solve_weighted_neumann(n: usize, links: &[(usize, usize, f64)], rhs: &[f64]) -> Vec<f64> {
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, c) in links {
            let f = c * (x[a] - x[b]);
            out[a] += f;
            out[b] -= f;
        }
    };
    let mut diag = vec![0.0; n];
    for &(a, b, c) in links {
        diag[a] += c;
        diag[b] += c;
    }
    let mean = rhs.iter().sum::<f64>() / n as f64;
    let mut r: Vec<f64> = rhs.iter().map(|v| v - mean).collect();
    let bnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return x;
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut pdir = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..20 * n + 100 {
        apply(&pdir, &mut ap);
        let pap: f64 = pdir.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * pdir[k];
            r[k] -= alpha * ap[k];
        }
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-13 * bnorm {
            break;
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            pdir[k] = z[k] + beta * pdir[k];
        }
    }
    x
}

/// Derivative of the measure field along Ω-axis α at node k: centered in the
/// interior, one-sided at ∂Ω.
pub(crate) fn omega_derivative(
    disc: &Discretization,
    values: &[f64],
    width: usize,
    alpha: usize,
    k: usize,
) -> Vec<f64> {
    let idx = disc.omega_multi(k);
    let ax = &disc.omega_axes[alpha];
    let node = |j: usize| {
        let mut m = idx;
        m[alpha] = j;
        disc.omega_index(&m[..disc.p()])
    };
    let j = idx[alpha];
    let (lo, hi, h) = if j == 0 {
        (node(0), node(1), ax.h)
    } else if j + 1 == ax.n {
        (node(j - 1), node(j), ax.h)
    } else {
        (node(j - 1), node(j + 1), 2.0 * ax.h)
    };
    (0..width)
        .map(|x| (values[hi * width + x] - values[lo * width + x]) / h)
        .collect()
}

/// Tangent velocity of a smooth positive field from the elliptic equation
/// ∇_D·(μ ∇_D φ^α) = −∂_α μ, solved per Ω-node and direction; v = ∇_D φ.
pub fn tangent_velocity_elliptic(
    disc: &Discretization,
    mu: &MeasureField,
) -> Result<VelocityField> {
    mu.check_shape(disc)?;
    let links = face_links(disc);
    let nd = disc.n_d;
    let q = disc.q();
    let mut node_flux: Vec<Vec<Vec<f64>>> = Vec::new(); // [α*q+i][node] -> flux per face
    for _ in 0..disc.p() * q {
        node_flux.push(Vec::with_capacity(disc.n_omega));
    }
    for k in 0..disc.n_omega {
        let s = mu.slice(k);
        let mut conductances = Vec::new();
        for i in 0..q {
            let h = disc.d_axes[i].h;
            for l in &links[i] {
                let m = face_mass(l, s);
                if !(m > MU_FLOOR) {
                    return Err(Error::Singular(format!("face mass {m:e} at Ω-node {k}")));
                }
                conductances.push((i, *l, m / (h * h)));
            }
        }
        let lap: Vec<(usize, usize, f64)> = conductances
            .iter()
            .map(|(_, l, c)| (l.lo, l.hi, *c))
            .collect();
        for a in 0..disc.p() {
            let dmu = omega_derivative(disc, &mu.values, nd, a, k);
            // Σ_i (E_r − E_l)/h_i with E = M (φ_hi − φ_lo)/h equals −L φ for the
            // graph Laplacian L assembled above.
            let phi = solve_weighted_neumann(nd, &lap, &dmu);
            for i in 0..q {
                let h = disc.d_axes[i].h;
                let mut flux = vec![0.0; disc.faces[i].len()];
                for (_, l, _) in conductances.iter().filter(|(ii, _, _)| *ii == i) {
                    flux[l.f] = face_mass(l, s) * (phi[l.hi] - phi[l.lo]) / h;
                }
                node_flux[a * q + i].push(flux);
            }
        }
    }
    // Edge momentum = average of the endpoint fluxes; staggered velocity = E/M̄.
    let mut faces = Vec::new();
    for a in 0..disc.p() {
        for i in 0..q {
            let nf = disc.faces[i].len();
            let mut out = vec![0.0; disc.component_len(a, i)];
            for (ei, edge) in disc.edges[a].iter().enumerate() {
                let (s, t) = (mu.slice(edge.start), mu.slice(edge.end));
                let (fs, ft) = (
                    &node_flux[a * q + i][edge.start],
                    &node_flux[a * q + i][edge.end],
                );
                for l in &links[i] {
                    let m = 0.5 * (face_mass(l, s) + face_mass(l, t));
                    out[ei * nf + l.f] = 0.5 * (fs[l.f] + ft[l.f]) / m;
                }
            }
            faces.push(out);
        }
    }
    let nodes = colocate(disc, &faces);
    Ok(VelocityField {
        p: disc.p(),
        q,
        faces,
        nodes,
        flagged: 0,
    })
}

/// C_p = |η|² / ∫_{B(0,1)} (ξ·η)² dξ = (p+2)/ω_p.
pub fn c_p(p: usize) -> Result<f64> {
    match p {
        1 => Ok(1.5),
        2 => Ok(4.0 / PI),
        _ => Err(Error::Dimension(format!(
            "C_p is provided for p ∈ {{1,2}}, got {p}"
        ))),
    }
}

const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    // Golub-Welsch would be overkill for the handful of orders used here.
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = (PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Local quadratic interpolation weights along one axis at coordinate t: the
/// three-node stencil centred on the nearest node, shifted inside the axis.
fn quad_stencil(ax: &crate::grid::Axis, t: f64) -> ([usize; 3], [f64; 3]) {
    let s = (t - ax.lo) / ax.h;
    let c = (s.round() as isize).clamp(1, ax.n as isize - 2) as usize;
    let u = s - c as f64;
    (
        [c - 1, c, c + 1],
        [0.5 * u * (u - 1.0), 1.0 - u * u, 0.5 * u * (u + 1.0)],
    )
}

/// Piecewise quadratic (p=1) or biquadratic (p=2) interpolant of node values.
fn interp(disc: &Discretization, vals: &[f64], pt: [f64; 2]) -> f64 {
    let (i0, w0) = quad_stencil(&disc.omega_axes[0], pt[0]);
    if disc.p() == 1 {
        return (0..3).map(|a| w0[a] * vals[i0[a]]).sum();
    }
    let (i1, w1) = quad_stencil(&disc.omega_axes[1], pt[1]);
    let mut s = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            s += w0[a] * w1[b] * vals[disc.omega_index(&[i0[a], i1[b]])];
        }
    }
    s
}

/// ∫_{B(ξ,ε) ∩ Ω} f(η) dη for the interpolant of node values f.
fn ball_integral(disc: &Discretization, f: &[f64], xi: [f64; 2], eps: f64) -> f64 {
    if disc.p() == 1 {
        let ax = &disc.omega_axes[0];
        let a = (xi[0] - eps).max(ax.lo);
        let b = (xi[0] + eps).min(ax.hi);
        // Break points: stencil switches happen at cell midpoints.
        let mut cuts = vec![a, b];
        for k in 0..2 * ax.n {
            let t = ax.lo + 0.5 * ax.h * k as f64;
            if t > a && t < b {
                cuts.push(t);
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut s = 0.0;
        for w in cuts.windows(2) {
            let (l, r) = (w[0], w[1]);
            for &(g, wt) in &GL3 {
                let t = 0.5 * (l + r) + 0.5 * (r - l) * g;
                s += 0.5 * (r - l) * wt * interp(disc, f, [t, 0.0]);
            }
        }
        return s;
    }
    // Polar coordinates about ξ; the radial limit is min(ε, distance to ∂Ω
    // along the ray), smooth between the kink angles collected below.
    let (ax0, ax1) = (&disc.omega_axes[0], &disc.omega_axes[1]);
    let rmax = |th: f64| -> f64 {
        let (c, s) = (th.cos(), th.sin());
        let mut r = eps;
        if c > 1e-300 {
            r = r.min((ax0.hi - xi[0]) / c);
        } else if c < -1e-300 {
            r = r.min((ax0.lo - xi[0]) / c);
        }
        if s > 1e-300 {
            r = r.min((ax1.hi - xi[1]) / s);
        } else if s < -1e-300 {
            r = r.min((ax1.lo - xi[1]) / s);
        }
        r.max(0.0)
    };
    let mut kinks = vec![0.0, 2.0 * PI];
    let push = |v: f64, k: &mut Vec<f64>| {
        let w = v.rem_euclid(2.0 * PI);
        k.push(w);
    };
    for (d, base) in [
        (ax0.hi - xi[0], 0.0),
        (xi[1] - ax1.lo, -0.5 * PI),
        (xi[0] - ax0.lo, PI),
        (ax1.hi - xi[1], 0.5 * PI),
    ] {
        if d < eps {
            let t = (d / eps).clamp(-1.0, 1.0).acos();
            push(base + t, &mut kinks);
            push(base - t, &mut kinks);
        }
    }
    for cx in [ax0.lo, ax0.hi] {
        for cy in [ax1.lo, ax1.hi] {
            push((cy - xi[1]).atan2(cx - xi[0]), &mut kinks);
        }
    }
    kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let gth = gauss_legendre(8);
    let gr = gauss_legendre(8);
    let mut s = 0.0;
    for w in kinks.windows(2) {
        let (l, r) = (w[0], w[1]);
        if r - l < 1e-14 {
            continue;
        }
        for &(g, wt) in &gth {
            let th = 0.5 * (l + r) + 0.5 * (r - l) * g;
            let rm = rmax(th);
            let (c, sn) = (th.cos(), th.sin());
            let mut inner = 0.0;
            for &(gg, ww) in &gr {
                let rr = 0.5 * rm * (1.0 + gg);
                inner += 0.5 * rm * ww * rr * interp(disc, f, [xi[0] + rr * c, xi[1] + rr * sn]);
            }
            s += 0.5 * (r - l) * wt * inner;
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirEps {
    pub eps: f64,
    pub value: f64,
    /// Number of W2 evaluations performed.
    pub pairs: usize,
}

/// Quantile levels used for q = 1 distances inside Dir_ε.
pub const DIR_EPS_LEVELS: usize = 2048;

/// C_p/(2ε^{p+2}) ∫_Ω ∫_{B(ξ,ε)∩Ω} W2²(μ(ξ), μ(η)) dη dξ. The inner integral
/// uses a local quadratic interpolant of η ↦ W2²(μ(ξ), μ(η)) between nodes,
/// the outer one the trapezoid weights.
pub fn dir_eps(disc: &Discretization, mu: &MeasureField, eps: f64) -> Result<DirEps> {
    mu.check_shape(disc)?;
    let h = disc.min_omega_spacing();
    if !(eps >= 2.0 * h * (1.0 - 1e-12)) {
        return Err(Error::EpsTooSmall { eps, h });
    }
    let cp = c_p(disc.p())?;
    let n = disc.n_omega;
    let quantiles: Option<Vec<Vec<f64>>> = if disc.q() == 1 {
        Some(
            (0..n)
                .map(|k| cell_quantiles(&disc.d_axes[0], mu.slice(k), DIR_EPS_LEVELS))
                .collect(),
        )
    } else {
        None
    };
    // Nodes whose values can enter an interpolant on the ball around ξ.
    let reach = eps + 2.0 * disc.omega_axes.iter().map(|a| a.h).fold(0.0, f64::max);
    let mut total = 0.0;
    let mut pairs = 0;
    let mut f = vec![0.0; n];
    for k in 0..n {
        let xi = disc.omega_coords[k];
        for j in 0..n {
            let eta = disc.omega_coords[j];
            let far = (0..disc.p()).any(|a| (eta[a] - xi[a]).abs() > reach);
            f[j] = if far || j == k {
                0.0
            } else {
                pairs += 1;
                match &quantiles {
                    Some(qs) => {
                        qs[k]
                            .iter()
                            .zip(&qs[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            / DIR_EPS_LEVELS as f64
                    }
                    None => w2_lp(&disc.d_coords, mu.slice(k), mu.slice(j))?.0.powi(2),
                }
            };
        }
        total += disc.node_weights[k] * ball_integral(disc, &f, xi, eps);
    }
    let value = cp / (2.0 * eps.powi(disc.p() as i32 + 2)) * total;
    Ok(DirEps { eps, value, pairs })
}

/// φ^α(ξ, x) sampled on Ω-nodes × D-nodes, one array per Ω-direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPotential {
    pub p: usize,
    pub values: Vec<Vec<f64>>,
}

impl DualPotential {
    pub fn zeros(disc: &Discretization) -> Self {
        DualPotential {
            p: disc.p(),
            values: vec![vec![0.0; disc.n_omega * disc.n_d]; disc.p()],
        }
    }

    pub fn from_fn(disc: &Discretization, f: impl Fn(usize, [f64; 2], [f64; 2]) -> f64) -> Self {
        let mut phi = Self::zeros(disc);
        for a in 0..disc.p() {
            for k in 0..disc.n_omega {
                for x in 0..disc.n_d {
                    phi.values[a][k * disc.n_d + x] = f(a, disc.omega_coords[k], disc.d_coords[x]);
                }
            }
        }
        phi
    }

    fn check_shape(&self, disc: &Discretization) -> Result<()> {
        if self.p != disc.p()
            || self.values.len() != disc.p()
            || self
                .values
                .iter()
                .any(|v| v.len() != disc.n_omega * disc.n_d)
        {
            return Err(Error::Shape(
                "dual potential does not match the grid".into(),
            ));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("dual potential must be finite".into()));
        }
        Ok(())
    }

    /// Edge values: the average of the two endpoint samples.
    pub fn edge_values(&self, disc: &Discretization) -> Vec<Vec<f64>> {
        let nd = disc.n_d;
        (0..disc.p())
            .map(|a| {
                let mut out = Vec::with_capacity(disc.constraint_len(a));
                for edge in &disc.edges[a] {
                    for x in 0..nd {
                        out.push(
                            0.5 * (self.values[a][edge.start * nd + x]
                                + self.values[a][edge.end * nd + x]),
                        );
                    }
                }
                out
            })
            .collect()
    }
}

/// ∫_{∂Ω} ∫_D φ(ξ,x)·n_Ω(ξ) μ_b(ξ,dx) σ(dξ) by boundary-node quadrature.
pub fn boundary_term(disc: &Discretization, bc: &BoundaryData, phi: &DualPotential) -> Result<f64> {
    bc.check_shape(disc)?;
    phi.check_shape(disc)?;
    let nd = disc.n_d;
    let mut s = 0.0;
    for (b, &node) in disc.boundary.iter().enumerate() {
        let n = disc.normals[b];
        let slice = bc.slice(b);
        let mut acc = 0.0;
        for a in 0..disc.p() {
            if n[a] == 0.0 {
                continue;
            }
            let vals = &phi.values[a][node * nd..(node + 1) * nd];
            acc += n[a] * slice.iter().zip(vals).map(|(m, v)| m * v).sum::<f64>();
        }
        s += disc.boundary_weights[b] * acc;
    }
    Ok(s)
}

/// Per-node coefficients H of the discrete dual function for an edge
/// potential ψ (ψ[α] laid out as α-edges × D-nodes): for every discrete
/// admissible (μ, E),  KE ≥ Σ_{n,x} μ_{n,x} H_{n,x}.
pub fn dual_coefficients(disc: &Discretization, psi: &[Vec<f64>]) -> Result<Vec<f64>> {
    let nd = disc.n_d;
    for a in 0..disc.p() {
        if psi.len() != disc.p() || psi[a].len() != disc.constraint_len(a) {
            return Err(Error::Shape("edge potential layout".into()));
        }
    }
    let links = face_links(disc);
    let mut hc = vec![0.0; disc.n_omega * nd];
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        for (ei, edge) in disc.edges[a].iter().enumerate() {
            let row = &psi[a][ei * nd..(ei + 1) * nd];
            let w = edge.weight;
            for x in 0..nd {
                hc[edge.end * nd + x] += w * row[x] / h;
                hc[edge.start * nd + x] -= w * row[x] / h;
            }
            // −½ w_e M̄ |∂_i ψ|², with M̄ linear in the node masses.
            for i in 0..disc.q() {
                let hi = disc.d_axes[i].h;
                for l in &links[i] {
                    let g = (row[l.hi] - row[l.lo]) / hi;
                    let y = 0.25 * w * g * g;
                    for n in [edge.start, edge.end] {
                        hc[n * nd + l.lo] -= y * l.a_lo;
                        hc[n * nd + l.hi] -= y * l.a_hi;
                    }
                }
            }
        }
    }
    Ok(hc)
}

/// Lower bound Σ_∂Ω μ_b·H + Σ_interior min_x H, valid for every discrete
/// admissible pair with the given boundary data.
pub fn edge_dual_bound(disc: &Discretization, bc: &BoundaryData, psi: &[Vec<f64>]) -> Result<f64> {
    bc.check_shape(disc)?;
    let hc = dual_coefficients(disc, psi)?;
    let nd = disc.n_d;
    let mut s = 0.0;
    for (b, &node) in disc.boundary.iter().enumerate() {
        s += bc
            .slice(b)
            .iter()
            .zip(&hc[node * nd..(node + 1) * nd])
            .map(|(m, v)| m * v)
            .sum::<f64>();
    }
    for &node in &disc.interior {
        s += hc[node * nd..(node + 1) * nd]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualCertificate {
    /// Boundary term of φ.
    pub lower_bound: f64,
    /// max over the grid of ∇_Ω·φ + ½|∇_D φ|².
    pub feasibility_margin: f64,
    /// Bound from the discrete dual function; valid whatever the margin.
    pub certified_bound: f64,
    /// lower_bound − certified_bound.
    pub slack: f64,
}

/// Finite-difference feasibility margin, the boundary term, and the bound
/// certified by the discrete dual function of the edge averages of φ.
pub fn dual_certificate(
    disc: &Discretization,
    phi: &DualPotential,
    bc: &BoundaryData,
) -> Result<DualCertificate> {
    phi.check_shape(disc)?;
    let nd = disc.n_d;
    let mut margin = f64::NEG_INFINITY;
    let mut div = vec![0.0; disc.n_omega * nd];
    for a in 0..disc.p() {
        for k in 0..disc.n_omega {
            let d = omega_derivative(disc, &phi.values[a], nd, a, k);
            for x in 0..nd {
                div[k * nd + x] += d[x];
            }
        }
    }
    for k in 0..disc.n_omega {
        for x in 0..nd {
            let idx = disc.d_multi(x);
            let mut g2 = 0.0;
            for a in 0..disc.p() {
                let v = &phi.values[a][k * nd..(k + 1) * nd];
                for i in 0..disc.q() {
                    let ax = &disc.d_axes[i];
                    let j = idx[i];
                    let at = |jj: usize| {
                        let mut m = idx;
                        m[i] = jj;
                        v[disc.d_index(&m[..disc.q()])]
                    };
                    let g = if j == 0 {
                        (at(1) - at(0)) / ax.h
                    } else if j + 1 == ax.n {
                        (at(j) - at(j - 1)) / ax.h
                    } else {
                        (at(j + 1) - at(j - 1)) / (2.0 * ax.h)
                    };
                    g2 += g * g;
                }
            }
            margin = margin.max(div[k * nd + x] + 0.5 * g2);
        }
    }
    let lower_bound = boundary_term(disc, bc, phi)?;
    let certified_bound = edge_dual_bound(disc, bc, &phi.edge_values(disc))?;
    Ok(DualCertificate {
        lower_bound,
        feasibility_margin: margin,
        certified_bound,
        slack: lower_bound - certified_bound,
    })
}
