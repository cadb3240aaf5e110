//! Discrete probability fields on the D-grid: quantiles, exact W2, heat flow,
//! 1-D barycenters and elliptic pushforwards of a radial reference density.
//!
//! A grid measure is a vector of nonnegative masses, one per D-node. For
//! distances and barycenters masses are treated as atoms at the nodes. The
//! "cell" quantile transforms instead spread each mass uniformly over the
//! node's dual cell, which is the reconstruction the dynamic solver sees.

use crate::error::{Error, Result};
use crate::grid::{Axis, Discretization};
use crate::network_simplex::{self, TransportSolution};

/// Masses indexed (Ω-node, D-node), slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureField {
    pub n_omega: usize,
    pub n_d: usize,
    pub values: Vec<f64>,
}

impl MeasureField {
    pub fn zeros(disc: &Discretization) -> Self {
        MeasureField {
            n_omega: disc.n_omega,
            n_d: disc.n_d,
            values: vec![0.0; disc.n_omega * disc.n_d],
        }
    }

    pub fn from_slices(disc: &Discretization, f: impl Fn(usize) -> Vec<f64>) -> Self {
        let mut out = Self::zeros(disc);
        for k in 0..disc.n_omega {
            let s = f(k);
            out.slice_mut(k).copy_from_slice(&s);
        }
        out
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_d..(k + 1) * self.n_d]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_d..(k + 1) * self.n_d]
    }

    pub fn check_shape(&self, disc: &Discretization) -> Result<()> {
        if self.n_omega != disc.n_omega
            || self.n_d != disc.n_d
            || self.values.len() != disc.n_omega * disc.n_d
        {
            return Err(Error::Shape("measure field does not match the grid".into()));
        }
        Ok(())
    }

    /// Checks nonnegativity and unit slice mass within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for k in 0..self.n_omega {
            let s = self.slice(k);
            if s.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidMeasure(format!(
                    "negative or NaN mass in slice {k}"
                )));
            }
            let m: f64 = s.iter().sum();
            if (m - 1.0).abs() > tol {
                return Err(Error::InvalidMeasure(format!("slice {k} has mass {m}")));
            }
        }
        Ok(())
    }
}

/// Per-node quantile vectors at levels t_k = (k + ½)/m.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileField {
    pub n_omega: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl QuantileField {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.m..(k + 1) * self.m]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.m..(k + 1) * self.m]
    }

    pub fn level(k: usize, m: usize) -> f64 {
        (k as f64 + 0.5) / m as f64
    }

    /// First node whose quantile row decreases, if any.
    pub fn first_non_monotone(&self) -> Option<usize> {
        (0..self.n_omega).find(|&k| self.row(k).windows(2).any(|w| w[1] < w[0]))
    }
}

/// Radial reference profile ρ(x) ∝ (1 − |x|²/R²)^k on the ball of radius R,
/// with R = √(q + 2k + 2) so that the covariance is the identity. `k = 0` is
/// the uniform ball of radius √(q+2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceDensity {
    pub q: usize,
    pub k: u32,
}

impl ReferenceDensity {
    pub fn uniform_ball(q: usize) -> Self {
        ReferenceDensity { q, k: 0 }
    }

    pub fn radius(&self) -> f64 {
        ((self.q + 2 * self.k as usize + 2) as f64).sqrt()
    }

    pub fn is_radial(&self) -> bool {
        true
    }

    /// Unnormalized profile value at |x|² = r2.
    pub fn profile(&self, r2: f64) -> f64 {
        let s = 1.0 - r2 / (self.radius() * self.radius());
        if s < 0.0 {
            0.0
        } else if self.k == 0 {
            1.0
        } else {
            s.powi(self.k as i32)
        }
    }

    /// Covariance of the continuum profile, (1/q) E|x|² on the diagonal.
    pub fn covariance(&self) -> f64 {
        let r2 = self.radius().powi(2);
        let q = self.q as f64;
        r2 * (q / 2.0) / (q / 2.0 + self.k as f64 + 1.0) / q
    }

    /// Profile sampled on the D-grid as masses (identity scaling matrix).
    pub fn sample(&self, disc: &Discretization) -> Result<Vec<f64>> {
        let eye: Vec<f64> = (0..self.q * self.q)
            .map(|t| if t % (self.q + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        elliptic_density(disc, &eye, self)
    }
}

/// Sparse optimal coupling between the supports of two grid measures.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCoupling {
    pub n: usize,
    /// (source node, target node, mass) triplets with positive mass.
    pub entries: Vec<(usize, usize, f64)>,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
}

impl DiscreteCoupling {
    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for &(i, j, m) in &self.entries {
            out[i * self.n + j] += m;
        }
        out
    }

    /// Largest deviation of the plan's marginals from the prescribed ones.
    pub fn marginal_error(&self) -> f64 {
        let mut rows = vec![0.0; self.n];
        let mut cols = vec![0.0; self.n];
        for &(i, j, m) in &self.entries {
            rows[i] += m;
            cols[j] += m;
        }
        let mut err: f64 = 0.0;
        for k in 0..self.n {
            err = err.max((rows[k] - self.source_marginal[k]).abs());
            err = err.max((cols[k] - self.target_marginal[k]).abs());
        }
        err
    }
}

fn check_prob(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidMeasure(format!("{what} is empty")));
    }
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidMeasure(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidMeasure(format!("{what} has mass {s}")));
    }
    Ok(())
}

/// Level sampling for [`w2_quantile`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Levels {
    /// Exact integral of the squared quantile difference of the atomic measures.
    Exact,
    /// Average over the midpoint levels (k + ½)/m.
    Midpoint(usize),
}

/// Left-continuous inverse of the atomic CDF at level t.
fn atomic_quantile(x: &[f64], mass: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for (j, &w) in mass.iter().enumerate() {
        acc += w;
        if acc >= t - 1e-14 && w > 0.0 {
            return x[j];
        }
    }
    // All remaining mass rounding: last atom with positive mass.
    let last = mass
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(mass.len() - 1);
    x[last]
}

/// W2 between two measures on the same 1-D node set, via quantile functions.
pub fn w2_quantile(x: &[f64], mu: &[f64], nu: &[f64], levels: Levels) -> Result<f64> {
    if mu.len() != x.len() || nu.len() != x.len() {
        return Err(Error::Shape("1-D measures must match the node set".into()));
    }
    check_prob(mu, "mu")?;
    check_prob(nu, "nu")?;
    Ok(w2_sq_quantile_unchecked(x, mu, x, nu, levels)
        .max(0.0)
        .sqrt())
}

/// Squared W2 between atomic measures on (possibly different) sorted supports.
pub(crate) fn w2_sq_quantile_unchecked(
    x: &[f64],
    mu: &[f64],
    y: &[f64],
    nu: &[f64],
    levels: Levels,
) -> f64 {
    match levels {
        Levels::Midpoint(m) => {
            let mut s = 0.0;
            for k in 0..m {
                let t = QuantileField::level(k, m);
                let d = atomic_quantile(x, mu, t) - atomic_quantile(y, nu, t);
                s += d * d;
            }
            s / m as f64
        }
        Levels::Exact => {
            let (mut i, mut j) = (0usize, 0usize);
            let (mut a, mut b) = (
                mu.first().copied().unwrap_or(0.0),
                nu.first().copied().unwrap_or(0.0),
            );
            let mut s = 0.0;
            while i < x.len() && j < y.len() {
                if a <= 0.0 {
                    i += 1;
                    if i < x.len() {
                        a = mu[i];
                    }
                    continue;
                }
                if b <= 0.0 {
                    j += 1;
                    if j < y.len() {
                        b = nu[j];
                    }
                    continue;
                }
                let t = a.min(b);
                let d = x[i] - y[j];
                s += t * d * d;
                a -= t;
                b -= t;
                if a <= 1e-300 {
                    a = 0.0;
                }
                if b <= 1e-300 {
                    b = 0.0;
                }
            }
            s
        }
    }
}

/// Largest number of atoms per measure accepted by [`w2_lp`].
pub const LP_SUPPORT_LIMIT: usize = 4000;

/// Exact W2 between two grid measures by the transportation LP.
pub fn w2_lp(points: &[[f64; 2]], mu: &[f64], nu: &[f64]) -> Result<(f64, DiscreteCoupling)> {
    if mu.len() != points.len() || nu.len() != points.len() {
        return Err(Error::Shape("measures must match the point set".into()));
    }
    check_prob(mu, "mu")?;
    check_prob(nu, "nu")?;
    let src: Vec<usize> = (0..mu.len()).filter(|&k| mu[k] > 0.0).collect();
    let dst: Vec<usize> = (0..nu.len()).filter(|&k| nu[k] > 0.0).collect();
    if src.len() > LP_SUPPORT_LIMIT || dst.len() > LP_SUPPORT_LIMIT {
        return Err(Error::SupportTooLarge(
            src.len().max(dst.len()),
            LP_SUPPORT_LIMIT,
        ));
    }
    let a: Vec<f64> = src.iter().map(|&k| mu[k]).collect();
    let b: Vec<f64> = dst.iter().map(|&k| nu[k]).collect();
    let ps: Vec<[f64; 2]> = src.iter().map(|&k| points[k]).collect();
    let pd: Vec<[f64; 2]> = dst.iter().map(|&k| points[k]).collect();
    let cost = |i: usize, j: usize| {
        let dx = ps[i][0] - pd[j][0];
        let dy = ps[i][1] - pd[j][1];
        dx * dx + dy * dy
    };
    let TransportSolution { cost: total, flows } = network_simplex::solve_transport(&a, &b, &cost);
    let entries = flows
        .into_iter()
        .map(|(i, j, m)| (src[i], dst[j], m))
        .collect();
    let coupling = DiscreteCoupling {
        n: points.len(),
        entries,
        source_marginal: mu.to_vec(),
        target_marginal: nu.to_vec(),
    };
    Ok((total.max(0.0).sqrt(), coupling))
}

/// W2 between two slices on the discretization's D-grid: quantiles for q = 1,
/// transportation LP for q = 2.
pub fn w2_grid(disc: &Discretization, mu: &[f64], nu: &[f64]) -> Result<f64> {
    if disc.q() == 1 {
        let x: Vec<f64> = disc.d_coords.iter().map(|c| c[0]).collect();
        w2_quantile(&x, mu, nu, Levels::Exact)
    } else {
        Ok(w2_lp(&disc.d_coords, mu, nu)?.0)
    }
}

/// Neumann heat flow on the D-grid for time t, by implicit Euler steps.
///
/// In mass units the scheme reads (W + dt·M) ρ⁺ = μ with W the dual-cell
/// volumes, M the face-conductance graph Laplacian and ρ⁺ = W⁻¹μ⁺; the matrix
/// is an M-matrix, so positivity and mass are preserved.
pub fn heat_flow(disc: &Discretization, mu: &[f64], t: f64) -> Result<Vec<f64>> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    if mu.len() != disc.n_d {
        return Err(Error::Shape("density length".into()));
    }
    if t == 0.0 {
        return Ok(mu.to_vec());
    }
    let h2 = disc.min_d_spacing().powi(2);
    let steps = ((t / h2).ceil() as usize).clamp(1, 200);
    let dt = t / steps as f64;
    let lap = NeumannLaplacian::new(disc);
    let mut cur = mu.to_vec();
    for _ in 0..steps {
        cur = lap.implicit_step(&cur, dt);
    }
    let s: f64 = cur.iter().sum();
    let target: f64 = mu.iter().sum();
    if s > 0.0 {
        for v in cur.iter_mut() {
            *v *= target / s;
        }
    }
    Ok(cur)
}

/// Face conductances of the dual-cell finite-volume Laplacian on D.
pub(crate) struct NeumannLaplacian {
    weights: Vec<f64>,
    /// (lo, hi, conductance) for every interior face.
    links: Vec<(usize, usize, f64)>,
}

impl NeumannLaplacian {
    pub(crate) fn new(disc: &Discretization) -> Self {
        let mut links = Vec::new();
        for i in 0..disc.q() {
            let h = disc.d_axes[i].h;
            for &f in &disc.interior_faces[i] {
                let face = disc.faces[i][f];
                let (lo, hi) = (face.lo.unwrap(), face.hi.unwrap());
                let idx = disc.d_multi(lo);
                let mut area = 1.0;
                for j in 0..disc.q() {
                    if j != i {
                        area *= disc.d_axes[j].trap(idx[j]);
                    }
                }
                links.push((lo, hi, area / h));
            }
        }
        NeumannLaplacian {
            weights: disc.d_weights.clone(),
            links,
        }
    }

    fn apply(&self, rho: &[f64], dt: f64, out: &mut [f64]) {
        for (o, (w, r)) in out.iter_mut().zip(self.weights.iter().zip(rho)) {
            *o = w * r;
        }
        for &(a, b, c) in &self.links {
            let f = dt * c * (rho[a] - rho[b]);
            out[a] += f;
            out[b] -= f;
        }
    }

    /// Solves (W + dt M) ρ = μ by Jacobi-preconditioned CG and returns Wρ.
    fn implicit_step(&self, mu: &[f64], dt: f64) -> Vec<f64> {
        let n = mu.len();
        let mut diag = self.weights.clone();
        for &(a, b, c) in &self.links {
            diag[a] += dt * c;
            diag[b] += dt * c;
        }
        let mut x: Vec<f64> = mu.iter().zip(&self.weights).map(|(m, w)| m / w).collect();
        let mut ax = vec![0.0; n];
        self.apply(&x, dt, &mut ax);
        let mut r: Vec<f64> = mu.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut pdir = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let bnorm = mu.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for _ in 0..10 * n + 100 {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= 1e-15 * bnorm {
                break;
            }
            self.apply(&pdir, dt, &mut ax);
            let pap: f64 = pdir.iter().zip(&ax).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * pdir[k];
                r[k] -= alpha * ax[k];
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
        x.iter()
            .zip(&self.weights)
            .map(|(r, w)| (r * w).max(0.0))
            .collect()
    }
}

/// Deposits a point mass at position y onto a 1-D node set by linear splitting.
pub(crate) fn deposit_linear(axis: &Axis, y: f64, mass: f64, out: &mut [f64]) {
    let s = ((y - axis.lo) / axis.h).clamp(0.0, (axis.n - 1) as f64);
    let j = (s.floor() as usize).min(axis.n - 2);
    let frac = s - j as f64;
    out[j] += mass * (1.0 - frac);
    out[j + 1] += mass * frac;
}

/// Weighted W2 barycenter of 1-D grid measures by quantile averaging.
pub fn barycenter_1d(axis: &Axis, densities: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if densities.is_empty() {
        return Err(Error::Invalid("empty list of measures".into()));
    }
    if densities.len() != weights.len() {
        return Err(Error::Shape("one weight per measure".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(
            "weights must be nonnegative and sum to 1".into(),
        ));
    }
    for d in densities {
        if d.len() != axis.n {
            return Err(Error::Shape("density length".into()));
        }
        check_prob(d, "density")?;
    }
    let x: Vec<f64> = (0..axis.n).map(|k| axis.coord(k)).collect();
    // Merge the cumulative-mass breakpoints of all inputs.
    let mut cuts: Vec<f64> = vec![0.0, 1.0];
    for d in densities {
        let mut acc = 0.0;
        for &w in d.iter() {
            acc += w;
            cuts.push(acc.min(1.0));
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut out = vec![0.0; axis.n];
    for win in cuts.windows(2) {
        let (t0, t1) = (win[0], win[1]);
        if t1 <= t0 {
            continue;
        }
        let t = 0.5 * (t0 + t1);
        let y: f64 = densities
            .iter()
            .zip(weights)
            .map(|(d, w)| w * atomic_quantile(&x, d, t))
            .sum();
        deposit_linear(axis, y, t1 - t0, &mut out);
    }
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
    Ok(out)
}

fn require_q1(disc: &Discretization) -> Result<()> {
    if disc.q() != 1 {
        return Err(Error::Dimension(format!(
            "quantile representation needs q = 1, got {}",
            disc.q()
        )));
    }
    Ok(())
}

/// Quantiles of every slice at m midpoint levels, left-continuous inverse of
/// the atomic CDF.
pub fn to_quantiles(disc: &Discretization, mu: &MeasureField, m: usize) -> Result<QuantileField> {
    require_q1(disc)?;
    mu.check_shape(disc)?;
    let x: Vec<f64> = disc.d_coords.iter().map(|c| c[0]).collect();
    let mut values = Vec::with_capacity(disc.n_omega * m);
    for k in 0..disc.n_omega {
        let s = mu.slice(k);
        for l in 0..m {
            values.push(atomic_quantile(&x, s, QuantileField::level(l, m)));
        }
    }
    Ok(QuantileField {
        n_omega: disc.n_omega,
        m,
        values,
    })
}

/// Quantile function of the dual-cell histogram of a 1-D grid measure.
pub fn cell_quantiles(axis: &Axis, mass: &[f64], m: usize) -> Vec<f64> {
    let n = axis.n;
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(m);
    let mut j = 0usize;
    let mut acc = 0.0;
    for l in 0..m {
        let t = QuantileField::level(l, m) * total;
        while j + 1 < n && acc + mass[j] < t {
            acc += mass[j];
            j += 1;
        }
        let (a, b) = cell_bounds(axis, j);
        let frac = if mass[j] > 0.0 {
            ((t - acc) / mass[j]).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push(a + frac * (b - a));
    }
    out
}

fn cell_bounds(axis: &Axis, j: usize) -> (f64, f64) {
    let c = axis.coord(j);
    let a = if j == 0 { axis.lo } else { c - 0.5 * axis.h };
    let b = if j + 1 == axis.n {
        axis.hi
    } else {
        c + 0.5 * axis.h
    };
    (a, b)
}

/// [`cell_quantiles`] for every slice of a field.
pub fn to_quantiles_cells(
    disc: &Discretization,
    mu: &MeasureField,
    m: usize,
) -> Result<QuantileField> {
    require_q1(disc)?;
    mu.check_shape(disc)?;
    let axis = &disc.d_axes[0];
    let mut values = Vec::with_capacity(disc.n_omega * m);
    for k in 0..disc.n_omega {
        values.extend(cell_quantiles(axis, mu.slice(k), m));
    }
    Ok(QuantileField {
        n_omega: disc.n_omega,
        m,
        values,
    })
}

/// Grid masses of the measure whose quantile function interpolates `row`
/// linearly between levels (constant beyond the extreme levels); each node
/// receives the mass falling into its dual cell.
pub fn measure_from_quantile_row(axis: &Axis, row: &[f64]) -> Vec<f64> {
    let m = row.len();
    let n = axis.n;
    let mut out = vec![0.0; n];
    let cell_of = |y: f64| -> usize {
        let s = ((y - axis.lo) / axis.h + 0.5).floor();
        (s.max(0.0) as usize).min(n - 1)
    };
    let t_first = QuantileField::level(0, m);
    out[cell_of(row[0])] += t_first;
    out[cell_of(row[m - 1])] += t_first;
    for k in 0..m - 1 {
        let (y0, y1) = (row[k], row[k + 1]);
        let dt = 1.0 / m as f64;
        let (c0, c1) = (cell_of(y0), cell_of(y1));
        if c0 == c1 || y1 <= y0 {
            out[c0] += dt;
            continue;
        }
        let slope = dt / (y1 - y0);
        for c in c0..=c1 {
            let (a, b) = cell_bounds(axis, c);
            let lo = a.max(y0);
            let hi = b.min(y1);
            if hi > lo {
                out[c] += slope * (hi - lo);
            }
        }
    }
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
    out
}

pub fn from_quantiles(disc: &Discretization, qf: &QuantileField) -> Result<MeasureField> {
    require_q1(disc)?;
    if qf.n_omega != disc.n_omega {
        return Err(Error::Shape(
            "quantile field does not match the grid".into(),
        ));
    }
    if let Some(k) = qf.first_non_monotone() {
        return Err(Error::NonMonotone(k));
    }
    let axis = &disc.d_axes[0];
    Ok(MeasureField::from_slices(disc, |k| {
        measure_from_quantile_row(axis, qf.row(k))
    }))
}

/// Symmetric q×q matrix helpers for q ≤ 2 (row-major slices).
fn inv_det(a: &[f64], q: usize) -> Result<(Vec<f64>, f64)> {
    match q {
        1 => {
            if !(a[0] > 0.0) {
                return Err(Error::NotSpd(a[0]));
            }
            Ok((vec![1.0 / a[0]], a[0]))
        }
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            let tr = a[0] + a[3];
            let lmin = 0.5 * (tr - ((a[0] - a[3]).powi(2) + 4.0 * a[1] * a[2]).max(0.0).sqrt());
            if !(lmin > 0.0) || (a[1] - a[2]).abs() > 1e-12 * (1.0 + a[1].abs()) {
                return Err(Error::NotSpd(lmin));
            }
            Ok((vec![a[3] / det, -a[1] / det, -a[2] / det, a[0] / det], det))
        }
        _ => Err(Error::Dimension(format!(
            "density lifts need q ≤ 2, got {q}"
        ))),
    }
}

/// Grid masses of ρ_A = (x ↦ Ax)#ρ: ρ(A⁻¹x)/det A times the dual-cell volume,
/// renormalized.
pub fn elliptic_density(
    disc: &Discretization,
    a: &[f64],
    rho: &ReferenceDensity,
) -> Result<Vec<f64>> {
    let q = disc.q();
    if a.len() != q * q || rho.q != q {
        return Err(Error::Shape(
            "matrix/reference dimension does not match q".into(),
        ));
    }
    let (ainv, det) = inv_det(a, q)?;
    let r = rho.radius();
    // Bounding box of the ellipse A·B(0,R): half-width R·|row_i(A)|.
    for i in 0..q {
        let row_norm = (0..q).map(|j| a[i * q + j].powi(2)).sum::<f64>().sqrt();
        let half = r * row_norm;
        let ax = &disc.d_axes[i];
        if -half < ax.lo - 1e-12 || half > ax.hi + 1e-12 {
            return Err(Error::SupportOverflow);
        }
    }
    let mut out = Vec::with_capacity(disc.n_d);
    for (c, w) in disc.d_coords.iter().zip(&disc.d_weights) {
        let mut y = [0.0; 2];
        for i in 0..q {
            for j in 0..q {
                y[i] += ainv[i * q + j] * c[j];
            }
        }
        let r2 = y[0] * y[0] + y[1] * y[1];
        out.push(rho.profile(r2) / det * w);
    }
    let s: f64 = out.iter().sum();
    if !(s > 0.0) {
        return Err(Error::InvalidMeasure(
            "pushed density has no mass on the grid".into(),
        ));
    }
    for v in out.iter_mut() {
        *v /= s;
    }
    Ok(out)
}

/// Mean and covariance (row-major q×q) of a grid measure.
pub fn moments(disc: &Discretization, mass: &[f64]) -> ([f64; 2], Vec<f64>) {
    let q = disc.q();
    let mut mean = [0.0; 2];
    for (c, m) in disc.d_coords.iter().zip(mass) {
        for i in 0..q {
            mean[i] += m * c[i];
        }
    }
    let mut cov = vec![0.0; q * q];
    for (c, m) in disc.d_coords.iter().zip(mass) {
        for i in 0..q {
            for j in 0..q {
                cov[i * q + j] += m * (c[i] - mean[i]) * (c[j] - mean[j]);
            }
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_discretization, GridSpec};

    fn line(n: usize, lo: f64, hi: f64) -> Discretization {
        build_discretization(&GridSpec {
            p: 1,
            q: 1,
            omega: vec![[0.0, 1.0]],
            d: vec![[lo, hi]],
            n_omega: vec![3],
            n_d: vec![n],
        })
        .unwrap()
    }

    fn xs(d: &Discretization) -> Vec<f64> {
        d.d_coords.iter().map(|c| c[0]).collect()
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn quantile_distance_examples() {
        let d = line(11, 0.0, 1.0);
        let x = xs(&d);
        let mu: Vec<f64> = (0..11).map(|k| (k as f64 + 1.0) / 66.0).collect();
        assert_eq!(w2_quantile(&x, &mu, &mu, Levels::Exact).unwrap(), 0.0);
        let a = one_hot(11, 2);
        let b = one_hot(11, 9);
        assert!((w2_quantile(&x, &a, &b, Levels::Exact).unwrap() - 0.7).abs() < 1e-14);
        assert!((w2_quantile(&x, &a, &b, Levels::Midpoint(256)).unwrap() - 0.7).abs() < 1e-14);
        let mut lo = vec![0.0; 11];
        let mut hi = vec![0.0; 11];
        for k in 0..=5 {
            lo[k] = 1.0 / 6.0;
            hi[k + 5] = 1.0 / 6.0;
        }
        assert!((w2_quantile(&x, &lo, &hi, Levels::Exact).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lp_two_point_instance() {
        let pts = vec![[0.0, 0.0], [0.25, 0.0], [0.75, 0.0], [1.0, 0.0]];
        let mu = vec![0.5, 0.0, 0.0, 0.5];
        let nu = vec![0.0, 0.5, 0.5, 0.0];
        let (w, c) = w2_lp(&pts, &mu, &nu).unwrap();
        // Brute force over the one-parameter family of couplings.
        let mut best = f64::INFINITY;
        for s in 0..=1000 {
            let t = 0.5 * s as f64 / 1000.0;
            let cost = t * 0.0625 + (0.5 - t) * 0.5625 + (0.5 - t) * 0.5625 + t * 0.0625;
            best = best.min(cost);
        }
        assert!((w * w - best).abs() < 1e-12);
        assert!((w - 0.25).abs() < 1e-12);
        assert!(c.marginal_error() < 1e-12);
    }

    #[test]
    fn lp_identity_is_diagonal() {
        let d = build_discretization(&GridSpec::unit(1, 2, 3, 5)).unwrap();
        let mu: Vec<f64> = (0..25).map(|k| 1.0 + (k % 7) as f64).collect::<Vec<_>>();
        let s: f64 = mu.iter().sum();
        let mu: Vec<f64> = mu.iter().map(|v| v / s).collect();
        let (w, c) = w2_lp(&d.d_coords, &mu, &mu).unwrap();
        assert!(w.abs() < 1e-12);
        for &(i, j, m) in &c.entries {
            assert!(i == j || m < 1e-15);
        }
    }

    #[test]
    fn lp_support_guard() {
        let n = LP_SUPPORT_LIMIT + 1;
        let pts: Vec<[f64; 2]> = (0..n).map(|k| [k as f64, 0.0]).collect();
        let mu = vec![1.0 / n as f64; n];
        assert!(matches!(
            w2_lp(&pts, &mu, &mu),
            Err(Error::SupportTooLarge(..))
        ));
    }

    #[test]
    fn lp_rejects_bad_mass() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0]];
        assert!(w2_lp(&pts, &[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn heat_flow_basics() {
        let d = line(32, 0.0, 1.0);
        let mu = one_hot(32, 4);
        assert_eq!(heat_flow(&d, &mu, 0.0).unwrap(), mu);
        let out = heat_flow(&d, &mu, 0.01).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|&v| v > 0.0));
        let eq = heat_flow(&d, &mu, 1e3).unwrap();
        for (v, w) in eq.iter().zip(&d.d_weights) {
            assert!((v - w).abs() < 1e-6);
        }
        assert!(matches!(
            heat_flow(&d, &mu, -1.0),
            Err(Error::NegativeTime(_))
        ));
    }

    #[test]
    fn barycenter_examples() {
        let d = line(3, 0.0, 1.0);
        let ax = &d.d_axes[0];
        let a = one_hot(3, 0);
        let b = one_hot(3, 2);
        let m = barycenter_1d(ax, &[&a, &b], &[0.5, 0.5]).unwrap();
        assert!((m[1] - 1.0).abs() < 1e-15);
        let single = barycenter_1d(ax, &[&a], &[1.0]).unwrap();
        assert_eq!(single, a);
        assert!(barycenter_1d(ax, &[], &[]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let d = line(8, 0.0, 0.7);
        let mu = MeasureField::from_slices(&d, |_| vec![1.0 / 8.0; 8]);
        let qf = to_quantiles(&d, &mu, 8).unwrap();
        for l in 0..8 {
            assert!((qf.row(1)[l] - 0.1 * l as f64).abs() < 1e-14);
        }
        let hot = MeasureField::from_slices(&d, |_| one_hot(8, 3));
        let qf = to_quantiles(&d, &hot, 16).unwrap();
        assert!(qf.row(0).iter().all(|&v| (v - 0.3).abs() < 1e-14));
        let back = from_quantiles(&d, &qf).unwrap();
        assert_eq!(back.slice(0), hot.slice(0));
        // Trapezoid-uniform masses give an affine cell quantile ramp.
        let tr = MeasureField::from_slices(&d, |_| d.d_weights.iter().map(|w| w / 0.7).collect());
        let qc = to_quantiles_cells(&d, &tr, 10).unwrap();
        for l in 0..10 {
            assert!((qc.row(0)[l] - 0.7 * QuantileField::level(l, 10)).abs() < 1e-13);
        }
    }

    #[test]
    fn elliptic_examples() {
        let d = line(401, -4.0, 4.0);
        let rho = ReferenceDensity::uniform_ball(1);
        assert!((rho.radius() - 3f64.sqrt()).abs() < 1e-15);
        assert!((rho.covariance() - 1.0).abs() < 1e-15);
        let base = rho.sample(&d).unwrap();
        let scaled = elliptic_density(&d, &[2.0], &rho).unwrap();
        let r = 2.0 * 3f64.sqrt();
        for (c, v) in d.d_coords.iter().zip(&scaled) {
            if c[0].abs() > r + 1e-12 {
                assert_eq!(*v, 0.0);
            }
        }
        // Variance of Uniform[−R, R] is R²/3.
        let (_, cov) = moments(&d, &scaled);
        assert!((cov[0] - r * r / 3.0).abs() < 0.02 * r * r / 3.0);
        let (_, cov1) = moments(&d, &base);
        assert!((cov1[0] - 1.0).abs() < 0.02);
        assert!(matches!(
            elliptic_density(&d, &[3.0], &rho),
            Err(Error::SupportOverflow)
        ));
    }

    #[test]
    fn elliptic_covariance_128() {
        let spec = GridSpec {
            p: 1,
            q: 2,
            omega: vec![[0.0, 1.0]],
            d: vec![[-4.0, 4.0]; 2],
            n_omega: vec![3],
            n_d: vec![128, 128],
        };
        let d = build_discretization(&spec).unwrap();
        let rho = ReferenceDensity::uniform_ball(2);
        let a = [1.1, 0.3, 0.3, 0.7];
        let out = elliptic_density(&d, &a, &rho).unwrap();
        let (mean, cov) = moments(&d, &out);
        let a2 = [
            a[0] * a[0] + a[1] * a[2],
            a[0] * a[1] + a[1] * a[3],
            a[2] * a[0] + a[3] * a[2],
            a[2] * a[1] + a[3] * a[3],
        ];
        let err: f64 = cov
            .iter()
            .zip(&a2)
            .map(|(c, t)| (c - t).powi(2))
            .sum::<f64>()
            .sqrt();
        let nrm: f64 = a2.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(err <= 0.02 * nrm, "{err} {nrm}");
        assert!(mean[0].abs() < 1e-10 && mean[1].abs() < 1e-10);
    }
}
