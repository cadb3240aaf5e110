//! Harmonic maps into P(ℝ) through quantile functions, and the Jost
//! barycenter iteration for the ε-approximate problem.

use crate::analysis::{
    eval_functional, subharmonicity_check, FunctionalKind, FunctionalSpec, SubharmonicReport,
};
use crate::bbsolver::{harmonic_extension, BoundaryData};
use crate::energy::c_p;
use crate::grid::Discretization;
use crate::measures::{cell_quantiles, from_quantiles, QuantileField};
use crate::{Error, Result};

fn require_q1(disc: &Discretization) -> Result<()> {
    if disc.q() != 1 {
        return Err(Error::Dimension(format!(
            "quantile solvers need q = 1, got {}",
            disc.q()
        )));
    }
    Ok(())
}

fn check_bc(disc: &Discretization, bc: &QuantileField) -> Result<()> {
    require_q1(disc)?;
    if bc.n_omega != disc.boundary.len() || bc.m == 0 || bc.values.len() != bc.n_omega * bc.m {
        return Err(Error::Shape(format!(
            "boundary quantiles need {} rows, got {} with {} levels",
            disc.boundary.len(),
            bc.n_omega,
            bc.m
        )));
    }
    if let Some(b) = bc.first_non_monotone() {
        return Err(Error::NonMonotone(disc.boundary[b]));
    }
    Ok(())
}

/// Histogram quantiles of every boundary slice, one row per boundary node.
pub fn boundary_quantiles(
    disc: &Discretization,
    bc: &BoundaryData,
    m: usize,
) -> Result<QuantileField> {
    require_q1(disc)?;
    bc.check_shape(disc)?;
    let axis = &disc.d_axes[0];
    let mut values = Vec::with_capacity(disc.boundary.len() * m);
    for b in 0..disc.boundary.len() {
        values.extend(cell_quantiles(axis, bc.slice(b), m));
    }
    Ok(QuantileField {
        n_omega: disc.boundary.len(),
        m,
        values,
    })
}

/// Largest level inversion tolerated as round-off before it is treated as a
/// genuine monotonicity failure.
const MONOTONE_SLACK: f64 = 1e-12;

/// Restores exact level monotonicity after round-off, failing if any
/// inversion exceeds the round-off scale.
fn enforce_monotone(qf: &mut QuantileField) -> Result<()> {
    let scale = qf.values.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for k in 0..qf.n_omega {
        let row = qf.row_mut(k);
        for l in 1..row.len() {
            if row[l] < row[l - 1] {
                if row[l - 1] - row[l] > MONOTONE_SLACK * scale {
                    return Err(Error::NonMonotone(k));
                }
                row[l] = row[l - 1];
            }
        }
    }
    Ok(())
}

/// Per-level discrete harmonic extension of the boundary quantiles.
pub fn solve_quantile(bc: &QuantileField, disc: &Discretization) -> Result<QuantileField> {
    check_bc(disc, bc)?;
    let m = bc.m;
    let interior = harmonic_extension(disc, m, |b| bc.row(b));
    let mut out = QuantileField {
        n_omega: disc.n_omega,
        m,
        values: vec![0.0; disc.n_omega * m],
    };
    for (b, &k) in disc.boundary.iter().enumerate() {
        out.row_mut(k).copy_from_slice(bc.row(b));
    }
    for (j, &k) in disc.interior.iter().enumerate() {
        out.row_mut(k)
            .copy_from_slice(&interior[j * m..(j + 1) * m]);
    }
    enforce_monotone(&mut out)?;
    Ok(out)
}

/// ½ Σ_α Σ_edges w_e ∫₀¹ |∂_α Q|² dt, the Dirichlet energy of the quantile
/// map, which equals the Wasserstein Dirichlet energy for q = 1.
pub fn quantile_energy(disc: &Discretization, qf: &QuantileField) -> Result<f64> {
    if qf.n_omega != disc.n_omega {
        return Err(Error::Shape(
            "quantile field does not match the grid".into(),
        ));
    }
    let m = qf.m as f64;
    let mut total = 0.0;
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        for e in &disc.edges[a] {
            let s: f64 = qf
                .row(e.end)
                .iter()
                .zip(qf.row(e.start))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += e.weight * s / (m * h * h);
        }
    }
    Ok(0.5 * total)
}

/// Largest discrete Laplacian of any quantile level over the interior nodes,
/// the Euler-Lagrange residual of the flat q = 1 problem.
pub fn harmonic_residual(disc: &Discretization, qf: &QuantileField) -> Result<f64> {
    if qf.n_omega != disc.n_omega {
        return Err(Error::Shape(
            "quantile field does not match the grid".into(),
        ));
    }
    let p = disc.p();
    let mut worst = 0.0f64;
    for &k in &disc.interior {
        let idx = disc.omega_multi(k);
        let mut lap = vec![0.0; qf.m];
        for a in 0..p {
            let h2 = disc.omega_axes[a].h.powi(2);
            let (mut lo, mut hi) = (idx, idx);
            lo[a] -= 1;
            hi[a] += 1;
            let (rl, rh) = (
                qf.row(disc.omega_index(&lo[..p])),
                qf.row(disc.omega_index(&hi[..p])),
            );
            for (l, v) in lap.iter_mut().enumerate() {
                *v += (rl[l] - 2.0 * qf.row(k)[l] + rh[l]) / h2;
            }
        }
        worst = lap.iter().fold(worst, |w, v| w.max(v.abs()));
    }
    Ok(worst)
}

/// Per-node quantile W2 distance between two fields on the same grid.
pub fn nodewise_w2(a: &QuantileField, b: &QuantileField) -> Result<Vec<f64>> {
    if a.n_omega != b.n_omega || a.m != b.m {
        return Err(Error::Shape("quantile fields differ in shape".into()));
    }
    Ok((0..a.n_omega)
        .map(|k| {
            let s: f64 = a
                .row(k)
                .iter()
                .zip(b.row(k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (s / a.m as f64).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct JostOptions {
    pub eps: f64,
    pub lambda: f64,
    pub functional: Option<FunctionalSpec>,
    pub max_sweeps: usize,
    /// Stop once a sweep moves no quantile by more than this.
    pub tol: f64,
    /// Sweep nodes in reverse lexicographic order.
    pub reverse: bool,
}

impl JostOptions {
    pub fn new(eps: f64) -> Self {
        JostOptions {
            eps,
            lambda: 0.0,
            functional: None,
            max_sweeps: 500,
            tol: 1e-10,
            reverse: false,
        }
    }

    fn validate(&self, disc: &Discretization) -> Result<()> {
        let h = disc.min_omega_spacing();
        if !(self.eps >= 2.0 * h * (1.0 - 1e-12)) {
            return Err(Error::EpsTooSmall { eps: self.eps, h });
        }
        if !(self.lambda >= 0.0) || !(self.tol > 0.0) {
            return Err(Error::Invalid("λ must be ≥ 0 and the tolerance > 0".into()));
        }
        Ok(())
    }
}

/// Convex piecewise-linear potential on the D grid, minimized level by level.
struct LevelProx {
    lo: f64,
    h: f64,
    v: Vec<f64>,
}

impl LevelProx {
    fn new(disc: &Discretization, f: &FunctionalSpec) -> Result<Self> {
        let v = match &f.kind {
            FunctionalKind::Potential { v } => v.clone(),
            _ => {
                return Err(Error::Invalid(
                    "the Jost step supports only potential functionals when λ > 0".into(),
                ))
            }
        };
        let axis = &disc.d_axes[0];
        if v.len() != axis.n {
            return Err(Error::Shape("potential needs one value per D node".into()));
        }
        let scale = v.iter().fold(1.0f64, |s, x| s.max(x.abs()));
        if v.windows(3)
            .any(|w| w[0] - 2.0 * w[1] + w[2] < -1e-12 * scale)
        {
            return Err(Error::Invalid(
                "the per-level minimization needs a convex potential".into(),
            ));
        }
        Ok(LevelProx {
            lo: axis.lo,
            h: axis.h,
            v,
        })
    }

    fn hi(&self) -> f64 {
        self.lo + self.h * (self.v.len() - 1) as f64
    }

    /// Right derivative of the interpolated potential.
    fn slope(&self, y: f64) -> f64 {
        let j = (((y - self.lo) / self.h).floor().max(0.0) as usize).min(self.v.len() - 2);
        (self.v[j + 1] - self.v[j]) / self.h
    }

    /// argmin_y a(y − c)² + λV(y) on D, by bisection on the monotone
    /// subgradient.
    fn minimize(&self, a: f64, lambda: f64, c: f64) -> f64 {
        let g = |y: f64| 2.0 * a * (y - c) + lambda * self.slope(y);
        let (mut lo, mut hi) = (self.lo, self.hi());
        if g(lo) >= 0.0 {
            return lo;
        }
        if g(hi) <= 0.0 {
            return hi;
        }
        while hi - lo > 1e-12 * self.h {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Ball neighbourhoods on the extended grid: each interior node lists the Ω
/// nodes feeding its barycenter with their multiplicity. Nodes of the
/// extension outside Ω carry the value of the nearest boundary node, so the
/// data on Ω_e \ Ω̊ stay fixed.
struct Neighbourhoods {
    lists: Vec<Vec<(usize, f64)>>,
    /// C_p/ε^{p+2} times the quadrature mass of the punctured ball.
    scale: Vec<f64>,
}

impl Neighbourhoods {
    fn new(disc: &Discretization, eps: f64) -> Result<Self> {
        let p = disc.p();
        let cp = c_p(p)?;
        let axes = &disc.omega_axes;
        let reach: Vec<i64> = axes
            .iter()
            .map(|a| (eps / a.h * (1.0 + 1e-12)).floor() as i64)
            .collect();
        let cell: f64 = axes.iter().map(|a| a.h).product();
        let mut offsets = Vec::new();
        let r1 = if p == 2 { reach[1] } else { 0 };
        for d0 in -reach[0]..=reach[0] {
            for d1 in -r1..=r1 {
                let mut r2 = (d0 as f64 * axes[0].h).powi(2);
                if p == 2 {
                    r2 += (d1 as f64 * axes[1].h).powi(2);
                }
                if (d0, d1) != (0, 0) && r2 <= eps * eps * (1.0 + 1e-12) {
                    offsets.push([d0, d1]);
                }
            }
        }
        let mut lists = Vec::with_capacity(disc.interior.len());
        let mut scale = Vec::with_capacity(disc.interior.len());
        for &k in &disc.interior {
            let idx = disc.omega_multi(k);
            let mut list: Vec<(usize, f64)> = Vec::new();
            for off in &offsets {
                let mut j = [0usize; 2];
                for a in 0..p {
                    j[a] = (idx[a] as i64 + off[a]).clamp(0, axes[a].n as i64 - 1) as usize;
                }
                let target = disc.omega_index(&j[..p]);
                match list.iter_mut().find(|(t, _)| *t == target) {
                    Some(entry) => entry.1 += cell,
                    None => list.push((target, cell)),
                }
            }
            let mass: f64 = list.iter().map(|e| e.1).sum();
            scale.push(cp / eps.powi(p as i32 + 2) * mass);
            lists.push(list);
        }
        Ok(Neighbourhoods { lists, scale })
    }

    /// Minimizer for interior node j given the current field.
    fn target(
        &self,
        j: usize,
        field: &QuantileField,
        prox: Option<(&LevelProx, f64)>,
        out: &mut [f64],
    ) {
        let list = &self.lists[j];
        let mass: f64 = list.iter().map(|e| e.1).sum();
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(t, w) in list {
            for (o, v) in out.iter_mut().zip(field.row(t)) {
                *o += w / mass * v;
            }
        }
        if let Some((lp, lambda)) = prox {
            for o in out.iter_mut() {
                *o = lp.minimize(self.scale[j], lambda, *o);
            }
        }
    }
}

struct JostContext {
    hoods: Neighbourhoods,
    prox: Option<LevelProx>,
    lambda: f64,
}

impl JostContext {
    fn new(disc: &Discretization, opts: &JostOptions) -> Result<Self> {
        require_q1(disc)?;
        opts.validate(disc)?;
        let prox = match (&opts.functional, opts.lambda > 0.0) {
            (Some(f), true) => Some(LevelProx::new(disc, f)?),
            _ => None,
        };
        Ok(JostContext {
            hoods: Neighbourhoods::new(disc, opts.eps)?,
            prox,
            lambda: opts.lambda,
        })
    }

    fn sweep(&self, disc: &Discretization, field: &mut QuantileField, reverse: bool) -> f64 {
        let mut buf = vec![0.0; field.m];
        let mut change = 0.0f64;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..disc.interior.len()).rev())
        } else {
            Box::new(0..disc.interior.len())
        };
        for j in order {
            self.hoods.target(
                j,
                field,
                self.prox.as_ref().map(|p| (p, self.lambda)),
                &mut buf,
            );
            let row = field.row_mut(disc.interior[j]);
            for (r, b) in row.iter_mut().zip(&buf) {
                change = change.max((*r - b).abs());
                *r = *b;
            }
        }
        change
    }

    fn residual(&self, disc: &Discretization, field: &QuantileField) -> Vec<f64> {
        let mut buf = vec![0.0; field.m];
        (0..disc.interior.len())
            .map(|j| {
                self.hoods.target(
                    j,
                    field,
                    self.prox.as_ref().map(|p| (p, self.lambda)),
                    &mut buf,
                );
                field
                    .row(disc.interior[j])
                    .iter()
                    .zip(&buf)
                    .fold(0.0f64, |s, (a, b)| s.max((a - b).abs()))
            })
            .collect()
    }
}

/// One Gauss-Seidel sweep of the barycenter update over the interior nodes.
/// Boundary rows of `field` act as the fixed data.
pub fn jost_step(
    disc: &Discretization,
    field: &QuantileField,
    opts: &JostOptions,
) -> Result<QuantileField> {
    if field.n_omega != disc.n_omega {
        return Err(Error::Shape(
            "quantile field does not match the grid".into(),
        ));
    }
    let ctx = JostContext::new(disc, opts)?;
    let mut out = field.clone();
    ctx.sweep(disc, &mut out, opts.reverse);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct JostReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Largest quantile change during the final sweep.
    pub last_change: f64,
    /// Per interior node, distance of the row to its exact minimizer.
    pub barycenter_residual: Vec<f64>,
    /// Subharmonicity of F∘μ when a functional is supplied.
    pub subharmonicity: Option<SubharmonicReport>,
}

/// Iterates [`jost_step`] to a fixed point, starting from the nearest
/// boundary row at every interior node.
pub fn jost_solve(
    disc: &Discretization,
    bc: &QuantileField,
    opts: &JostOptions,
) -> Result<(QuantileField, JostReport)> {
    check_bc(disc, bc)?;
    let ctx = JostContext::new(disc, opts)?;
    let m = bc.m;
    let mut field = QuantileField {
        n_omega: disc.n_omega,
        m,
        values: vec![0.0; disc.n_omega * m],
    };
    for (b, &k) in disc.boundary.iter().enumerate() {
        field.row_mut(k).copy_from_slice(bc.row(b));
    }
    for &k in &disc.interior {
        let xi = disc.omega_coords[k];
        let nearest = (0..disc.boundary.len())
            .min_by(|&a, &b| {
                let da = dist2(&xi, &disc.omega_coords[disc.boundary[a]], disc.p());
                let db = dist2(&xi, &disc.omega_coords[disc.boundary[b]], disc.p());
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        field.row_mut(k).copy_from_slice(bc.row(nearest));
    }
    let mut sweeps = 0;
    let mut last_change = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        last_change = ctx.sweep(disc, &mut field, opts.reverse);
        sweeps += 1;
        if last_change <= opts.tol {
            break;
        }
    }
    let converged = last_change <= opts.tol;
    enforce_monotone(&mut field)?;
    let barycenter_residual = ctx.residual(disc, &field);
    let subharmonicity = match &opts.functional {
        Some(f) => {
            let mu = from_quantiles(disc, &field)?;
            let values = eval_functional(disc, &mu, f)?;
            Some(subharmonicity_check(disc, &values, 0.0))
        }
        None => None,
    };
    Ok((
        field,
        JostReport {
            sweeps,
            converged,
            last_change,
            barycenter_residual,
            subharmonicity,
        },
    ))
}

fn dist2(a: &[f64; 2], b: &[f64; 2], p: usize) -> f64 {
    (0..p).map(|i| (a[i] - b[i]).powi(2)).sum()
}
