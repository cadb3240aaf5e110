//! Box discretizations of Ω ⊂ R^p and D ⊂ R^q, the staggered layout and the
//! discrete continuity operator.
//!
//! Layout conventions. Nodes are numbered lexicographically with the last axis
//! fastest. A measure field stores `n_omega * n_d` masses, slice-major. The
//! momentum component (α, i) lives on Ω-edges in direction α crossed with
//! D-faces in direction i. Faces are stored in the full layout: along axis i
//! there are `n_i + 1` faces per line, the first and last ones sitting on ∂D
//! where the no-flux condition forces them to zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::MeasureField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p: usize,
    pub q: usize,
    pub omega: Vec<[f64; 2]>,
    pub d: Vec<[f64; 2]>,
    pub n_omega: Vec<usize>,
    pub n_d: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.p) {
            return Err(Error::InvalidGrid(format!("p = {} not in {{1,2}}", self.p)));
        }
        if !(1..=2).contains(&self.q) {
            return Err(Error::InvalidGrid(format!("q = {} not in {{1,2}}", self.q)));
        }
        if self.omega.len() != self.p || self.n_omega.len() != self.p {
            return Err(Error::InvalidGrid(
                "Ω extent/node counts must have p entries".into(),
            ));
        }
        if self.d.len() != self.q || self.n_d.len() != self.q {
            return Err(Error::InvalidGrid(
                "D extent/node counts must have q entries".into(),
            ));
        }
        for (ext, &n) in self
            .omega
            .iter()
            .zip(&self.n_omega)
            .chain(self.d.iter().zip(&self.n_d))
        {
            if n < 3 {
                return Err(Error::InvalidGrid(format!("node count {n} < 3")));
            }
            if !(ext[1] > ext[0]) || !ext[0].is_finite() || !ext[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "extent [{}, {}] is empty",
                    ext[0], ext[1]
                )));
            }
        }
        Ok(())
    }

    /// Unit box on Ω and D with the given node counts.
    pub fn unit(p: usize, q: usize, n_omega: usize, n_d: usize) -> Self {
        GridSpec {
            p,
            q,
            omega: vec![[0.0, 1.0]; p],
            d: vec![[0.0, 1.0]; q],
            n_omega: vec![n_omega; p],
            n_d: vec![n_d; q],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub h: f64,
}

impl Axis {
    fn new(ext: [f64; 2], n: usize) -> Self {
        Axis {
            lo: ext[0],
            hi: ext[1],
            n,
            h: (ext[1] - ext[0]) / (n as f64 - 1.0),
        }
    }

    pub fn coord(&self, k: usize) -> f64 {
        if k + 1 == self.n {
            self.hi
        } else {
            self.lo + k as f64 * self.h
        }
    }

    /// Trapezoid (dual cell) weight of node k.
    pub fn trap(&self, k: usize) -> f64 {
        if k == 0 || k + 1 == self.n {
            0.5 * self.h
        } else {
            self.h
        }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Ω-edge between two nodes adjacent along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub start: usize,
    pub end: usize,
    /// Quadrature weight: spacing along the edge times transverse trapezoid weights.
    pub weight: f64,
}

/// D-face in the full layout; `lo`/`hi` are the adjacent nodes, `None` on ∂D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    pub lo: Option<usize>,
    pub hi: Option<usize>,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.lo.is_none() || self.hi.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct Discretization {
    pub spec: GridSpec,
    pub omega_axes: Vec<Axis>,
    pub d_axes: Vec<Axis>,
    pub n_omega: usize,
    pub n_d: usize,
    pub omega_coords: Vec<[f64; 2]>,
    pub d_coords: Vec<[f64; 2]>,
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    /// Position of a node in `boundary`, if it is a boundary node.
    pub boundary_pos: Vec<Option<usize>>,
    /// Unit outward normal per boundary node (same order as `boundary`).
    pub normals: Vec<[f64; 2]>,
    /// Boundary quadrature weight per boundary node.
    pub boundary_weights: Vec<f64>,
    /// Trapezoid volume of each Ω node's dual cell.
    pub node_weights: Vec<f64>,
    /// Trapezoid volume of each D node's dual cell.
    pub d_weights: Vec<f64>,
    pub edges: Vec<Vec<Edge>>,
    pub faces: Vec<Vec<Face>>,
    pub interior_faces: Vec<Vec<usize>>,
}

fn multi_index(mut k: usize, dims: &[usize]) -> [usize; 2] {
    let mut out = [0usize; 2];
    for a in (0..dims.len()).rev() {
        out[a] = k % dims[a];
        k /= dims[a];
    }
    out
}

fn flat_index(idx: &[usize], dims: &[usize]) -> usize {
    let mut k = 0;
    for a in 0..dims.len() {
        k = k * dims[a] + idx[a];
    }
    k
}

pub fn build_discretization(spec: &GridSpec) -> Result<Discretization> {
    spec.validate()?;
    let omega_axes: Vec<Axis> = spec
        .omega
        .iter()
        .zip(&spec.n_omega)
        .map(|(e, &n)| Axis::new(*e, n))
        .collect();
    let d_axes: Vec<Axis> = spec
        .d
        .iter()
        .zip(&spec.n_d)
        .map(|(e, &n)| Axis::new(*e, n))
        .collect();
    let n_omega: usize = spec.n_omega.iter().product();
    let n_d: usize = spec.n_d.iter().product();

    let mut omega_coords = Vec::with_capacity(n_omega);
    let mut node_weights = Vec::with_capacity(n_omega);
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    let mut boundary_pos = vec![None; n_omega];
    let mut normals = Vec::new();
    let mut boundary_weights = Vec::new();
    for k in 0..n_omega {
        let idx = multi_index(k, &spec.n_omega);
        let mut c = [0.0; 2];
        let mut w = 1.0;
        let mut s = [0.0; 2];
        let mut on_boundary = false;
        for a in 0..spec.p {
            let ax = &omega_axes[a];
            c[a] = ax.coord(idx[a]);
            w *= ax.trap(idx[a]);
            // Boundary face of the dual cell orthogonal to axis a.
            let side = if idx[a] == 0 {
                -1.0
            } else if idx[a] + 1 == ax.n {
                1.0
            } else {
                0.0
            };
            if side != 0.0 {
                on_boundary = true;
                let mut area = 1.0;
                for b in 0..spec.p {
                    if b != a {
                        area *= omega_axes[b].trap(idx[b]);
                    }
                }
                s[a] += side * area;
            }
        }
        omega_coords.push(c);
        node_weights.push(w);
        if on_boundary {
            let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
            boundary_pos[k] = Some(boundary.len());
            boundary.push(k);
            normals.push([s[0] / norm, s[1] / norm]);
            boundary_weights.push(norm);
        } else {
            interior.push(k);
        }
    }

    let mut d_coords = Vec::with_capacity(n_d);
    let mut d_weights = Vec::with_capacity(n_d);
    for k in 0..n_d {
        let idx = multi_index(k, &spec.n_d);
        let mut c = [0.0; 2];
        let mut w = 1.0;
        for i in 0..spec.q {
            c[i] = d_axes[i].coord(idx[i]);
            w *= d_axes[i].trap(idx[i]);
        }
        d_coords.push(c);
        d_weights.push(w);
    }

    let mut edges = Vec::with_capacity(spec.p);
    for a in 0..spec.p {
        let mut list = Vec::new();
        for k in 0..n_omega {
            let idx = multi_index(k, &spec.n_omega);
            if idx[a] + 1 >= spec.n_omega[a] {
                continue;
            }
            let mut j = idx;
            j[a] += 1;
            let end = flat_index(&j[..spec.p], &spec.n_omega);
            let mut w = omega_axes[a].h;
            for b in 0..spec.p {
                if b != a {
                    w *= omega_axes[b].trap(idx[b]);
                }
            }
            list.push(Edge {
                start: k,
                end,
                weight: w,
            });
        }
        edges.push(list);
    }

    let mut faces = Vec::with_capacity(spec.q);
    let mut interior_faces = Vec::with_capacity(spec.q);
    for i in 0..spec.q {
        let mut dims = spec.n_d.clone();
        dims[i] += 1;
        let count: usize = dims.iter().product();
        let mut list = Vec::with_capacity(count);
        let mut inner = Vec::new();
        for f in 0..count {
            let idx = multi_index(f, &dims);
            let j = idx[i];
            let mut lo_idx = idx;
            let lo = if j == 0 {
                None
            } else {
                lo_idx[i] = j - 1;
                Some(flat_index(&lo_idx[..spec.q], &spec.n_d))
            };
            let mut hi_idx = idx;
            let hi = if j == spec.n_d[i] {
                None
            } else {
                hi_idx[i] = j;
                Some(flat_index(&hi_idx[..spec.q], &spec.n_d))
            };
            let face = Face { lo, hi };
            if !face.is_boundary() {
                inner.push(f);
            }
            list.push(face);
        }
        faces.push(list);
        interior_faces.push(inner);
    }

    Ok(Discretization {
        spec: spec.clone(),
        omega_axes,
        d_axes,
        n_omega,
        n_d,
        omega_coords,
        d_coords,
        interior,
        boundary,
        boundary_pos,
        normals,
        boundary_weights,
        node_weights,
        d_weights,
        edges,
        faces,
        interior_faces,
    })
}

impl Discretization {
    pub fn p(&self) -> usize {
        self.spec.p
    }

    pub fn q(&self) -> usize {
        self.spec.q
    }

    pub fn omega_index(&self, idx: &[usize]) -> usize {
        flat_index(idx, &self.spec.n_omega)
    }

    pub fn omega_multi(&self, k: usize) -> [usize; 2] {
        multi_index(k, &self.spec.n_omega)
    }

    pub fn d_index(&self, idx: &[usize]) -> usize {
        flat_index(idx, &self.spec.n_d)
    }

    pub fn d_multi(&self, k: usize) -> [usize; 2] {
        multi_index(k, &self.spec.n_d)
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        self.boundary_pos[k].is_some()
    }

    pub fn omega_volume(&self) -> f64 {
        self.omega_axes.iter().map(Axis::length).product()
    }

    pub fn d_volume(&self) -> f64 {
        self.d_axes.iter().map(Axis::length).product()
    }

    pub fn min_omega_spacing(&self) -> f64 {
        self.omega_axes
            .iter()
            .map(|a| a.h)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_d_spacing(&self) -> f64 {
        self.d_axes
            .iter()
            .map(|a| a.h)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_d_spacing(&self) -> f64 {
        self.d_axes.iter().map(|a| a.h).fold(0.0, f64::max)
    }

    /// Number of values in the momentum component (α, i).
    pub fn component_len(&self, alpha: usize, i: usize) -> usize {
        self.edges[alpha].len() * self.faces[i].len()
    }

    /// Number of rows of the continuity operator for direction α.
    pub fn constraint_len(&self, alpha: usize) -> usize {
        self.edges[alpha].len() * self.n_d
    }
}

/// Staggered momentum: component `alpha * q + i` holds E^{αi} on
/// (α-edges) × (i-faces, full layout), edge-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumField {
    pub p: usize,
    pub q: usize,
    pub components: Vec<Vec<f64>>,
}

impl MomentumField {
    pub fn zeros(disc: &Discretization) -> Self {
        let mut components = Vec::new();
        for a in 0..disc.p() {
            for i in 0..disc.q() {
                components.push(vec![0.0; disc.component_len(a, i)]);
            }
        }
        MomentumField {
            p: disc.p(),
            q: disc.q(),
            components,
        }
    }

    pub fn comp(&self, alpha: usize, i: usize) -> &[f64] {
        &self.components[alpha * self.q + i]
    }

    pub fn comp_mut(&mut self, alpha: usize, i: usize) -> &mut [f64] {
        &mut self.components[alpha * self.q + i]
    }

    pub fn check_shape(&self, disc: &Discretization) -> Result<()> {
        if self.p != disc.p() || self.q != disc.q() || self.components.len() != disc.p() * disc.q()
        {
            return Err(Error::Shape("momentum component count".into()));
        }
        for a in 0..disc.p() {
            for i in 0..disc.q() {
                if self.comp(a, i).len() != disc.component_len(a, i) {
                    return Err(Error::Shape(format!("momentum component ({a},{i}) length")));
                }
            }
        }
        Ok(())
    }

    /// Errors if any face on ∂D carries momentum.
    pub fn check_no_flux(&self, disc: &Discretization) -> Result<()> {
        for a in 0..disc.p() {
            let ne = disc.edges[a].len();
            for i in 0..disc.q() {
                let nf = disc.faces[i].len();
                let c = self.comp(a, i);
                for (f, face) in disc.faces[i].iter().enumerate() {
                    if face.is_boundary() {
                        for e in 0..ne {
                            let v = c[e * nf + f];
                            if v != 0.0 {
                                return Err(Error::NoFlux {
                                    alpha: a,
                                    i,
                                    value: v,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &MomentumField) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }
}

/// Values on (α-edge) × (D-node) for each α: the range of the continuity operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintField {
    pub values: Vec<Vec<f64>>,
}

impl ConstraintField {
    pub fn zeros(disc: &Discretization) -> Self {
        ConstraintField {
            values: (0..disc.p())
                .map(|a| vec![0.0; disc.constraint_len(a)])
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &ConstraintField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }
}

/// K(μ, E) = ∂_α μ + Σ_i ∂_i E^{αi} on every α-edge and D-node.
pub fn apply_continuity_operator(
    disc: &Discretization,
    mu: &[f64],
    e: &MomentumField,
) -> Result<ConstraintField> {
    if mu.len() != disc.n_omega * disc.n_d {
        return Err(Error::Shape(format!(
            "measure length {} != {}",
            mu.len(),
            disc.n_omega * disc.n_d
        )));
    }
    e.check_shape(disc)?;
    let nd = disc.n_d;
    let mut out = ConstraintField::zeros(disc);
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        let vals = &mut out.values[a];
        for (ei, edge) in disc.edges[a].iter().enumerate() {
            let row = &mut vals[ei * nd..(ei + 1) * nd];
            let s = &mu[edge.start * nd..(edge.start + 1) * nd];
            let t = &mu[edge.end * nd..(edge.end + 1) * nd];
            for x in 0..nd {
                row[x] = (t[x] - s[x]) / h;
            }
            for i in 0..disc.q() {
                let hi = disc.d_axes[i].h;
                let nf = disc.faces[i].len();
                let c = &e.comp(a, i)[ei * nf..(ei + 1) * nf];
                for (f, face) in disc.faces[i].iter().enumerate() {
                    let v = c[f] / hi;
                    if v == 0.0 {
                        continue;
                    }
                    if let Some(lo) = face.lo {
                        row[lo] += v;
                    }
                    if let Some(up) = face.hi {
                        row[up] -= v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_continuity_operator`] for the Euclidean inner products.
pub fn apply_continuity_adjoint(
    disc: &Discretization,
    lambda: &ConstraintField,
) -> Result<(Vec<f64>, MomentumField)> {
    for a in 0..disc.p() {
        if lambda.values.len() != disc.p() || lambda.values[a].len() != disc.constraint_len(a) {
            return Err(Error::Shape("multiplier shape".into()));
        }
    }
    let nd = disc.n_d;
    let mut gmu = vec![0.0; disc.n_omega * nd];
    let mut ge = MomentumField::zeros(disc);
    for a in 0..disc.p() {
        let h = disc.omega_axes[a].h;
        for (ei, edge) in disc.edges[a].iter().enumerate() {
            let row = &lambda.values[a][ei * nd..(ei + 1) * nd];
            for x in 0..nd {
                gmu[edge.end * nd + x] += row[x] / h;
                gmu[edge.start * nd + x] -= row[x] / h;
            }
            for i in 0..disc.q() {
                let hi = disc.d_axes[i].h;
                let nf = disc.faces[i].len();
                let c = &mut ge.comp_mut(a, i)[ei * nf..(ei + 1) * nf];
                for (f, face) in disc.faces[i].iter().enumerate() {
                    let mut v = 0.0;
                    if let Some(lo) = face.lo {
                        v += row[lo];
                    }
                    if let Some(up) = face.hi {
                        v -= row[up];
                    }
                    c[f] = v / hi;
                }
            }
        }
    }
    Ok((gmu, ge))
}

/// Residual of the discrete continuity equation with μ clamped to the
/// boundary data on ∂Ω.
#[derive(Clone, Debug)]
pub struct ContinuityResidual {
    pub residual: ConstraintField,
    pub max_norm: f64,
}

pub fn continuity_residual(
    disc: &Discretization,
    mu: &MeasureField,
    e: &MomentumField,
    bc: &crate::bbsolver::BoundaryData,
) -> Result<ContinuityResidual> {
    mu.check_shape(disc)?;
    bc.check_shape(disc)?;
    e.check_shape(disc)?;
    e.check_no_flux(disc)?;
    let mut values = mu.values.clone();
    let nd = disc.n_d;
    for (b, &node) in disc.boundary.iter().enumerate() {
        values[node * nd..(node + 1) * nd].copy_from_slice(bc.slice(b));
    }
    let residual = apply_continuity_operator(disc, &values, e)?;
    let max_norm = residual.max_abs();
    Ok(ContinuityResidual { residual, max_norm })
}

/// Power-iteration estimate of the operator norm of the continuity operator.
pub fn continuity_operator_norm(disc: &Discretization, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lam = ConstraintField::zeros(disc);
    for v in lam.values.iter_mut().flatten() {
        *v = rng.gen::<f64>() - 0.5;
    }
    let mut est = 0.0;
    for _ in 0..iters {
        let n = lam.dot(&lam).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        for v in lam.values.iter_mut().flatten() {
            *v /= n;
        }
        let (gmu, ge) = apply_continuity_adjoint(disc, &lam).expect("shapes are consistent");
        lam = apply_continuity_operator(disc, &gmu, &ge).expect("shapes are consistent");
        est = lam.dot(&lam).sqrt().sqrt();
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_boundary() {
        let d = build_discretization(&GridSpec::unit(1, 1, 3, 4)).unwrap();
        assert_eq!(d.boundary, vec![0, 2]);
        assert_eq!(d.interior, vec![1]);
        assert_eq!(d.normals[0][0], -1.0);
        assert_eq!(d.normals[1][0], 1.0);
    }

    #[test]
    fn square_three_by_three() {
        let d = build_discretization(&GridSpec::unit(2, 1, 3, 4)).unwrap();
        assert_eq!(d.boundary.len(), 8);
        assert_eq!(d.interior, vec![4]);
        for n in &d.normals {
            assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() < 1e-15);
        }
        let corner = d.boundary_pos[0].unwrap();
        let r = 0.5f64.sqrt();
        assert!(
            (d.normals[corner][0] + r).abs() < 1e-15 && (d.normals[corner][1] + r).abs() < 1e-15
        );
    }

    #[test]
    fn spacings() {
        let spec = GridSpec {
            p: 2,
            q: 1,
            omega: vec![[0.0, 1.0], [0.0, 2.0]],
            d: vec![[0.0, 1.0]],
            n_omega: vec![5, 4],
            n_d: vec![3],
        };
        let d = build_discretization(&spec).unwrap();
        assert_eq!(d.omega_axes[0].h, 0.25);
        assert!((d.omega_axes[1].h - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_dimension() {
        let mut spec = GridSpec::unit(1, 1, 3, 3);
        spec.p = 3;
        assert!(build_discretization(&spec).is_err());
        let mut spec = GridSpec::unit(1, 1, 3, 3);
        spec.q = 0;
        assert!(build_discretization(&spec).is_err());
        assert!(build_discretization(&GridSpec::unit(1, 1, 2, 3)).is_err());
    }

    #[test]
    fn weights_sum_to_volumes() {
        let d = build_discretization(&GridSpec::unit(2, 2, 5, 6)).unwrap();
        let w: f64 = d.node_weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-14);
        let wd: f64 = d.d_weights.iter().sum();
        assert!((wd - 1.0).abs() < 1e-14);
        for a in 0..2 {
            let we: f64 = d.edges[a].iter().map(|e| e.weight).sum();
            assert!((we - 1.0).abs() < 1e-14);
        }
        let per: f64 = d
            .boundary_weights
            .iter()
            .zip(&d.normals)
            .map(|(w, n)| w * n[0])
            .sum();
        assert!(per.abs() < 1e-14);
    }

    #[test]
    fn zero_in_zero_out() {
        let d = build_discretization(&GridSpec::unit(2, 2, 4, 5)).unwrap();
        let mu = vec![0.0; d.n_omega * d.n_d];
        let out = apply_continuity_operator(&d, &mu, &MomentumField::zeros(&d)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn adjoint_identity() {
        for (p, q) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let d = build_discretization(&GridSpec::unit(p, q, 8, 8)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..10 {
                let mu: Vec<f64> = (0..d.n_omega * d.n_d)
                    .map(|_| rng.gen::<f64>() - 0.5)
                    .collect();
                let mut e = MomentumField::zeros(&d);
                for v in e.components.iter_mut().flatten() {
                    *v = rng.gen::<f64>() - 0.5;
                }
                let mut lam = ConstraintField::zeros(&d);
                for v in lam.values.iter_mut().flatten() {
                    *v = rng.gen::<f64>() - 0.5;
                }
                let kx = apply_continuity_operator(&d, &mu, &e).unwrap();
                let (gm, ge) = apply_continuity_adjoint(&d, &lam).unwrap();
                let lhs = kx.dot(&lam);
                let rhs = mu.iter().zip(&gm).map(|(a, b)| a * b).sum::<f64>() + e.dot(&ge);
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()),
                    "{lhs} {rhs}"
                );
            }
        }
    }

    #[test]
    fn norm_estimate_is_finite_and_bounded() {
        let d = build_discretization(&GridSpec::unit(1, 1, 8, 8)).unwrap();
        let n = continuity_operator_norm(&d, 200, 3);
        // Gershgorin-type bound: each row has |entries| summing to 2/hΩ + 2/hD.
        let bound = 2.0 / d.omega_axes[0].h + 2.0 / d.d_axes[0].h;
        assert!(n.is_finite() && n > 0.0 && n <= bound * 1.0001);
    }
}
