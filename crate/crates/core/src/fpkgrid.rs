// SPDX-License-Identifier: Apache-2.0

//! Finite-difference Fokker–Planck–Kolmogorov solver on a 1-D or 2-D grid.
//!
//! The forward operator `A p = -Σ ∂ᵢ(fᵢ p) + ½ Σ ∂ᵢ∂ⱼ(Dᵢⱼ p)`, `D = L Q Lᵀ`, is
//! discretized with central differences in conservative form and zero
//! (Dirichlet) boundary values. Mass that reaches the boundary is lost, which
//! `grid_moments` guards against.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::adf::MomentState;
use crate::error::{invalid, Error, Result};
use crate::linalg::cholesky_lower;
use crate::odeint::{integrate_with, Method, TimeGrid};
use crate::sdemodel::SdeModel;

/// Largest grid the dense matrix exponential accepts.
pub const MAX_EXPM_NODES: usize = 4096;
/// Largest Gaussian mass a grid may cut off at initialization.
const MAX_OUTSIDE_MASS: f64 = 1e-4;
/// Smallest remaining mass for which grid moments are meaningful.
const MIN_MASS: f64 = 0.5;

/// Uniform tensor grid with `points` nodes per axis, axis 0 varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: usize) -> Result<Self> {
        let spec = Self { lower, upper, points };
        spec.validate()?;
        Ok(spec)
    }

    /// Same bounds on every axis.
    pub fn square(dim: usize, lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], points)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.lower.len();
        if !(1..=2).contains(&dim) || self.upper.len() != dim {
            return invalid("grid must be 1-D or 2-D with one bound pair per axis");
        }
        if self.points < 3 {
            return invalid("grid needs at least 3 points per axis");
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return invalid(format!("bad grid axis [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points - 1) as f64
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i == self.points - 1 {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing(axis)
        }
    }

    /// Per-axis indices of a flat node index.
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        [idx % self.points, idx / self.points]
    }

    pub fn flat_index(&self, ix: [usize; 2]) -> usize {
        ix[0] + ix[1] * self.points
    }

    pub fn node(&self, idx: usize) -> DVector<f64> {
        let ix = self.multi_index(idx);
        DVector::from_fn(self.dim(), |a, _| self.coordinate(a, ix[a]))
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let ix = self.multi_index(idx);
        (0..self.dim()).any(|a| ix[a] == 0 || ix[a] == self.points - 1)
    }

    /// Trapezoid weight of a node.
    pub fn weight(&self, idx: usize) -> f64 {
        let ix = self.multi_index(idx);
        (0..self.dim())
            .map(|a| {
                let h = self.spacing(a);
                if ix[a] == 0 || ix[a] == self.points - 1 {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }

    fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }
}

/// Density values at the grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub values: DVector<f64>,
}

impl GridDensity {
    /// Trapezoidal integral of the density.
    pub fn mass(&self) -> f64 {
        mass(&self.spec, &self.values)
    }
}

fn mass(spec: &GridSpec, values: &DVector<f64>) -> f64 {
    values.iter().enumerate().map(|(i, p)| spec.weight(i) * p).sum()
}

/// Assembles the forward operator with the model frozen at time `t`.
pub fn assemble_operator<M: SdeModel + ?Sized>(model: &M, spec: &GridSpec, t: f64) -> Result<CsrMatrix<f64>> {
    spec.validate()?;
    let dim = spec.dim();
    if model.dim() != dim {
        return invalid(format!("model has dimension {}, grid has {dim}", model.dim()));
    }
    let len = spec.len();
    let mut drift = Vec::with_capacity(len);
    let mut diff = Vec::with_capacity(len);
    for idx in 0..len {
        let z = spec.node(idx);
        drift.push(model.drift(&z, t));
        diff.push(model.diffusion_cov(&z, t));
    }
    let h: Vec<f64> = (0..dim).map(|a| spec.spacing(a)).collect();
    let mut coo = CooMatrix::new(len, len);
    for idx in 0..len {
        if spec.is_boundary(idx) {
            continue;
        }
        let ix = spec.multi_index(idx);
        let shifted = |axis: usize, step: isize| {
            let mut j = ix;
            j[axis] = (j[axis] as isize + step) as usize;
            spec.flat_index(j)
        };
        for a in 0..dim {
            let (up, down) = (shifted(a, 1), shifted(a, -1));
            // −∂ₐ(fₐ p)
            coo.push(idx, up, -drift[up][a] / (2.0 * h[a]));
            coo.push(idx, down, drift[down][a] / (2.0 * h[a]));
            // ½ ∂ₐ²(Dₐₐ p)
            let c = 0.5 / (h[a] * h[a]);
            coo.push(idx, up, c * diff[up][(a, a)]);
            coo.push(idx, down, c * diff[down][(a, a)]);
            coo.push(idx, idx, -2.0 * c * diff[idx][(a, a)]);
        }
        if dim == 2 {
            // ½ (∂₀∂₁ + ∂₁∂₀)(D₀₁ p) with the four-point cross stencil
            let c = 1.0 / (4.0 * h[0] * h[1]);
            for (s0, s1, sign) in [(1isize, 1isize, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                let j = spec.flat_index([(ix[0] as isize + s0) as usize, (ix[1] as isize + s1) as usize]);
                let v = sign * c * 0.5 * (diff[j][(0, 1)] + diff[j][(1, 0)]);
                if v != 0.0 {
                    coo.push(idx, j, v);
                }
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// `A p` for a CSR operator.
pub fn apply(a: &CsrMatrix<f64>, p: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        out[i] = row.col_indices().iter().zip(row.values()).map(|(&j, v)| v * p[j]).sum();
    }
    out
}

/// `N(m0, P0)` sampled at the nodes, boundary set to zero, renormalized to mass 1.
pub fn gaussian_init(m0: &DVector<f64>, p0: &DMatrix<f64>, spec: &GridSpec) -> Result<GridDensity> {
    spec.validate()?;
    let dim = spec.dim();
    if m0.len() != dim || p0.nrows() != dim || p0.ncols() != dim {
        return invalid("initial moments do not match the grid dimension");
    }
    let root = cholesky_lower(p0).map_err(|_| {
        Error::InvalidArgument("initial covariance must be positive definite; use point_mass for a Dirac start".into())
    })?;
    let mut outside = 0.0;
    for a in 0..dim {
        let marginal = Normal::new(m0[a], p0[(a, a)].sqrt()).expect("positive variance");
        outside += marginal.cdf(spec.lower[a]) + marginal.sf(spec.upper[a]);
    }
    if outside > MAX_OUTSIDE_MASS {
        return Err(Error::MassOutsideGrid { outside });
    }
    let det: f64 = root.diagonal().iter().product();
    let norm = ((2.0 * std::f64::consts::PI).powi(dim as i32)).sqrt() * det;
    let mut values = DVector::zeros(spec.len());
    for idx in 0..spec.len() {
        if spec.is_boundary(idx) {
            continue;
        }
        let r = spec.node(idx) - m0;
        let w = root.solve_lower_triangular(&r).expect("factor has positive diagonal");
        values[idx] = (-0.5 * w.norm_squared()).exp() / norm;
    }
    let total = mass(spec, &values);
    values /= total;
    Ok(GridDensity { spec: spec.clone(), values })
}

/// Discrete delta: all mass on the node nearest `z0`.
pub fn point_mass(z0: &DVector<f64>, spec: &GridSpec) -> Result<GridDensity> {
    spec.validate()?;
    if z0.len() != spec.dim() {
        return invalid("point does not match the grid dimension");
    }
    let mut ix = [0usize; 2];
    for a in 0..spec.dim() {
        let pos = ((z0[a] - spec.lower[a]) / spec.spacing(a)).round();
        if pos < 1.0 || pos > (spec.points - 2) as f64 {
            return Err(Error::MassOutsideGrid { outside: 1.0 });
        }
        ix[a] = pos as usize;
    }
    let mut values = DVector::zeros(spec.len());
    values[spec.flat_index(ix)] = 1.0 / spec.cell_volume();
    Ok(GridDensity { spec: spec.clone(), values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Evolution {
    /// Dense `exp(t A) p0`.
    MatrixExp,
    /// Classical RK4 on `dp/dt = A p`.
    Rk4 { dt: f64 },
}

/// Evolves `p0` for a duration `t`. Output values are clamped at zero.
pub fn evolve(a: &CsrMatrix<f64>, p0: &GridDensity, t: f64, method: Evolution) -> Result<GridDensity> {
    let n = p0.spec.len();
    if a.nrows() != n || a.ncols() != n {
        return invalid("operator does not match the grid");
    }
    if !(t >= 0.0) || !t.is_finite() {
        return invalid(format!("evolution time must be non-negative, got {t}"));
    }
    if t == 0.0 {
        return Ok(p0.clone());
    }
    let values = match method {
        Evolution::MatrixExp => {
            if n > MAX_EXPM_NODES {
                return Err(Error::Capacity(format!(
                    "matrix exponential limited to {MAX_EXPM_NODES} nodes, grid has {n}; use RK4 stepping"
                )));
            }
            let dense = DMatrix::from(a) * t;
            dense.exp() * &p0.values
        }
        Evolution::Rk4 { dt } => {
            let grid = TimeGrid::new(0.0, t, dt)?;
            integrate_with(|_, p| Ok(apply(a, p)), p0.values.clone(), &grid, Method::Rk4, |_, _, _| Ok(()))?
        }
    };
    Ok(GridDensity { spec: p0.spec.clone(), values: values.map(|v| v.max(0.0)) })
}

/// Trapezoidal total mass of a density.
pub fn grid_mass(p: &GridDensity) -> f64 {
    p.mass()
}

/// Mean and covariance of the (mass-normalized) grid density.
pub fn grid_moments(p: &GridDensity) -> Result<MomentState> {
    let spec = &p.spec;
    let dim = spec.dim();
    let total = p.mass();
    if !(total >= MIN_MASS) {
        return Err(Error::Leakage { mass: total });
    }
    let mut mean = DVector::zeros(dim);
    for idx in 0..spec.len() {
        let w = spec.weight(idx) * p.values[idx] / total;
        mean.axpy(w, &spec.node(idx), 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for idx in 0..spec.len() {
        let w = spec.weight(idx) * p.values[idx] / total;
        let r = spec.node(idx) - &mean;
        cov.ger(w, &r, &r, 1.0);
    }
    crate::linalg::symmetrize(&mut cov);
    Ok(MomentState { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdemodel::{make_benes, make_linear};
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn heat() -> crate::sdemodel::LinearModel {
        make_linear(scalar(0.0), scalar(1.0))
    }

    fn heat_error(points: usize) -> f64 {
        let spec = GridSpec::square(1, -6.0, 6.0, points).unwrap();
        let a = assemble_operator(&heat(), &spec, 0.0).unwrap();
        let p0 = point_mass(&DVector::zeros(1), &spec).unwrap();
        let h = spec.spacing(0);
        let p = evolve(&a, &p0, 1.0, Evolution::Rk4 { dt: 0.2 * h * h }).unwrap();
        (0..spec.len())
            .map(|i| {
                let z = spec.node(i)[0];
                (p.values[i] - (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_model_gives_zero_operator() {
        let zero = make_linear(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let spec = GridSpec::square(2, -1.0, 1.0, 5).unwrap();
        let a = assemble_operator(&zero, &spec, 0.0).unwrap();
        assert!(a.values().iter().all(|v| *v == 0.0));
        let p0 = gaussian_init(&DVector::zeros(2), &(DMatrix::identity(2, 2) * 0.04), &spec).unwrap();
        let p = evolve(&a, &p0, 3.0, Evolution::Rk4 { dt: 0.1 }).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn heat_stencil_rows() {
        let spec = GridSpec::square(1, -1.0, 1.0, 11).unwrap();
        let a = assemble_operator(&heat(), &spec, 0.0).unwrap();
        let h = spec.spacing(0);
        let c = 1.0 / (2.0 * h * h);
        let dense = DMatrix::from(&a);
        for i in 1..10 {
            assert_relative_eq!(dense[(i, i)], -2.0 * c, epsilon = 1e-9);
            assert_relative_eq!(dense[(i, i - 1)], c, epsilon = 1e-9);
            assert_relative_eq!(dense[(i, i + 1)], c, epsilon = 1e-9);
        }
        assert!(dense.row(0).iter().all(|v| *v == 0.0));
        assert!(dense.row(10).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interior_columns_conserve_mass() {
        let model = make_benes(2, DVector::zeros(2));
        let spec = GridSpec::square(2, -3.0, 3.0, 15).unwrap();
        let a = DMatrix::from(&assemble_operator(&model, &spec, 0.0).unwrap());
        let scale = a.amax();
        for c in 0..spec.len() {
            let ix = spec.multi_index(c);
            // columns whose stencil only reaches interior rows
            if ix.iter().all(|&i| i >= 2 && i + 2 < spec.points) {
                assert!(a.column(c).sum().abs() <= 1e-8 * scale);
            }
        }
        let spec1 = GridSpec::square(1, -3.0, 3.0, 31).unwrap();
        let a1 = DMatrix::from(&assemble_operator(&make_benes(1, DVector::zeros(1)), &spec1, 0.0).unwrap());
        for c in 2..29 {
            assert!(a1.column(c).sum().abs() <= 1e-8 * a1.amax());
        }
        assert!(a1.row(15).iter().filter(|v| **v != 0.0).count() <= 3);
    }

    #[test]
    fn cross_stencil_pattern() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let model = make_linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.1, -1.0]), l);
        let spec = GridSpec::square(2, -2.0, 2.0, 9).unwrap();
        let a = assemble_operator(&model, &spec, 0.0).unwrap();
        for (i, row) in a.row_iter().enumerate() {
            assert!(row.nnz() <= 9);
            if !spec.is_boundary(i) {
                assert_eq!(row.nnz(), 9);
            }
        }
    }

    #[test]
    fn gaussian_init_properties() {
        let spec = GridSpec::square(2, -4.0, 4.0, 41).unwrap();
        let p = gaussian_init(&DVector::zeros(2), &(DMatrix::identity(2, 2) * 0.5), &spec).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-10);
        for idx in 0..spec.len() {
            let [i, j] = spec.multi_index(idx);
            let mirror = spec.flat_index([40 - i, j]);
            let transposed = spec.flat_index([j, i]);
            assert!((p.values[idx] - p.values[mirror]).abs() < 1e-12);
            assert!((p.values[idx] - p.values[transposed]).abs() < 1e-12);
        }
        let m = grid_moments(&p).unwrap();
        assert!(m.mean.amax() < 1e-10);

        let m0 = DVector::from_column_slice(&[0.3, -0.4]);
        let p0 = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
        let g = grid_moments(&gaussian_init(&m0, &p0, &spec).unwrap()).unwrap();
        assert!((&g.mean - &m0).amax() <= 0.005 * 0.5);
        assert!((&g.cov - &p0).amax() <= 0.005 * 0.5);

        assert!(matches!(
            gaussian_init(&DVector::from_column_slice(&[3.5, 0.0]), &DMatrix::identity(2, 2), &spec),
            Err(Error::MassOutsideGrid { .. })
        ));
    }

    #[test]
    fn narrow_gaussian_is_concentrated() {
        let spec = GridSpec::square(1, -2.0, 2.0, 81).unwrap();
        let h = spec.spacing(0);
        let p = gaussian_init(&DVector::zeros(1), &scalar((2.0 * h).powi(2)), &spec).unwrap();
        let near: f64 = (37..=43).map(|i| spec.weight(i) * p.values[i]).sum();
        assert!(near > 0.85, "{near}");
        assert_eq!(p.values.argmax().0, 40);
    }

    #[test]
    fn heat_kernel_check() {
        let spec = GridSpec::square(1, -6.0, 6.0, 201).unwrap();
        let a = assemble_operator(&heat(), &spec, 0.0).unwrap();
        let p0 = point_mass(&DVector::zeros(1), &spec).unwrap();
        assert_eq!(evolve(&a, &p0, 0.0, Evolution::MatrixExp).unwrap(), p0);
        let expm = evolve(&a, &p0, 1.0, Evolution::MatrixExp).unwrap();
        let rk4 = evolve(&a, &p0, 1.0, Evolution::Rk4 { dt: 1e-3 }).unwrap();
        assert!((&expm.values - &rk4.values).amax() <= 1e-8);
        assert!(heat_error(201) <= 1e-3);
        let m = grid_moments(&expm).unwrap();
        assert!(m.mean[0].abs() <= 1e-3);
        assert!((m.cov[(0, 0)] - 1.0).abs() <= 0.01);
    }

    #[test]
    fn heat_error_is_second_order() {
        let coarse = heat_error(61);
        let fine = heat_error(121);
        assert!(coarse / fine >= 3.0, "{coarse} / {fine}");
    }

    #[test]
    fn mass_never_increases() {
        let model = make_linear(scalar(0.8), scalar(1.0));
        let spec = GridSpec::square(1, -3.0, 3.0, 61).unwrap();
        let a = assemble_operator(&model, &spec, 0.0).unwrap();
        let p0 = gaussian_init(&DVector::zeros(1), &scalar(0.3), &spec).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 1e-3).unwrap();
        let mut last = p0.mass();
        integrate_with(
            |_, p| Ok(apply(&a, p)),
            p0.values.clone(),
            &grid,
            Method::Rk4,
            |_, _, p| {
                let m = mass(&spec, p);
                assert!(m <= last + 1e-10);
                last = m;
                Ok(())
            },
        )
        .unwrap();
        assert!(last < p0.mass());
    }

    #[test]
    fn leakage_is_reported() {
        let spec = GridSpec::square(1, -2.0, 2.0, 41).unwrap();
        let a = assemble_operator(&heat(), &spec, 0.0).unwrap();
        let p0 = point_mass(&DVector::zeros(1), &spec).unwrap();
        let p = evolve(&a, &p0, 10.0, Evolution::Rk4 { dt: 1e-3 }).unwrap();
        assert!(matches!(grid_moments(&p), Err(Error::Leakage { .. })));
    }

    #[test]
    fn size_guard_and_instability() {
        let spec = GridSpec::square(2, -1.0, 1.0, 65).unwrap();
        let a = assemble_operator(&make_benes(2, DVector::zeros(2)), &spec, 0.0).unwrap();
        let p0 = point_mass(&DVector::zeros(2), &spec).unwrap();
        assert!(matches!(evolve(&a, &p0, 1.0, Evolution::MatrixExp), Err(Error::Capacity(_))));
        assert!(matches!(evolve(&a, &p0, 100.0, Evolution::Rk4 { dt: 0.5 }), Err(Error::Divergence { .. })));
    }

    #[test]
    fn benes_grid_matches_closed_form() {
        let (z0, t): (f64, f64) = (0.5, 1.0);
        let spec = GridSpec::square(1, -7.5, 8.5, 321).unwrap();
        let model = make_benes(1, DVector::from_element(1, z0));
        let a = assemble_operator(&model, &spec, 0.0).unwrap();
        let p0 = point_mass(&DVector::from_element(1, z0), &spec).unwrap();
        let p = evolve(&a, &p0, t, Evolution::Rk4 { dt: 5e-4 }).unwrap();
        let g = grid_moments(&p).unwrap();
        let m = z0 + z0.tanh() * t;
        let var = t + t * t / z0.cosh().powi(2);
        assert!((g.mean[0] - m).abs() <= 0.01 * m);
        assert!((g.cov[(0, 0)] - var).abs() <= 0.01 * var);
    }
}
