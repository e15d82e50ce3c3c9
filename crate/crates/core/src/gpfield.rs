// SPDX-License-Identifier: Apache-2.0

//! Multi-output GP posterior over a velocity field, conditioned on derivative
//! observations `{(z_i, Δz_i)}`.
//!
//! The posterior defines a GP-SDE through its marginal mean (drift) and a
//! square root of its marginal covariance (diffusion). Only the weak,
//! distribution-level reading of that SDE is supported: strong solutions are
//! not guaranteed to exist, and the choice of square root changes individual
//! sample paths but not the propagated moments.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adf::{sqrt_psd, DEFAULT_JITTER};
use crate::error::{invalid, Error, Result};
use crate::kernels::{gram, KernelKind, KernelSpec};
use crate::linalg::{cholesky_lower, solve_lower, solve_lower_vec, symmetrize};
use crate::odeint::TimeGrid;

/// Jitter added to a new conditioning block when a sampled path revisits a point.
const PATH_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldObservations {
    inputs: Vec<DVector<f64>>,
    derivatives: Vec<DVector<f64>>,
}

impl VectorFieldObservations {
    pub fn new(inputs: Vec<DVector<f64>>, derivatives: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return invalid("need at least one observation");
        }
        if inputs.len() != derivatives.len() {
            return invalid(format!("{} inputs but {} derivatives", inputs.len(), derivatives.len()));
        }
        let d = inputs[0].len();
        if d == 0 {
            return invalid("observations must have positive dimension");
        }
        if inputs.iter().chain(derivatives.iter()).any(|v| v.len() != d) {
            return invalid("observations have inconsistent dimensions");
        }
        Ok(Self { inputs, derivatives })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn derivatives(&self) -> &[DVector<f64>] {
        &self.derivatives
    }

    /// Reads CSV with header `z_1..z_d, dz_1..dz_d`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() % 2 != 0 || headers.is_empty() {
            return invalid("observation CSV needs columns z_1..z_d, dz_1..dz_d");
        }
        let d = headers.len() / 2;
        for (i, h) in headers.iter().enumerate() {
            let expected = if i < d { format!("z_{}", i + 1) } else { format!("dz_{}", i - d + 1) };
            if h != expected {
                return invalid(format!("observation CSV column {i} is '{h}', expected '{expected}'"));
            }
        }
        let mut inputs = Vec::new();
        let mut derivatives = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("observation CSV row {}: {e}", row + 1)))?;
            inputs.push(DVector::from_column_slice(&vals[..d]));
            derivatives.push(DVector::from_column_slice(&vals[d..]));
        }
        Self::new(inputs, derivatives)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

/// Factorized GP posterior. Immutable after construction.
#[derive(Clone, Debug)]
pub struct PosteriorField {
    spec: KernelSpec,
    nugget: f64,
    inputs: Vec<DVector<f64>>,
    targets: DVector<f64>,
    gram_factor: DMatrix<f64>,
    dual_weights: DVector<f64>,
    prior_mean: DVector<f64>,
}

/// Conditions a zero-mean GP on `obs`.
pub fn fit(obs: &VectorFieldObservations, spec: KernelSpec, nugget: f64) -> Result<PosteriorField> {
    PosteriorField::fit(obs, spec, nugget, DVector::zeros(spec.dim))
}

impl PosteriorField {
    /// Conditions a GP with constant prior mean on `obs`.
    pub fn fit(obs: &VectorFieldObservations, spec: KernelSpec, nugget: f64, prior_mean: DVector<f64>) -> Result<Self> {
        if obs.dim() != spec.dim {
            return invalid(format!("observations have dimension {}, kernel expects {}", obs.dim(), spec.dim));
        }
        if prior_mean.len() != spec.dim {
            return invalid("prior mean has the wrong dimension");
        }
        let k = gram(&spec, obs.inputs(), nugget)?;
        let gram_factor = cholesky_lower(&k)?;
        let d = spec.dim;
        let mut targets = DVector::zeros(obs.len() * d);
        for (i, dz) in obs.derivatives().iter().enumerate() {
            for a in 0..d {
                targets[i * d + a] = dz[a] - prior_mean[a];
            }
        }
        let dual_weights = gram_factor
            .transpose()
            .solve_upper_triangular(&solve_lower_vec(&gram_factor, &targets))
            .expect("Cholesky factor has positive diagonal");
        Ok(Self { spec, nugget, inputs: obs.inputs().to_vec(), targets, gram_factor, dual_weights, prior_mean })
    }

    /// The unconditioned prior: mean `prior_mean`, covariance κ(z, z).
    pub fn prior(spec: KernelSpec, prior_mean: DVector<f64>) -> Self {
        assert_eq!(prior_mean.len(), spec.dim);
        Self {
            spec,
            nugget: 0.0,
            inputs: Vec::new(),
            targets: DVector::zeros(0),
            gram_factor: DMatrix::zeros(0, 0),
            dual_weights: DVector::zeros(0),
            prior_mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn gram_factor(&self) -> &DMatrix<f64> {
        &self.gram_factor
    }

    pub fn dual_weights(&self) -> &DVector<f64> {
        &self.dual_weights
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    fn check(&self, z: &DVector<f64>) {
        assert_eq!(z.len(), self.dim(), "query point has the wrong dimension");
    }

    /// d×(nd) cross-covariance `K_*` with block i = κ(z, z_i).
    pub fn cross_cov(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.check(z);
        cross_cov(&self.spec, &self.inputs, z)
    }

    pub fn posterior_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        self.check(z);
        if self.inputs.is_empty() {
            return self.prior_mean.clone();
        }
        &self.prior_mean + self.cross_cov(z) * &self.dual_weights
    }

    /// `κ(z, z) - K_* K̂⁻¹ K_*ᵀ`, symmetrized and projected onto the PSD cone.
    pub fn posterior_cov(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.check(z);
        let prior = self.spec.eval_offset(&vec![0.0; self.dim()]);
        if self.inputs.is_empty() {
            return prior;
        }
        let v = solve_lower(&self.gram_factor, &self.cross_cov(z).transpose());
        let mut cov = prior - v.transpose() * v;
        symmetrize(&mut cov);
        clamp_psd(cov)
    }

    pub fn drift_diffusion(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = self.posterior_mean(z);
        let l = sqrt_psd(&self.posterior_cov(z), DEFAULT_JITTER)?;
        Ok((f, l))
    }

    /// ∂ E[v(z)] / ∂z; analytic for the independent RBF kernel.
    pub fn mean_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.check(z);
        match self.spec.kind {
            KernelKind::IndependentRbf => self.rbf_mean_jacobian(z),
            _ => self.mean_jacobian_fd(z),
        }
    }

    fn rbf_mean_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let ell2 = self.spec.lengthscale().powi(2);
        let mut jac = DMatrix::zeros(d, d);
        let mut r = vec![0.0; d];
        for (i, zi) in self.inputs.iter().enumerate() {
            for (b, slot) in r.iter_mut().enumerate() {
                *slot = z[b] - zi[b];
            }
            let k = self.spec.rbf_scalar(&r);
            for a in 0..d {
                let alpha = self.dual_weights[i * d + a];
                for b in 0..d {
                    jac[(a, b)] -= k * r[b] / ell2 * alpha;
                }
            }
        }
        jac
    }

    /// Central differences with step `1e-5 · max(1, |z|)`.
    pub fn mean_jacobian_fd(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let h = 1e-5 * z.norm().max(1.0);
        let mut jac = DMatrix::zeros(d, d);
        let mut probe = z.clone();
        for j in 0..d {
            let orig = probe[j];
            probe[j] = orig + h;
            let fp = self.posterior_mean(&probe);
            probe[j] = orig - h;
            let fm = self.posterior_mean(&probe);
            probe[j] = orig;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        jac
    }

    /// Euler path through a single self-consistent draw of the random field.
    ///
    /// Each step samples v(z) from the posterior conditioned on the data and on
    /// every velocity already drawn along this path, then sets `z += v dt`.
    pub fn sample_path_field(
        &self,
        z0: &DVector<f64>,
        dt: f64,
        horizon: f64,
        seed: u64,
    ) -> Result<Vec<(f64, DVector<f64>)>> {
        self.check(z0);
        if !(dt > 0.0) || dt > horizon * (1.0 + 1e-12) {
            return invalid(format!("sample_path_field needs 0 < dt <= T (dt = {dt}, T = {horizon})"));
        }
        let grid = TimeGrid::new(0.0, horizon, dt)?;
        let times = grid.times();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cond = PathConditioner::new(self);
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(times.len());
        out.push((times[0], z.clone()));
        for w in times.windows(2) {
            let h = w[1] - w[0];
            let (mean, cov, cross) = cond.predict(&z);
            let root = sqrt_psd(&cov, DEFAULT_JITTER)?;
            let eps = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
            let v = mean + root * eps;
            cond.condition(&z, &v, &cov, cross)?;
            z += &v * h;
            out.push((w[1], z.clone()));
        }
        Ok(out)
    }
}

fn cross_cov(spec: &KernelSpec, inputs: &[DVector<f64>], z: &DVector<f64>) -> DMatrix<f64> {
    let d = spec.dim;
    let mut k = DMatrix::zeros(d, inputs.len() * d);
    let mut r = vec![0.0; d];
    for (i, zi) in inputs.iter().enumerate() {
        for (a, slot) in r.iter_mut().enumerate() {
            *slot = z[a] - zi[a];
        }
        k.view_mut((0, i * d), (d, d)).copy_from(&spec.eval_offset(&r));
    }
    k
}

fn clamp_psd(cov: DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    if d == 1 {
        return cov.map(|v| v.max(0.0));
    }
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return cov;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Growing Cholesky factor of the Gram matrix over data plus sampled path points.
struct PathConditioner<'a> {
    field: &'a PosteriorField,
    inputs: Vec<DVector<f64>>,
    factor: DMatrix<f64>,
    /// `L⁻¹ (y - μ)` over all conditioning values.
    whitened: DVector<f64>,
}

impl<'a> PathConditioner<'a> {
    fn new(field: &'a PosteriorField) -> Self {
        let whitened = if field.inputs.is_empty() {
            DVector::zeros(0)
        } else {
            solve_lower_vec(&field.gram_factor, &field.targets)
        };
        Self { field, inputs: field.inputs.clone(), factor: field.gram_factor.clone(), whitened }
    }

    /// Mean, covariance and whitened cross-covariance `L⁻¹ K_*ᵀ` at z.
    fn predict(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let spec = &self.field.spec;
        let prior = spec.eval_offset(&vec![0.0; spec.dim]);
        if self.inputs.is_empty() {
            return (self.field.prior_mean.clone(), prior, DMatrix::zeros(0, spec.dim));
        }
        let v = solve_lower(&self.factor, &cross_cov(spec, &self.inputs, z).transpose());
        let mean = &self.field.prior_mean + v.transpose() * &self.whitened;
        let mut cov = prior - v.transpose() * &v;
        symmetrize(&mut cov);
        (mean, clamp_psd(cov), v)
    }

    fn condition(
        &mut self,
        z: &DVector<f64>,
        value: &DVector<f64>,
        cov: &DMatrix<f64>,
        cross: DMatrix<f64>,
    ) -> Result<()> {
        let d = self.field.dim();
        let n = self.factor.nrows();
        let mut schur = cov.clone();
        for i in 0..d {
            schur[(i, i)] += self.field.nugget;
        }
        let block = match cholesky_lower(&schur) {
            Ok(c) => c,
            Err(_) => {
                for i in 0..d {
                    schur[(i, i)] += PATH_JITTER;
                }
                cholesky_lower(&schur)?
            }
        };
        let mut factor = DMatrix::zeros(n + d, n + d);
        factor.view_mut((0, 0), (n, n)).copy_from(&self.factor);
        factor.view_mut((n, 0), (d, n)).copy_from(&cross.transpose());
        factor.view_mut((n, n), (d, d)).copy_from(&block);

        let resid = value - &self.field.prior_mean - cross.transpose() * &self.whitened;
        let w_new = solve_lower_vec(&block, &resid);
        let mut whitened = DVector::zeros(n + d);
        whitened.rows_mut(0, n).copy_from(&self.whitened);
        whitened.rows_mut(n, d).copy_from(&w_new);

        self.factor = factor;
        self.whitened = whitened;
        self.inputs.push(z.clone());
        Ok(())
    }
}
