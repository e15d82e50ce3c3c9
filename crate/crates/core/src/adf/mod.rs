// SPDX-License-Identifier: Apache-2.0

//! Assumed-density Gaussian propagation of the state mean `m` and covariance `P`.
//!
//! Two right-hand sides are provided: a Taylor linearization around the mean
//! and quadrature moment matching through sigma points `m + √P ξ_i`. Either
//! is integrated as one flat ODE of size d + d².

use std::ops::{Add, AddAssign};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{check_psd, for_each_lower_pair, max_asymmetry, mul_sparse_left, symmetrize_slice};
use crate::odeint::{integrate_with, Method, TimeGrid};
use crate::sdemodel::{fd_jacobian, SdeModel};

pub mod rules;
pub mod sqrt;

pub use rules::{cubature_rule, gauss_hermite_1d, gauss_hermite_rule, QuadratureRule, MAX_GAUSS_HERMITE_POINTS};
pub use sqrt::{sqrt_psd, DEFAULT_JITTER};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
/// Most negative eigenvalue tolerated along a propagated trajectory.
const STABILITY_TOL: f64 = 1e-6;

/// Gaussian summary `N(mean, cov)` of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return invalid("moment state needs positive dimension");
        }
        if cov.nrows() != d || cov.ncols() != d {
            return invalid(format!("covariance is {}x{}, expected {d}x{d}", cov.nrows(), cov.ncols()));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return invalid("moment state has non-finite entries");
        }
        let asym = max_asymmetry(&cov);
        if asym > SYMMETRY_TOL {
            return invalid(format!("covariance is not symmetric (max asymmetry {asym:e})"));
        }
        if let Err(min) = check_psd(&cov, PSD_TOL) {
            return invalid(format!("covariance is not PSD (min eigenvalue {min:e})"));
        }
        Ok(Self { mean, cov })
    }

    /// Dirac initial condition: `P = 0`.
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self { mean, cov: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `[m; vec(P)]` with P stored column-major.
    pub fn flatten(&self) -> DVector<f64> {
        let d = self.dim();
        let mut x = DVector::zeros(d + d * d);
        x.rows_mut(0, d).copy_from(&self.mean);
        x.rows_mut(d, d * d).copy_from_slice(self.cov.as_slice());
        x
    }

    fn unflatten(d: usize, x: &DVector<f64>) -> Self {
        Self { mean: x.rows(0, d).into_owned(), cov: DMatrix::from_column_slice(d, d, &x.as_slice()[d..]) }
    }
}

/// Number of model evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub drift: u64,
    pub diffusion: u64,
    pub jacobian: u64,
}

impl Add for EvalCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            drift: self.drift + o.drift,
            diffusion: self.diffusion + o.diffusion,
            jacobian: self.jacobian + o.jacobian,
        }
    }
}

impl AddAssign for EvalCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// How the linearized scheme obtains the drift Jacobian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Require the model's analytic Jacobian.
    #[default]
    Analytic,
    /// Use the analytic Jacobian when present, else central differences.
    /// A difference Jacobian also costs 2d drift evaluations.
    FiniteDifferenceFallback,
}

/// Time derivative of the moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentRhs {
    pub dm: DVector<f64>,
    pub dp: DMatrix<f64>,
    pub counts: EvalCounts,
}

/// `dm = f(m)`, `dP = P Fᵀ + F P + L Q Lᵀ` with `F = ∂f/∂z (m)`.
pub fn linearized_rhs<M: SdeModel + ?Sized>(
    model: &M,
    state: &MomentState,
    t: f64,
    mode: JacobianMode,
) -> Result<MomentRhs> {
    let d = state.dim();
    let mut counts = EvalCounts { drift: 1, diffusion: 1, jacobian: 1 };
    let dm = model.drift(&state.mean, t);
    let jac = match (model.jacobian(&state.mean, t), mode) {
        (Some(j), _) => j,
        (None, JacobianMode::FiniteDifferenceFallback) => {
            counts.drift += 2 * d as u64;
            fd_jacobian(model, &state.mean, t)
        }
        (None, JacobianMode::Analytic) => {
            return invalid("model has no analytic Jacobian; enable the finite-difference fallback");
        }
    };
    let fp = mul_sparse_left(&jac, &state.cov);
    let mut dp = &fp + fp.transpose();
    model.add_diffusion_cov(&state.mean, t, 1.0, &mut dp);
    Ok(MomentRhs { dm, dp, counts })
}

/// Quadrature moment matching with sigma points `m + S ξ_i`, `S Sᵀ = P`.
///
/// `dm = Σ w f(z_i)`, `dP = Σ w f(z_i)(S ξ_i)ᵀ + Σ w (S ξ_i) f(z_i)ᵀ + Σ w L Q Lᵀ(z_i)`.
pub fn matched_rhs<M: SdeModel + ?Sized>(
    model: &M,
    state: &MomentState,
    t: f64,
    rule: &QuadratureRule,
) -> Result<MomentRhs> {
    let d = state.dim();
    if rule.dim() != d {
        return invalid(format!("quadrature rule has dimension {}, state has {d}", rule.dim()));
    }
    let root = sqrt_psd(&state.cov, DEFAULT_JITTER)?;
    let root_cols = column_nonzeros(&root);
    let n = rule.len();
    let mut dm = DVector::zeros(d);
    // Accumulates A = Σ w f oᵀ + ½ Σ w L Q Lᵀ; then dP = A + Aᵀ.
    let mut dp = DMatrix::zeros(d, d);
    let mut z = DVector::zeros(d);
    let mut f = DVector::zeros(d);
    let mut offset = vec![0.0; d];
    let mut touched: Vec<usize> = Vec::with_capacity(d);
    let mut marked = vec![false; d];
    for i in 0..n {
        let w = rule.weights[i];
        for (k, xi) in rule.points.as_slice()[i * d..(i + 1) * d].iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for &(r, s) in &root_cols[k] {
                if !marked[r] {
                    marked[r] = true;
                    touched.push(r);
                }
                offset[r] += s * xi;
            }
        }
        z.copy_from(&state.mean);
        for &r in &touched {
            z[r] += offset[r];
        }
        model.drift_into(&z, t, &mut f);
        dm.axpy(w, &f, 1.0);
        for &r in &touched {
            dp.column_mut(r).axpy(w * offset[r], &f, 1.0);
            offset[r] = 0.0;
            marked[r] = false;
        }
        touched.clear();
        model.add_diffusion_cov(&z, t, 0.5 * w, &mut dp);
    }
    add_transpose(&mut dp);
    Ok(MomentRhs { dm, dp, counts: EvalCounts { drift: n as u64, diffusion: n as u64, jacobian: 0 } })
}

/// `a ← a + aᵀ`, exactly symmetric.
fn add_transpose(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    let v = a.as_mut_slice();
    for j in 0..n {
        v[j + j * n] *= 2.0;
    }
    for_each_lower_pair(n, |lo, up| {
        let s = v[lo] + v[up];
        v[lo] = s;
        v[up] = s;
    });
}

/// Row indices and values of the nonzeros in each column.
fn column_nonzeros(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    m.as_slice()
        .chunks(m.nrows().max(1))
        .map(|c| c.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(r, v)| (r, *v)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scheme {
    Linearized(JacobianMode),
    Matched(QuadratureRule),
}

impl Scheme {
    pub fn rhs<M: SdeModel + ?Sized>(&self, model: &M, state: &MomentState, t: f64) -> Result<MomentRhs> {
        match self {
            Scheme::Linearized(mode) => linearized_rhs(model, state, t, *mode),
            Scheme::Matched(rule) => matched_rhs(model, state, t, rule),
        }
    }
}

/// Moments at every grid time, with the model evaluations spent on each step
/// (entry 0, the initial state, costs nothing).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
    pub eval_counts: Vec<EvalCounts>,
}

impl MomentTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn total_counts(&self) -> EvalCounts {
        self.eval_counts.iter().fold(EvalCounts::default(), |a, b| a + *b)
    }

    pub fn last(&self) -> &MomentState {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Integrates the moment ODE of `scheme` from `init` over `grid`.
pub fn propagate<M: SdeModel + ?Sized>(
    model: &M,
    init: &MomentState,
    grid: &TimeGrid,
    scheme: &Scheme,
    method: Method,
) -> Result<MomentTrajectory> {
    let d = init.dim();
    if model.dim() != d {
        return invalid(format!("model has dimension {}, initial state has {d}", model.dim()));
    }
    let n = grid.n_steps();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut eval_counts = Vec::with_capacity(n + 1);
    times.push(grid.t0);
    states.push(init.clone());
    eval_counts.push(EvalCounts::default());

    let spent = std::cell::Cell::new(EvalCounts::default());
    let rhs = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let state = MomentState::unflatten(d, x);
        let r = scheme.rhs(model, &state, t)?;
        spent.set(spent.get() + r.counts);
        let mut dx = DVector::zeros(d + d * d);
        dx.rows_mut(0, d).copy_from(&r.dm);
        dx.rows_mut(d, d * d).copy_from_slice(r.dp.as_slice());
        Ok(dx)
    };
    let mut last = EvalCounts::default();
    integrate_with(rhs, init.flatten(), grid, method, |_, t, x| {
        symmetrize_slice(d, &mut x.as_mut_slice()[d..]);
        let state = MomentState::unflatten(d, x);
        if let Err(min_eigenvalue) = check_psd(&state.cov, STABILITY_TOL) {
            return Err(Error::Stability { t, min_eigenvalue });
        }
        let total = spent.get();
        eval_counts.push(EvalCounts {
            drift: total.drift - last.drift,
            diffusion: total.diffusion - last.diffusion,
            jacobian: total.jacobian - last.jacobian,
        });
        last = total;
        times.push(t);
        states.push(state);
        Ok(())
    })?;
    Ok(MomentTrajectory { times, states, eval_counts })
}
