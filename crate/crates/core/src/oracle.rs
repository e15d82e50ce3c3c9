// SPDX-License-Identifier: Apache-2.0

//! Closed-form Beneš reference, Gaussian KL divergence and the search for the
//! ensemble size whose EM moments are as accurate as a given moment scheme.

use nalgebra::{DMatrix, DVector};

use crate::adf::{MomentState, MomentTrajectory};
use crate::emsim::{simulate_moments_at, EnsembleMoments, InitialCondition};
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, is_diagonal, solve_lower, solve_lower_vec};
use crate::odeint::TimeGrid;
use crate::par::{map_indexed, Execution};
use crate::sdemodel::{make_benes, BenesModel, SdeModel};

/// Transition density of `dz = tanh(z) dt + dβ` started at `z0`.
pub fn benes_density(z: f64, t: f64, z0: f64) -> f64 {
    let gauss = (-(z - z0).powi(2) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    // cosh(z)/cosh(z0) e^{-t/2}, written to avoid overflow for large |z|
    let ratio =
        ((z.abs() - z0.abs()) + (1.0 + (-2.0 * z.abs()).exp()).ln() - (1.0 + (-2.0 * z0.abs()).exp()).ln()).exp();
    ratio * (-t / 2.0).exp() * gauss
}

/// Mean and variance of the scalar Beneš process at time `t`.
pub fn benes_moments(t: f64, z0: f64) -> (f64, f64) {
    let m = z0 + z0.tanh() * t;
    let second = z0 * z0 + 2.0 * z0 * z0.tanh() * t + t + t * t;
    (m, second - m * m)
}

/// d independent Beneš processes with per-dimension starting points.
#[derive(Clone, Debug, PartialEq)]
pub struct BenesSpec {
    pub z0: DVector<f64>,
}

impl BenesSpec {
    pub fn new(z0: DVector<f64>) -> Self {
        Self { z0 }
    }

    /// Starting points `z0_i = i/d`, i = 0..d-1, evenly spread over [0, 1).
    pub fn linspaced(d: usize) -> Self {
        Self::new(DVector::from_fn(d, |i, _| i as f64 / d as f64))
    }

    pub fn dim(&self) -> usize {
        self.z0.len()
    }

    pub fn model(&self) -> BenesModel {
        make_benes(self.dim(), self.z0.clone())
    }

    pub fn initial(&self) -> InitialCondition {
        InitialCondition::Point(self.z0.clone())
    }

    /// Exact moments at time `t` (diagonal covariance).
    pub fn moments(&self, t: f64) -> MomentState {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut var = DVector::zeros(d);
        for i in 0..d {
            let (m, p) = benes_moments(t, self.z0[i]);
            mean[i] = m;
            var[i] = p;
        }
        MomentState { mean, cov: DMatrix::from_diagonal(&var) }
    }
}

/// `KL(N(m1, P1) ‖ N(m2, P2))`.
///
/// A singular `P1` gives `+∞` (the limit of the formula); a singular `P2` is
/// an error.
pub fn gauss_kl(m1: &DVector<f64>, p1: &DMatrix<f64>, m2: &DVector<f64>, p2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || p1.shape() != (d, d) || p2.shape() != (d, d) {
        return invalid("KL arguments have inconsistent dimensions");
    }
    if m1 == m2 && p1 == p2 && p1.iter().all(|v| v.is_finite()) {
        // the general formula leaves rounding residue in tr(I) - d
        return match cholesky_lower(p1) {
            Ok(_) => Ok(0.0),
            Err(_) => invalid("second covariance of the KL divergence is singular"),
        };
    }
    let delta = m2 - m1;
    let l1 = match cholesky_lower(p1) {
        Ok(l) => l,
        Err(_) => return Ok(f64::INFINITY),
    };
    let logdet1: f64 = 2.0 * l1.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let (trace, maha, logdet2) = if is_diagonal(p2) {
        let diag = p2.diagonal();
        if diag.iter().any(|v| !(*v > 0.0)) {
            return invalid("second covariance of the KL divergence is singular");
        }
        let trace: f64 = (0..d).map(|i| p1[(i, i)] / diag[i]).sum();
        let maha: f64 = (0..d).map(|i| delta[i] * delta[i] / diag[i]).sum();
        (trace, maha, diag.iter().map(|v| v.ln()).sum::<f64>())
    } else {
        let l2 = cholesky_lower(p2)
            .map_err(|_| Error::InvalidArgument("second covariance of the KL divergence is singular".into()))?;
        let trace = solve_lower(&l2, &l1).norm_squared();
        let maha = solve_lower_vec(&l2, &delta).norm_squared();
        (trace, maha, 2.0 * l2.diagonal().iter().map(|v| v.ln()).sum::<f64>())
    };
    Ok((0.5 * (trace + maha - d as f64 + logdet2 - logdet1)).max(0.0))
}

pub fn gauss_kl_states(a: &MomentState, b: &MomentState) -> Result<f64> {
    gauss_kl(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// A sequence of Gaussian moments indexed by time.
pub trait MomentSeries {
    fn series_times(&self) -> &[f64];
    fn series_states(&self) -> &[MomentState];

    /// State at the series time within `1e-9 · max(1, |t|)` of `t`.
    fn at_time(&self, t: f64) -> Option<&MomentState> {
        let times = self.series_times();
        let tol = 1e-9 * t.abs().max(1.0);
        let i = times.partition_point(|&s| s < t - tol);
        (i < times.len() && (times[i] - t).abs() <= tol).then(|| &self.series_states()[i])
    }
}

impl MomentSeries for MomentTrajectory {
    fn series_times(&self) -> &[f64] {
        &self.times
    }

    fn series_states(&self) -> &[MomentState] {
        &self.states
    }
}

impl MomentSeries for EnsembleMoments {
    fn series_times(&self) -> &[f64] {
        &self.times
    }

    fn series_states(&self) -> &[MomentState] {
        &self.states
    }
}

/// `Σ_t KL(approx(t) ‖ truth(t))` over `times`.
pub fn total_kl<S, F>(approx: &S, truth: F, times: &[f64]) -> Result<f64>
where
    S: MomentSeries + ?Sized,
    F: Fn(f64) -> MomentState,
{
    let mut total = 0.0;
    for &t in times {
        let a = approx.at_time(t).ok_or_else(|| Error::InvalidArgument(format!("no approximation at t = {t}")))?;
        total += gauss_kl_states(a, &truth(t))?;
    }
    Ok(total)
}

/// Evaluation times `0.1, 0.2, …, 10` scaled to a horizon: `k · horizon / count`.
pub fn evaluation_times(horizon: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|k| k as f64 * horizon / count as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    /// One EM ensemble per seed; the KL is averaged over them.
    pub seeds: Vec<u64>,
    /// Largest ensemble size tried.
    pub cap: usize,
    pub exec: Execution,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { seeds: (0..10).collect(), cap: 1_000_000, exec: Execution::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub n: usize,
    pub kl_mean: f64,
    /// Sample standard deviation over repeats.
    pub kl_std: f64,
    pub kl_repeats: Vec<f64>,
    /// Every ensemble size evaluated, with its mean KL, in search order.
    pub trials: Vec<(usize, f64)>,
}

/// Smallest ensemble size n whose mean total KL over the seeds is at most `target_kl`.
///
/// Doubles from n = 4 until the target is met, then bisects between the last
/// failing and the first passing size.
pub fn match_trajectories<M, F>(
    model: &M,
    init: &InitialCondition,
    truth: F,
    grid: &TimeGrid,
    times: &[f64],
    target_kl: f64,
    config: &MatchConfig,
) -> Result<MatchResult>
where
    M: SdeModel + ?Sized,
    F: Fn(f64) -> MomentState + Sync,
{
    if !(target_kl > 0.0) {
        return invalid("target KL must be positive");
    }
    if config.seeds.is_empty() {
        return invalid("need at least one repeat");
    }
    let grid_times = grid.times();
    let tol = |t: f64| 1e-9 * t.abs().max(1.0);
    let indices: Vec<usize> = times
        .iter()
        .map(|&t| {
            grid_times
                .iter()
                .position(|&s| (s - t).abs() <= tol(t))
                .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a grid time")))
        })
        .collect::<Result<_>>()?;
    let truths: Vec<MomentState> = times.iter().map(|&t| truth(t)).collect();

    let evaluate = |n: usize| -> Result<Vec<f64>> {
        let runs = map_indexed(config.exec, config.seeds.len(), |r| -> Result<f64> {
            let em = simulate_moments_at(model, init, n, grid, config.seeds[r], Execution::Sequential, &indices)?;
            em.states.iter().zip(&truths).map(|(a, b)| gauss_kl_states(a, b)).sum::<Result<f64>>()
        });
        runs.into_iter().collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut trials = Vec::new();
    let mut lo = 0;
    let mut n = 4.min(config.cap).max(2);
    let (mut hi, mut hi_kls) = loop {
        let kls = evaluate(n)?;
        let m = mean(&kls);
        trials.push((n, m));
        if m <= target_kl {
            break (n, kls);
        }
        if n >= config.cap {
            let best_kl = trials.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
            return Err(Error::TrajectoryCap { cap: config.cap, best_kl });
        }
        lo = n;
        n = (2 * n).min(config.cap);
    };
    while hi - lo > 1 && lo > 0 {
        let mid = lo + (hi - lo) / 2;
        let kls = evaluate(mid)?;
        let m = mean(&kls);
        trials.push((mid, m));
        if m <= target_kl {
            hi = mid;
            hi_kls = kls;
        } else {
            lo = mid;
        }
    }
    let kl_mean = mean(&hi_kls);
    let kl_std = if hi_kls.len() > 1 {
        (hi_kls.iter().map(|k| (k - kl_mean).powi(2)).sum::<f64>() / (hi_kls.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MatchResult { n: hi, kl_mean, kl_std, kl_repeats: hi_kls, trials })
}
