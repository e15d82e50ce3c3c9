// SPDX-License-Identifier: Apache-2.0

//! Euler–Maruyama ensembles and their empirical moments.
//!
//! Path `i` draws its noise from a ChaCha8 stream selected by `(seed, i)`, so
//! any path can be regenerated independently and results do not depend on
//! scheduling or thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adf::{sqrt_psd, EvalCounts, MomentState, DEFAULT_JITTER};
use crate::error::{invalid, Error, Result};
use crate::odeint::TimeGrid;
use crate::par::{for_each_chunk_mut, map_indexed, worker_count, Execution};
use crate::sdemodel::SdeModel;

/// Paths per block in the streaming moment reduction.
const BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    /// Every path starts at the same point.
    Point(DVector<f64>),
    /// Each path starts from its own draw of `N(m0, P0)`.
    Gaussian(MomentState),
}

impl InitialCondition {
    pub fn dim(&self) -> usize {
        match self {
            InitialCondition::Point(z) => z.len(),
            InitialCondition::Gaussian(s) => s.dim(),
        }
    }

    /// The initial condition as a Gaussian (`P0 = 0` for a point).
    pub fn moments(&self) -> MomentState {
        match self {
            InitialCondition::Point(z) => MomentState::point(z.clone()),
            InitialCondition::Gaussian(s) => s.clone(),
        }
    }
}

/// Noise stream for one path.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// `z + f(z, t) dt + L(z, t) √dt √Q ε`.
pub fn em_step<M: SdeModel + ?Sized>(
    model: &M,
    z: &DVector<f64>,
    t: f64,
    dt: f64,
    noise: &DVector<f64>,
) -> DVector<f64> {
    z + model.drift(z, t) * dt + model.diffuse(z, t, noise) * dt.sqrt()
}

/// All paths at every grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub seed: u64,
    n: usize,
    dim: usize,
    /// Path-major: `data[(i * times.len() + k) * dim + a]`.
    data: Vec<f64>,
}

impl Ensemble {
    pub fn n_paths(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, path: usize, time_index: usize) -> &[f64] {
        let off = (path * self.times.len() + time_index) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// (steps+1)×d matrix of one path.
    pub fn path(&self, path: usize) -> DMatrix<f64> {
        let len = self.times.len() * self.dim;
        let slice = &self.data[path * len..(path + 1) * len];
        DMatrix::from_row_slice(self.times.len(), self.dim, slice)
    }

    /// Model evaluations used to generate the ensemble, per time step.
    pub fn step_counts(&self) -> EvalCounts {
        EvalCounts { drift: self.n as u64, diffusion: self.n as u64, jacobian: 0 }
    }
}

struct PathRunner<'a, M: ?Sized> {
    model: &'a M,
    times: Vec<f64>,
    seed: u64,
    init_mean: DVector<f64>,
    init_root: Option<DMatrix<f64>>,
}

impl<'a, M: SdeModel + ?Sized> PathRunner<'a, M> {
    fn new(model: &'a M, init: &InitialCondition, grid: &TimeGrid, seed: u64) -> Result<Self> {
        grid.validate()?;
        if init.dim() != model.dim() {
            return invalid(format!("initial condition has dimension {}, model has {}", init.dim(), model.dim()));
        }
        let (init_mean, init_root) = match init {
            InitialCondition::Point(z) => (z.clone(), None),
            InitialCondition::Gaussian(s) => (s.mean.clone(), Some(sqrt_psd(&s.cov, DEFAULT_JITTER)?)),
        };
        Ok(Self { model, times: grid.times(), seed, init_mean, init_root })
    }

    /// Runs path `index`, passing the state at every grid node to `sink`.
    fn run<S: FnMut(usize, &DVector<f64>)>(&self, index: usize, mut sink: S) -> Result<()> {
        let d = self.model.dim();
        let q = self.model.noise_dim();
        let mut rng = path_rng(self.seed, index);
        let mut z = self.init_mean.clone();
        if let Some(root) = &self.init_root {
            let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            z.gemv(1.0, root, &eps, 1.0);
        }
        sink(0, &z);
        let mut f = DVector::zeros(d);
        let mut g = DVector::zeros(d);
        let mut noise = DVector::zeros(q);
        for (k, w) in self.times.windows(2).enumerate() {
            let (t, dt) = (w[0], w[1] - w[0]);
            for e in noise.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            self.model.drift_into(&z, t, &mut f);
            self.model.diffuse_into(&z, t, &noise, &mut g);
            z.axpy(dt, &f, 1.0);
            z.axpy(dt.sqrt(), &g, 1.0);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::PathDivergence { path: index, step: k + 1 });
            }
            sink(k + 1, &z);
        }
        Ok(())
    }
}

pub fn simulate<M: SdeModel + ?Sized>(
    model: &M,
    init: &InitialCondition,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<Ensemble> {
    simulate_with(model, init, n, grid, seed, Execution::default())
}

/// Simulates `n` paths and keeps them all.
pub fn simulate_with<M: SdeModel + ?Sized>(
    model: &M,
    init: &InitialCondition,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    exec: Execution,
) -> Result<Ensemble> {
    if n == 0 {
        return invalid("need at least one path");
    }
    let runner = PathRunner::new(model, init, grid, seed)?;
    let d = model.dim();
    let len = runner.times.len() * d;
    let mut data = vec![0.0; n * len];
    let mut status: Vec<Result<()>> = (0..n).map(|_| Ok(())).collect();
    // pair each path's buffer with its status slot so one chunked pass fills both
    let mut slots: Vec<(&mut [f64], &mut Result<()>)> = data.chunks_mut(len).zip(status.iter_mut()).collect();
    for_each_chunk_mut(exec, &mut slots, 1, |i, slot| {
        let (buf, res) = &mut slot[0];
        **res = runner.run(i, |k, z| buf[k * d..(k + 1) * d].copy_from_slice(z.as_slice()));
    });
    drop(slots);
    status.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(Ensemble { times: runner.times, seed, n, dim: d, data })
}

/// Sample mean and unbiased sample covariance across paths at one time.
pub fn empirical_moments(ensemble: &Ensemble, time_index: usize) -> Result<MomentState> {
    if ensemble.n < 2 {
        return invalid("empirical covariance needs at least two paths");
    }
    if time_index >= ensemble.times.len() {
        return invalid(format!("time index {time_index} out of range"));
    }
    let d = ensemble.dim;
    let x = DMatrix::from_fn(d, ensemble.n, |a, i| ensemble.state(i, time_index)[a]);
    Ok(Moments::from_columns(&x).finish())
}

/// Running mean and scatter matrix, merged with Chan's pairwise update.
#[derive(Clone, Debug)]
struct Moments {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Moments {
    fn from_columns(x: &DMatrix<f64>) -> Self {
        let n = x.ncols();
        let mean = x.column_mean();
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let scatter = &centered * centered.transpose();
        Self { n, mean, scatter }
    }

    fn merge(&mut self, other: &Moments) {
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        self.mean.axpy(nb / n as f64, &delta, 1.0);
        self.scatter += &other.scatter;
        self.scatter.ger(na * nb / n as f64, &delta, &delta, 1.0);
        self.n = n;
    }

    fn finish(self) -> MomentState {
        let mut cov = self.scatter / (self.n as f64 - 1.0);
        crate::linalg::symmetrize(&mut cov);
        MomentState { mean: self.mean, cov }
    }
}

/// Empirical moments of an ensemble that was never stored in full.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMoments {
    pub n_paths: usize,
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
    /// Model evaluations per time step (the same for every step).
    pub step_counts: EvalCounts,
}

/// Empirical moments at every grid time.
pub fn simulate_moments<M: SdeModel + ?Sized>(
    model: &M,
    init: &InitialCondition,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleMoments> {
    let all: Vec<usize> = (0..=grid.n_steps()).collect();
    simulate_moments_at(model, init, n, grid, seed, exec, &all)
}

/// Empirical moments at the grid nodes listed in `time_indices`.
///
/// Paths are processed in fixed blocks whose partial moments are merged in
/// block order, so the result is bit-identical for any thread count.
pub fn simulate_moments_at<M: SdeModel + ?Sized>(
    model: &M,
    init: &InitialCondition,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    exec: Execution,
    time_indices: &[usize],
) -> Result<EnsembleMoments> {
    if n < 2 {
        return invalid("empirical covariance needs at least two paths");
    }
    let runner = PathRunner::new(model, init, grid, seed)?;
    let n_times = runner.times.len();
    if let Some(&bad) = time_indices.iter().find(|&&k| k >= n_times) {
        return invalid(format!("time index {bad} out of range"));
    }
    // grid node -> slot in the recorded output
    let mut slot = vec![usize::MAX; n_times];
    for (j, &k) in time_indices.iter().enumerate() {
        slot[k] = j;
    }
    let d = model.dim();
    let n_rec = time_indices.len();
    let n_blocks = n.div_ceil(BLOCK);
    let wave = worker_count(exec).max(1);

    let block_moments = |b: usize| -> Result<Vec<Moments>> {
        let start = b * BLOCK;
        let size = BLOCK.min(n - start);
        // recorded time j, path p: column (j * size + p)
        let mut buf = DMatrix::zeros(d, n_rec * size);
        for p in 0..size {
            runner.run(start + p, |k, z| {
                let j = slot[k];
                if j != usize::MAX {
                    buf.column_mut(j * size + p).copy_from(z);
                }
            })?;
        }
        Ok((0..n_rec).map(|j| Moments::from_columns(&buf.columns(j * size, size).into_owned())).collect())
    };

    let mut acc: Option<Vec<Moments>> = None;
    let mut next = 0;
    while next < n_blocks {
        let count = wave.min(n_blocks - next);
        let results = map_indexed(exec, count, |i| block_moments(next + i));
        for r in results {
            let r = r?;
            match acc.as_mut() {
                None => acc = Some(r),
                Some(a) => a.iter_mut().zip(r.iter()).for_each(|(x, y)| x.merge(y)),
            }
        }
        next += count;
    }
    let states = acc.map(|a| a.into_iter().map(Moments::finish).collect()).unwrap_or_default();
    Ok(EnsembleMoments {
        n_paths: n,
        times: time_indices.iter().map(|&k| runner.times[k]).collect(),
        states,
        step_counts: EvalCounts { drift: n as u64, diffusion: n as u64, jacobian: 0 },
    })
}
