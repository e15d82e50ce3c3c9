// SPDX-License-Identifier: Apache-2.0

//! Fixed-step explicit integrators for `dx/dt = g(t, x)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    #[default]
    #[serde(alias = "RK4")]
    Rk4,
}

/// Uniform grid on `[t0, t1]`; the final step is shortened to land on `t1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        let grid = Self { t0, t1, dt };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t1.is_finite()) || self.t1 <= self.t0 {
            return invalid(format!("bad time interval [{}, {}]", self.t0, self.t1));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return invalid(format!("step size must be positive, got {}", self.dt));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        let ratio = (self.t1 - self.t0) / self.dt;
        (ratio - 1e-9).ceil().max(0.0) as usize
    }

    /// All grid nodes including both endpoints.
    pub fn times(&self) -> Vec<f64> {
        let n = self.n_steps();
        let mut out: Vec<f64> = (0..n).map(|k| self.t0 + k as f64 * self.dt).collect();
        out.push(self.t1);
        out
    }
}

pub fn step_euler<G>(rhs: &mut G, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    G: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut out = x.clone();
    out.axpy(h, &rhs(t, x)?, 1.0);
    Ok(out)
}

pub fn step_rk4<G>(rhs: &mut G, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    G: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let shifted = |k: &DVector<f64>, a: f64| {
        let mut y = x.clone();
        y.axpy(a, k, 1.0);
        y
    };
    let k1 = rhs(t, x)?;
    let k2 = rhs(t + 0.5 * h, &shifted(&k1, 0.5 * h))?;
    let k3 = rhs(t + 0.5 * h, &shifted(&k2, 0.5 * h))?;
    let k4 = rhs(t + h, &shifted(&k3, h))?;
    let mut out = x.clone();
    out.axpy(h / 6.0, &k1, 1.0);
    out.axpy(h / 3.0, &k2, 1.0);
    out.axpy(h / 3.0, &k3, 1.0);
    out.axpy(h / 6.0, &k4, 1.0);
    Ok(out)
}

pub fn step<G>(method: Method, rhs: &mut G, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    G: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    match method {
        Method::Euler => step_euler(rhs, t, x, h),
        Method::Rk4 => step_rk4(rhs, t, x, h),
    }
}

/// Integrates over `grid`, calling `observer(k, t_k, &mut x_k)` after every
/// accepted step k = 1..=n. The observer may project the state in place.
/// Returns the final state.
pub fn integrate_with<G, O>(
    mut rhs: G,
    x0: DVector<f64>,
    grid: &TimeGrid,
    method: Method,
    mut observer: O,
) -> Result<DVector<f64>>
where
    G: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    O: FnMut(usize, f64, &mut DVector<f64>) -> Result<()>,
{
    grid.validate()?;
    let times = grid.times();
    let mut x = x0;
    for (k, w) in times.windows(2).enumerate() {
        x = step(method, &mut rhs, w[0], &x, w[1] - w[0])?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        observer(k + 1, w[1], &mut x)?;
    }
    Ok(x)
}

/// Integrates over `grid` and returns `(t, x)` at every node, endpoints included.
pub fn integrate<G, O>(
    rhs: G,
    x0: DVector<f64>,
    grid: &TimeGrid,
    method: Method,
    mut observer: O,
) -> Result<Vec<(f64, DVector<f64>)>>
where
    G: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    O: FnMut(usize, f64, &mut DVector<f64>) -> Result<()>,
{
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    out.push((grid.t0, x0.clone()));
    integrate_with(rhs, x0, grid, method, |k, t, x| {
        observer(k, t, x)?;
        out.push((t, x.clone()));
        Ok(())
    })?;
    Ok(out)
}
