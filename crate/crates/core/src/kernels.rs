// SPDX-License-Identifier: Apache-2.0

//! Matrix-valued covariance functions for multi-output GP vector fields.
//!
//! All kernels are stationary and built from the squared-exponential profile
//! `exp(-|z - z'|² / 2ℓ²)`. The curl-free kernel is the negated Hessian of a
//! scalar RBF and the divergence-free kernel is `(∇∇ᵀ - ∇²I)` applied to it, so
//! every column is respectively a gradient field or a solenoidal field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[serde(alias = "IndependentRBF", alias = "rbf")]
    IndependentRbf,
    #[serde(alias = "CurlFree")]
    CurlFree,
    #[serde(alias = "DivergenceFree")]
    DivergenceFree,
}

/// Lengthscale ℓ (latent units) and signal variance σ², shared by all outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return invalid(format!("lengthscale must be positive, got {lengthscale}"));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return invalid(format!("variance must be positive, got {variance}"));
        }
        Ok(Self { lengthscale, variance })
    }
}

#[derive(Deserialize)]
struct RawKernelSpec {
    kind: KernelKind,
    dim: usize,
    lengthscale: f64,
    variance: f64,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.kind, raw.dim, KernelHyperparams::new(raw.lengthscale, raw.variance)?)
    }
}

/// A d-output kernel. Serialized with flat keys `kind, dim, lengthscale, variance`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec")]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub dim: usize,
    #[serde(flatten)]
    pub hyperparams: KernelHyperparams,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, dim: usize, hyperparams: KernelHyperparams) -> Result<Self> {
        if dim == 0 {
            return invalid("kernel dimension must be positive");
        }
        if kind != KernelKind::IndependentRbf && dim < 2 {
            return invalid(format!("{kind:?} kernel needs dim >= 2, got {dim}"));
        }
        Ok(Self { kind, dim, hyperparams })
    }

    pub fn lengthscale(&self) -> f64 {
        self.hyperparams.lengthscale
    }

    pub fn variance(&self) -> f64 {
        self.hyperparams.variance
    }

    /// κ as a function of the offset `r = z - z'`. No dimension checks.
    pub(crate) fn eval_offset(&self, r: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let ell = self.lengthscale();
        let sq: f64 = r.iter().map(|x| x * x).sum::<f64>() / (ell * ell);
        let envelope = (-0.5 * sq).exp();
        match self.kind {
            KernelKind::IndependentRbf => DMatrix::identity(d, d) * (self.variance() * envelope),
            KernelKind::CurlFree => {
                let scale = self.variance() / (ell * ell) * envelope;
                DMatrix::from_fn(d, d, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    scale * (delta - r[i] * r[j] / (ell * ell))
                })
            }
            KernelKind::DivergenceFree => {
                let scale = self.variance() / (ell * ell) * envelope;
                let diag = (d as f64 - 1.0) - sq;
                DMatrix::from_fn(d, d, |i, j| {
                    let delta = if i == j { diag } else { 0.0 };
                    scale * (r[i] * r[j] / (ell * ell) + delta)
                })
            }
        }
    }

    /// Scalar RBF envelope `σ² exp(-|r|²/2ℓ²)`; only meaningful for the independent kernel.
    pub(crate) fn rbf_scalar(&self, r: &[f64]) -> f64 {
        let ell = self.lengthscale();
        let sq: f64 = r.iter().map(|x| x * x).sum::<f64>() / (ell * ell);
        self.variance() * (-0.5 * sq).exp()
    }

    fn check_point(&self, z: &DVector<f64>, what: &str) -> Result<()> {
        if z.len() != self.dim {
            return invalid(format!("{what} has dimension {}, kernel expects {}", z.len(), self.dim));
        }
        Ok(())
    }
}

/// Evaluates the d×d block κ(z, z').
pub fn eval_kernel(spec: &KernelSpec, z: &DVector<f64>, zp: &DVector<f64>) -> Result<DMatrix<f64>> {
    spec.check_point(z, "z")?;
    spec.check_point(zp, "z'")?;
    let r: Vec<f64> = z.iter().zip(zp.iter()).map(|(a, b)| a - b).collect();
    Ok(spec.eval_offset(&r))
}

/// Stacked Gram matrix `K + γI` with block (i, j) = κ(z_i, z_j).
///
/// Rows are ordered point-major: entry `i*d + a` is output `a` at point `i`.
pub fn gram(spec: &KernelSpec, points: &[DVector<f64>], nugget: f64) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return invalid("gram needs at least one point");
    }
    if !(nugget >= 0.0) {
        return invalid(format!("nugget must be non-negative, got {nugget}"));
    }
    for p in points {
        spec.check_point(p, "gram point")?;
    }
    let d = spec.dim;
    let n = points.len();
    let mut k = DMatrix::zeros(n * d, n * d);
    let mut r = vec![0.0; d];
    for i in 0..n {
        for j in 0..=i {
            for (a, slot) in r.iter_mut().enumerate() {
                *slot = points[i][a] - points[j][a];
            }
            let block = spec.eval_offset(&r);
            k.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            if i != j {
                k.view_mut((j * d, i * d), (d, d)).copy_from(&block.transpose());
            }
        }
    }
    for i in 0..n * d {
        k[(i, i)] += nugget;
    }
    Ok(k)
}
