// SPDX-License-Identifier: Apache-2.0

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::{cholesky_lower, is_diagonal, max_asymmetry, symmetrize};

/// Relative jitter used by the moment schemes when a covariance is near-singular.
pub const DEFAULT_JITTER: f64 = 1e-10;

const JITTER_RETRIES: i32 = 3;

/// Lower-triangular `S` with `S Sᵀ ≈ P` for a symmetric PSD `P`.
///
/// Tries a plain Cholesky first. If that breaks down, retries with
/// `jitter · tr(P)/d · I` added, growing the jitter tenfold up to three times.
/// The last resort is an eigendecomposition with negative eigenvalues clamped to
/// zero, re-triangularized through a QR step so the result is still lower
/// triangular. Exactly diagonal inputs take the elementwise square root.
pub fn sqrt_psd(p: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let d = p.nrows();
    if p.ncols() != d {
        return invalid(format!("sqrt_psd of non-square {}x{} matrix", d, p.ncols()));
    }
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !(jitter >= 0.0) {
        return invalid(format!("jitter must be non-negative, got {jitter}"));
    }
    if is_diagonal(p) {
        return Ok(DMatrix::from_diagonal(&p.diagonal().map(|v| v.max(0.0).sqrt())));
    }
    let scale = p.amax().max(1.0);
    let asym = max_asymmetry(p);
    if asym > 1e-8 * scale {
        return invalid(format!("sqrt_psd input is not symmetric (max |P - Pᵀ| = {asym:e})"));
    }

    let mut sym = p.clone();
    symmetrize(&mut sym);
    if let Ok(l) = cholesky_lower(&sym) {
        return Ok(l);
    }

    let base = jitter * sym.trace() / d as f64;
    if base > 0.0 {
        for k in 0..JITTER_RETRIES {
            let eps = base * 10f64.powi(k);
            let mut shifted = sym.clone();
            for i in 0..d {
                shifted[(i, i)] += eps;
            }
            if let Ok(l) = cholesky_lower(&shifted) {
                return Ok(l);
            }
        }
    }

    Ok(eigen_factor(sym))
}

fn eigen_factor(sym: DMatrix<f64>) -> DMatrix<f64> {
    let d = sym.nrows();
    let eig = sym.symmetric_eigen();
    let mut root = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        root.column_mut(j).scale_mut(s);
    }
    // root rootᵀ = P; with rootᵀ = Q R we get P = Rᵀ R, so Rᵀ is a lower factor.
    let qr = root.transpose().qr();
    let mut r = qr.r();
    for i in 0..d {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
        }
    }
    r.transpose()
}
