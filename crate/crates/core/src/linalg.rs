// SPDX-License-Identifier: Apache-2.0

//! Small dense helpers shared by the GP, moment and oracle modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tile edge for the transposed sweeps below, so both sides stay in cache.
const TILE: usize = 32;

/// Visits every strictly-lower `(i, j)` of an n×n column-major matrix, tile by tile,
/// passing the flat indices of `(i, j)` and `(j, i)`.
#[inline]
pub(crate) fn for_each_lower_pair(n: usize, mut f: impl FnMut(usize, usize)) {
    for jb in (0..n).step_by(TILE) {
        for ib in (jb..n).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                for i in ib.max(j + 1)..(ib + TILE).min(n) {
                    f(i + j * n, j + i * n);
                }
            }
        }
    }
}

/// Largest absolute entry of `m - mᵀ`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let a = m.as_slice();
    let mut worst = 0.0f64;
    for_each_lower_pair(m.nrows(), |lo, up| worst = worst.max((a[lo] - a[up]).abs()));
    worst
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    symmetrize_slice(n, m.as_mut_slice());
}

/// [`symmetrize`] on a column-major n×n slice.
pub fn symmetrize_slice(n: usize, a: &mut [f64]) {
    for_each_lower_pair(n, |lo, up| {
        let v = 0.5 * (a[lo] + a[up]);
        a[lo] = v;
        a[up] = v;
    });
}

/// True when every off-diagonal entry is exactly zero.
pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows().max(1);
    m.as_slice().chunks(n).enumerate().all(|(j, c)| c.iter().enumerate().all(|(i, v)| i == j || *v == 0.0))
}

/// Lower Cholesky factor. On breakdown reports the offending pivot.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidArgument(format!("cholesky of non-square {}x{} matrix", n, a.ncols())));
    }
    let mut l = a.lower_triangle();
    for j in 0..n {
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk == 0.0 {
                continue;
            }
            let (left, mut right) = l.columns_range_pair_mut(k, j);
            let src = left.rows_range(j..n);
            let mut dst = right.rows_range_mut(j..n);
            dst.axpy(-ljk, &src, 1.0);
        }
        let pivot = l[(j, j)];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::Factorization { index: j, value: pivot });
        }
        let s = pivot.sqrt();
        l[(j, j)] = s;
        for i in (j + 1)..n {
            l[(i, j)] /= s;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with zero diagonal")
}

/// Solves `L x = b` for a vector right-hand side.
pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with zero diagonal")
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if is_diagonal(m) {
        return m.diagonal().min();
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Checks that a symmetric matrix has no eigenvalue below `-tol`.
///
/// Uses a shifted Cholesky as the test and only pays for an eigendecomposition
/// when the test fails. On failure returns the smallest eigenvalue.
pub fn check_psd(m: &DMatrix<f64>, tol: f64) -> std::result::Result<(), f64> {
    if is_diagonal(m) {
        let min = m.diagonal().min();
        return if min >= -tol { Ok(()) } else { Err(min) };
    }
    let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * tol;
    match shifted.cholesky() {
        Some(_) => Ok(()),
        None => {
            let min = min_eigenvalue(m);
            if min >= -tol {
                Ok(())
            } else {
                Err(min)
            }
        }
    }
}

fn density(m: &DMatrix<f64>) -> f64 {
    let nnz = m.iter().filter(|v| **v != 0.0).count();
    nnz as f64 / (m.len().max(1) as f64)
}

/// `a * b`, skipping structural zeros of `a` when it is sparse.
pub fn mul_sparse_left(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if density(a) > 0.25 {
        return a * b;
    }
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for k in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aik = a[(i, k)];
            if aik != 0.0 {
                // out[i, :] += aik * b[k, :]
                for j in 0..b.ncols() {
                    out[(i, j)] += aik * b[(k, j)];
                }
            }
        }
    }
    out
}
