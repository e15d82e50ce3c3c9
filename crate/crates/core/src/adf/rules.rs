// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Unit-space quadrature rule for expectations under N(0, I).
///
/// Points are stored column-wise in a d×N matrix. Sigma points for N(m, P)
/// are `m + √P ξ_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub points: DMatrix<f64>,
    pub weights: DVector<f64>,
}

/// Largest tensor-product rule we are willing to build.
pub const MAX_GAUSS_HERMITE_POINTS: usize = 1_000_000;

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// `Σ w_i g(m + S ξ_i)`.
    pub fn expect<F>(&self, mean: &DVector<f64>, sqrt_cov: &DMatrix<f64>, mut g: F) -> DMatrix<f64>
    where
        F: FnMut(&DVector<f64>) -> DMatrix<f64>,
    {
        let offsets = sqrt_cov * &self.points;
        let mut acc: Option<DMatrix<f64>> = None;
        for i in 0..self.len() {
            let z = mean + offsets.column(i);
            let v = g(&z) * self.weights[i];
            match acc.as_mut() {
                Some(a) => *a += v,
                None => acc = Some(v),
            }
        }
        acc.unwrap_or_else(|| DMatrix::zeros(0, 0))
    }
}

/// Symmetric third-order cubature: points ±√d eᵢ, weights 1/(2d).
pub fn cubature_rule(d: usize) -> QuadratureRule {
    assert!(d > 0, "cubature rule needs d >= 1");
    let scale = (d as f64).sqrt();
    let mut points = DMatrix::zeros(d, 2 * d);
    for i in 0..d {
        points[(i, i)] = scale;
        points[(i, d + i)] = -scale;
    }
    QuadratureRule { points, weights: DVector::from_element(2 * d, 1.0 / (2 * d) as f64) }
}

/// One-dimensional Gauss–Hermite nodes and weights for N(0, 1) (probabilists' form).
///
/// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix with
/// off-diagonal `√k`; weights are squared first eigenvector components.
pub fn gauss_hermite_1d(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order > 0);
    let jacobi =
        DMatrix::from_fn(order, order, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> =
        (0..order).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    // symmetric rule: pin the middle node to zero and mirror the rest exactly
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1 / total).collect();
    for k in 0..order / 2 {
        let j = order - 1 - k;
        let x = 0.5 * (nodes[j] - nodes[k]);
        let w = 0.5 * (weights[j] + weights[k]);
        nodes[k] = -x;
        nodes[j] = x;
        weights[k] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    (nodes, weights)
}

/// Tensor-product Gauss–Hermite rule with `order^d` points.
pub fn gauss_hermite_rule(d: usize, order: usize) -> Result<QuadratureRule> {
    if d == 0 || order == 0 {
        return invalid("Gauss-Hermite rule needs d >= 1 and order >= 1");
    }
    if order > 10 {
        return Err(Error::Capacity(format!("Gauss-Hermite order {order} exceeds 10; use the cubature rule")));
    }
    let count = (order as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if count > MAX_GAUSS_HERMITE_POINTS as u128 {
        return Err(Error::Capacity(format!(
            "Gauss-Hermite rule with {order}^{d} points exceeds {MAX_GAUSS_HERMITE_POINTS}; use the cubature rule"
        )));
    }
    let count = count as usize;
    let (nodes, w1) = gauss_hermite_1d(order);
    let mut points = DMatrix::zeros(d, count);
    let mut weights = DVector::zeros(count);
    for idx in 0..count {
        let mut rem = idx;
        let mut w = 1.0;
        for axis in 0..d {
            let k = rem % order;
            rem /= order;
            points[(axis, idx)] = nodes[k];
            w *= w1[k];
        }
        weights[idx] = w;
    }
    Ok(QuadratureRule { points, weights })
}
