//! Sparse products with the CAR kernel and iterative extreme eigenvalues.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::Network;

/// (D − ρW)·v.
pub fn kernel_mul_vec(net: &Network, rho: f64, v: &[f64]) -> Vec<f64> {
    (0..net.n())
        .map(|i| {
            let nb: f64 = net.neighbors(i).iter().map(|&j| v[j]).sum();
            net.degree(i) as f64 * v[i] - rho * nb
        })
        .collect()
}

/// (D − ρW)·M for a dense n × k matrix.
pub fn kernel_mul_mat(net: &Network, rho: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    kernel_mul_mat_with_degree(net, 1.0, rho, m)
}

/// W·M for a dense n × k matrix.
pub fn adjacency_mul_mat(net: &Network, m: &DMatrix<f64>) -> DMatrix<f64> {
    kernel_mul_mat_with_degree(net, 0.0, -1.0, m)
}

/// (a·D − b·W)·M.
fn kernel_mul_mat_with_degree(net: &Network, a: f64, b: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = m.shape();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let deg = net.degree(i) as f64;
        for c in 0..k {
            let nb: f64 = net.neighbors(i).iter().map(|&j| m[(j, c)]).sum();
            out[(i, c)] = a * deg * m[(i, c)] - b * nb;
        }
    }
    out
}

/// Dense D − ρW.
pub fn kernel_dense(net: &Network, rho: f64) -> DMatrix<f64> {
    let n = net.n();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = net.degree(i) as f64;
        for &j in net.neighbors(i) {
            r[(i, j)] = -rho;
        }
    }
    r
}

/// Dense D − PWP with P = diag(√ρ_i). Entries use √(ρ_i ρ_j), which equals ρ
/// exactly when all ρ_i = ρ.
pub fn hetero_kernel_dense(net: &Network, rhos: &[f64]) -> DMatrix<f64> {
    let n = net.n();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = net.degree(i) as f64;
        for &j in net.neighbors(i) {
            r[(i, j)] = -(rhos[i] * rhos[j]).sqrt();
        }
    }
    r
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITER: usize = 200_000;

/// Largest eigenvalue of a symmetric positive semi-definite operator by power
/// iteration, stopped when the residual ‖Av − θv‖ falls below 1e-9·θ.
pub fn dominant_eigenvalue(
    n: usize,
    label: &str,
    mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("eigenvalue of an empty operator"));
    }
    // Deterministic start vector with components in every direction.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 104_729) as f64 / 104_729.0);
    v.normalize_mut();
    for _ in 0..POWER_MAX_ITER {
        let av = apply(&v);
        let theta = v.dot(&av);
        let resid = (&av - &v * theta).norm();
        let norm = av.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if resid <= POWER_TOL * theta.abs() {
            return Ok(theta);
        }
        v = av / norm;
    }
    Err(Error::EigenNotConverged(format!(
        "{label}: no convergence after {POWER_MAX_ITER} iterations"
    )))
}
