//! Minimal dense linear algebra: Cholesky factorization, triangular solves,
//! and a Jacobi eigensolver for small symmetric matrices. Everything works on
//! row-major `n x n` slices.

use crate::error::{Error, Result};

/// In-place Cholesky of a symmetric positive-definite matrix: returns the
/// lower factor `G` with `G * G^T = A` (upper part of the output is zeroed).
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= g[i * n + k] * g[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::numerical(
                        "cholesky",
                        format!("pivot {s:e} at row {i}; matrix not positive definite"),
                    ));
                }
                g[i * n + j] = s.sqrt();
            } else {
                g[i * n + j] = s / g[j * n + j];
            }
        }
    }
    Ok(g)
}

/// Solve `G y = b` for lower-triangular `G` (forward substitution).
pub fn solve_lower(g: &[f64], n: usize, b: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= g[i * n + k] * y[k];
        }
        y[i] = s / g[i * n + i];
    }
}

/// Solve `G^T y = b` for lower-triangular `G` (back substitution).
pub fn solve_lower_transpose(g: &[f64], n: usize, b: &[f64], y: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= g[k * n + i] * y[k];
        }
        y[i] = s / g[i * n + i];
    }
}

/// Upper-triangular factor `U = G^-T` of the inverse: given the lower
/// Cholesky factor `G` of `A`, returns `U` with `U * U^T = A^-1`.
pub fn inverse_factor(g: &[f64], n: usize) -> Vec<f64> {
    // Column j of U solves G^T u = e_j.
    let mut u = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        solve_lower_transpose(g, n, &e, &mut col);
        for i in 0..n {
            u[i * n + j] = col[i];
        }
        e[j] = 0.0;
    }
    u
}

/// `y = M^T x` for a row-major `n x n` matrix.
pub fn matvec_transpose(m: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    y[..n].fill(0.0);
    for (&xi, row) in x[..n].iter().zip(m.chunks_exact(n)) {
        for (yv, &mv) in y.iter_mut().zip(row) {
            *yv += mv * xi;
        }
    }
}

/// `y = M x` for a row-major `n x n` matrix.
pub fn matvec(m: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for (yv, row) in y[..n].iter_mut().zip(m.chunks_exact(n)) {
        *yv = row.iter().zip(x).map(|(&mv, &xv)| mv * xv).sum();
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, row-major eigenvector matrix V with rows = input
/// basis, columns = eigenvectors): `A = V diag(w) V^T`.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (w, v)
}
