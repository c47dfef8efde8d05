//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is orthogonalized column by column with plane rotations applied
//! in cyclic order until every column pair is orthogonal to a relative
//! tolerance. Column norms are the singular values, the accumulated rotations
//! form `V`, and the normalized columns form the leading part of `U`. The
//! trailing columns of `U` (null space and, for tall inputs, the orthogonal
//! complement) are filled from a Householder QR of the leading columns so
//! that `U` is always square and orthogonal.
//!
//! Wide inputs are decomposed through their transpose.

use thiserror::Error;

use crate::matrix::Matrix;

/// Maximum number of cyclic sweeps before giving up.
pub const MAX_SWEEPS: usize = 60;

/// Column pairs with `|<a_p, a_q>| <= TOL * |a_p| |a_q|` count as orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvdError {
    #[error("input contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("Jacobi sweeps did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// `G = U diag(sigma) V^T` with `U` m x m and `V` n x n.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    /// Non-increasing, non-negative, length `min(m, n)`.
    pub sigma: Vec<f64>,
    pub v: Matrix,
    /// Number of sweeps the Jacobi iteration used.
    pub sweeps: usize,
}

impl SvdResult {
    /// Rebuilds `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = vec![0.0; m * n];
        for (k, &s) in self.sigma.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, k) * s;
                if us == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(j, k);
                }
            }
        }
        Matrix::from_vec_unchecked(m, n, out)
    }
}

/// Computes the full SVD of `g`.
pub fn svd(g: &Matrix) -> Result<SvdResult, SvdError> {
    if let Some(idx) = g.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(SvdError::NonFinite {
            row: idx / g.cols(),
            col: idx % g.cols(),
        });
    }
    let mut res = if g.rows() >= g.cols() {
        jacobi_tall(g)?
    } else {
        let t = jacobi_tall(&g.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
            sweeps: t.sweeps,
        }
    };
    fix_signs(&mut res);
    Ok(res)
}

/// Singular values only.
pub fn singular_values(g: &Matrix) -> Result<Vec<f64>, SvdError> {
    svd(g).map(|r| r.sigma)
}

fn jacobi_tall(g: &Matrix) -> Result<SvdResult, SvdError> {
    let (m, n) = g.shape();
    debug_assert!(m >= n);

    // Column-major working copy of g and the rotation accumulator.
    let mut a = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            a[j * m + i] = g.get(i, j);
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut sweeps = 0;
    let mut converged = n < 2;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(SvdError::NoConvergence { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &a[p * m..(p + 1) * m];
                    let cq = &a[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (&x, &y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= ORTHOGONALITY_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, m, p, q, c, s);
                rotate_columns(&mut v, n, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let mut order: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let col = &a[j * m..(j + 1) * m];
            (j, col.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .collect();
    // Stable sort keeps equal singular values in column order.
    order.sort_by(|x, y| y.1.total_cmp(&x.1));

    let sigma: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = sigma_max * f64::EPSILON * m as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &(j, s) in &order {
        if s > cutoff && s > 0.0 {
            u_cols.push(a[j * m..(j + 1) * m].iter().map(|x| x / s).collect());
        } else {
            break;
        }
    }
    complete_basis(&mut u_cols, m);

    let mut u = vec![0.0; m * m];
    for (k, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * m + k] = col[i];
        }
    }
    let mut vt = vec![0.0; n * n];
    for (k, &(j, _)) in order.iter().enumerate() {
        for i in 0..n {
            vt[i * n + k] = v[j * n + i];
        }
    }

    Ok(SvdResult {
        u: Matrix::from_vec_unchecked(m, m, u),
        sigma,
        v: Matrix::from_vec_unchecked(n, n, vt),
        sweeps,
    })
}

#[inline]
fn rotate_columns(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Extends an orthonormal set of `m`-vectors to a full basis of R^m.
///
/// Householder QR of the existing columns yields an orthogonal `Q` whose
/// trailing columns span their orthogonal complement.
fn complete_basis(cols: &mut Vec<Vec<f64>>, m: usize) {
    let r = cols.len();
    if r == m {
        return;
    }
    // Householder vectors, one per existing column.
    let mut work: Vec<Vec<f64>> = cols.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let mut x = work[k].clone();
        for h in &reflectors {
            apply_reflector(h, &mut x);
        }
        let norm_tail = x[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut h = vec![0.0; m];
        if norm_tail > 0.0 {
            let alpha = if x[k] >= 0.0 { -norm_tail } else { norm_tail };
            h[k..].copy_from_slice(&x[k..]);
            h[k] -= alpha;
            let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if hn > 0.0 {
                h.iter_mut().for_each(|v| *v /= hn);
            }
        }
        reflectors.push(h);
        work[k] = x;
    }
    // Q e_j for j >= r equals H_1 H_2 ... H_r e_j.
    for j in r..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        for h in reflectors.iter().rev() {
            apply_reflector(h, &mut e);
        }
        cols.push(e);
    }
}

#[inline]
fn apply_reflector(h: &[f64], x: &mut [f64]) {
    let d: f64 = h.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if d != 0.0 {
        for (xi, hi) in x.iter_mut().zip(h) {
            *xi -= 2.0 * d * hi;
        }
    }
}

/// Makes the first nonzero entry of every column of `U` non-negative,
/// flipping the paired column of `V` for the leading `min(m, n)` columns.
fn fix_signs(res: &mut SvdResult) {
    let (m, n) = (res.u.rows(), res.v.rows());
    let k = res.sigma.len();
    let mut u = std::mem::replace(&mut res.u, Matrix::zeros(1, 1)).into_vec();
    let mut v = std::mem::replace(&mut res.v, Matrix::zeros(1, 1)).into_vec();
    for j in 0..m {
        let first = (0..m)
            .map(|i| u[i * m + j])
            .find(|x| x.abs() > f64::EPSILON);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                u[i * m + j] = -u[i * m + j];
            }
            if j < k {
                for i in 0..n {
                    v[i * n + j] = -v[i * n + j];
                }
            }
        }
    }
    res.u = Matrix::from_vec_unchecked(m, m, u);
    res.v = Matrix::from_vec_unchecked(n, n, v);
}
