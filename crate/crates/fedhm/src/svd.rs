//! Truncated singular value decomposition.
//!
//! Singular triplets are obtained from a cyclic Jacobi eigendecomposition of
//! the Gram matrix of the smaller side, with the other factor recovered as
//! `M v / sigma` and re-orthogonalized by modified Gram-Schmidt. The routine
//! is deterministic: identical input bytes give identical factors.
//!
//! Sign convention: in each left singular vector the entry of largest
//! magnitude is non-negative; ties resolve to the lowest index.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_tn, Tensor};

/// Truncated decomposition `M ≈ U · diag(S) · Vᵀ`.
///
/// `u` is (rows, r), `v` is (cols, r), and `singular_values` holds the r
/// largest singular values in non-increasing order.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Reconstructs `U · diag(S) · Vᵀ` at the truncated rank.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let rows = self.u.shape()[0];
        let r = self.rank();
        let mut us = Tensor::zeros(&[rows, r]);
        for i in 0..rows {
            for j in 0..r {
                us.data_mut()[i * r + j] = self.u.at2(i, j) * self.singular_values[j];
            }
        }
        crate::tensor::matmul_nt(&us, &self.v)
    }
}

/// Computes the rank-`r` truncated SVD of a 2D tensor.
///
/// The effective rank is `min(r, rows, cols)`; requesting more is not an
/// error, the result is simply clamped.
pub fn truncated_svd(m: &Tensor, r: usize) -> Result<SvdResult> {
    if m.ndim() != 2 {
        return Err(Error::dimension(format!(
            "svd expects a matrix, got {:?}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows == 0 || cols == 0 {
        return Err(Error::dimension("svd of empty matrix"));
    }
    if r == 0 {
        return Err(Error::InvalidArgument("svd rank must be >= 1".into()));
    }
    let full = rows.min(cols);
    let keep = r.min(full);

    let (mut u, mut sigma, mut v) = if cols <= rows {
        // gram = MᵀM (cols x cols), eigenvectors are right singular vectors
        let gram = matmul_tn(m, m)?;
        let (eigvals, eigvecs) = jacobi_eigh(&gram);
        let v = eigvecs;
        let sigma: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let u = recover_side(m, &v, &sigma, false)?;
        (u, sigma, v)
    } else {
        // gram = MMᵀ (rows x rows), eigenvectors are left singular vectors
        let gram = crate::tensor::matmul_nt(m, m)?;
        let (eigvals, eigvecs) = jacobi_eigh(&gram);
        let u = eigvecs;
        let sigma: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let v = recover_side(m, &u, &sigma, true)?;
        (u, sigma, v)
    };

    truncate_columns(&mut u, keep);
    truncate_columns(&mut v, keep);
    sigma.truncate(keep);
    apply_sign_convention(&mut u, &mut v);

    Ok(SvdResult {
        u,
        singular_values: sigma,
        v,
    })
}

/// Given one side's orthonormal vectors, recovers the other side as
/// `M w / sigma` (or `Mᵀ w / sigma`), completing near-null directions by
/// Gram-Schmidt against canonical basis vectors.
fn recover_side(m: &Tensor, w: &Tensor, sigma: &[f64], transpose: bool) -> Result<Tensor> {
    let prod = if transpose { matmul_tn(m, w)? } else { matmul(m, w)? };
    let dim = prod.shape()[0];
    let k = prod.shape()[1];
    let cutoff = sigma.first().copied().unwrap_or(0.0) * 1e-13;

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col: Vec<f64> = (0..dim).map(|i| prod.at2(i, j)).collect();
        if sigma[j] > cutoff {
            let inv = 1.0 / sigma[j];
            for x in col.iter_mut() {
                *x *= inv;
            }
        } else {
            col = vec![0.0; dim];
        }
        // modified Gram-Schmidt against previous columns
        for prev in cols.iter() {
            let dot: f64 = col.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev.iter()) {
                *c -= dot * p;
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in col.iter_mut() {
                *x /= norm;
            }
        } else {
            // complete the basis from canonical vectors, deterministically
            col = complete_direction(&cols, dim);
        }
        cols.push(col);
    }

    let mut out = Tensor::zeros(&[dim, k]);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            out.data_mut()[i * k + j] = col[i];
        }
    }
    Ok(out)
}

fn complete_direction(existing: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for prev in existing.iter() {
            let dot: f64 = cand.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (c, p) in cand.iter_mut().zip(prev.iter()) {
                *c -= dot * p;
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in cand.iter_mut() {
                *x /= norm;
            }
            return cand;
        }
    }
    vec![0.0; dim]
}

fn truncate_columns(t: &mut Tensor, keep: usize) {
    let rows = t.shape()[0];
    let cols = t.shape()[1];
    if keep >= cols {
        return;
    }
    let mut data = Vec::with_capacity(rows * keep);
    for i in 0..rows {
        data.extend_from_slice(&t.data()[i * cols..i * cols + keep]);
    }
    *t = Tensor::new(&[rows, keep], data).expect("truncation preserves finiteness");
}

fn apply_sign_convention(u: &mut Tensor, v: &mut Tensor) {
    let rows_u = u.shape()[0];
    let rows_v = v.shape()[0];
    let k = u.shape()[1];
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..rows_u {
            let a = u.at2(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.at2(best, j) < 0.0 {
            for i in 0..rows_u {
                let idx = i * k + j;
                u.data_mut()[idx] = -u.data()[idx];
            }
            for i in 0..rows_v {
                let idx = i * k + j;
                v.data_mut()[idx] = -v.data()[idx];
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted in non-increasing order with matching
/// eigenvector columns.
fn jacobi_eigh(sym: &Tensor) -> (Vec<f64>, Tensor) {
    let n = sym.shape()[0];
    let mut a: Vec<f64> = sym.data().to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = frob.max(f64::MIN_POSITIVE) * 1e-15;

    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                off += a[p * n + r] * a[p * n + r];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[p * n + r];
                if apr.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let arr = a[r * n + r];
                let theta = (arr - app) / (2.0 * apr);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akr = a[k * n + r];
                    a[k * n + p] = c * akp - s * akr;
                    a[k * n + r] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let ark = a[r * n + k];
                    a[p * n + k] = c * apk - s * ark;
                    a[r * n + k] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&x, &y| eig[y].partial_cmp(&eig[x]).unwrap().then(x.cmp(&y)));

    let vals: Vec<f64> = order.iter().map(|&i| eig[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (newj, &oldj) in order.iter().enumerate() {
        for i in 0..n {
            vecs[i * n + newj] = q[i * n + oldj];
        }
    }
    (
        vals,
        Tensor::new(&[n, n], vecs).expect("eigenvectors finite"),
    )
}
