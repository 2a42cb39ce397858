// SPDX-License-Identifier: MIT OR Apache-2.0

//! Householder QR and one-sided Jacobi SVD.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Thin QR factors of an `m×n` matrix with `m ≥ n`.
#[derive(Debug, Clone)]
pub struct Qr {
    /// `m×n`, orthonormal columns.
    pub q: Matrix,
    /// `n×n`, upper triangular.
    pub r: Matrix,
}

/// Householder QR. `q` has orthonormal columns, `r` is upper triangular.
pub fn qr(a: &Matrix) -> Result<Qr> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::Shape(format!("QR needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm(&v);
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = norm(&v);
        for x in &mut v {
            *x /= vn;
        }
        for j in k..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
        reflectors.push(v);
    }
    // Accumulate Q = H_0 H_1 … H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    Ok(Qr { q, r })
}

/// Full thin SVD `a = left · diag(singulars) · rightᵀ`, `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub left: Matrix,
    pub singulars: Vec<f64>,
    pub right: Matrix,
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi on the columns of `a` (`m×n`, `m ≥ n`).
/// Returns unsorted column norms, normalized columns and the accumulated
/// right rotation.
fn hestenes(a: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (wp, wq) = (w[p][i], w[q][i]);
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for i in 0..n {
                    let (vp, vq) = (v[p][i], v[q][i]);
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigmas: Vec<f64> = w.iter().map(|col| norm(col)).collect();
    (w, sigmas, v)
}

/// Extend a set of orthonormal vectors in `R^m` (some slots `None`) to a full
/// orthonormal set, filling the gaps with Gram-Schmidt on the canonical basis.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], m: usize) {
    let mut candidate = 0;
    for idx in 0..cols.len() {
        if cols[idx].is_some() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for existing in cols.iter().flatten() {
                    let p = dot(&e, existing);
                    for (x, y) in e.iter_mut().zip(existing) {
                        *x -= p * y;
                    }
                }
            }
            let n = norm(&e);
            if n > 1e-6 {
                e.iter_mut().for_each(|x| *x /= n);
                cols[idx] = Some(e);
                break;
            }
        }
    }
}

/// Thin SVD with singular values sorted non-increasing and each right
/// singular vector sign-fixed so that its largest-magnitude entry is positive.
pub fn thin_svd(a: &Matrix) -> Result<ThinSvd> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!("svd of empty {m}x{n} matrix")));
    }
    // Jacobi orthogonalizes columns; run it on whichever orientation has fewer.
    let transposed = m < n;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (rows, k) = work.shape();
    let (w, sigmas, v) = hestenes(&work);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| sigmas[j].total_cmp(&sigmas[i]).then(i.cmp(&j)));

    let scale = sigmas.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * (rows.max(k) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            if sigmas[j] > tiny && sigmas[j] > 0.0 {
                Some(w[j].iter().map(|x| x / sigmas[j]).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, rows);
    let singulars: Vec<f64> = order
        .iter()
        .map(|&j| if sigmas[j] > tiny { sigmas[j] } else { 0.0 })
        .collect();

    let mut u = Matrix::zeros(rows, k);
    let mut vm = Matrix::zeros(k, k);
    for (dst, (&src, ucol)) in order.iter().zip(&u_cols).enumerate() {
        u.set_col(dst, ucol.as_ref().expect("completed"));
        vm.set_col(dst, &v[src]);
    }
    let (mut left, mut right) = if transposed { (vm, u) } else { (u, vm) };

    for j in 0..k {
        let col = right.col(j);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, x)| {
                if x.abs() > best.1.abs() + 1e-12 {
                    (i, *x)
                } else {
                    best
                }
            });
        if pivot.1 < 0.0 {
            for i in 0..right.rows() {
                right[(i, j)] = -right[(i, j)];
            }
            for i in 0..left.rows() {
                left[(i, j)] = -left[(i, j)];
            }
        }
    }
    Ok(ThinSvd {
        left,
        singulars,
        right,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let mut rng = seeded(3);
        let a = Matrix::gaussian(9, 5, &mut rng);
        let f = qr(&a).unwrap();
        assert!(f.q.orthonormality_error() < 1e-12);
        let back = f.q.matmul(&f.r).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-12);
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(f.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn svd_handles_both_orientations() {
        let mut rng = seeded(11);
        for (m, n) in [(7, 4), (4, 7), (5, 5)] {
            let a = Matrix::gaussian(m, n, &mut rng);
            let s = thin_svd(&a).unwrap();
            let k = m.min(n);
            assert_eq!(s.left.shape(), (m, k));
            assert_eq!(s.right.shape(), (n, k));
            let recon = s
                .left
                .matmul(&Matrix::diag(&s.singulars))
                .unwrap()
                .matmul(&s.right.transpose())
                .unwrap();
            assert!(recon.sub(&a).unwrap().frobenius_norm() < 1e-10);
            assert!(s.singulars.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input_still_has_orthonormal_factors() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let s = thin_svd(&a).unwrap();
        assert_eq!(s.singulars[1], 0.0);
        assert!(s.left.orthonormality_error() < 1e-12);
        assert!(s.right.orthonormality_error() < 1e-12);
    }
}
