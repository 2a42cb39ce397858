// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense 64-bit linear algebra used by the analysis stages.
//!
//! Everything here is a pure function of its inputs; no routine keeps state
//! between calls.

mod decomp;
mod matrix;

pub use decomp::{qr, thin_svd, Qr, ThinSvd};
pub use matrix::{cosine, dot, norm, Matrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Rows with norm below this are treated as degenerate directions.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Truncated SVD: `left` is `n×r`, `right` is `d×r`, both with orthonormal
/// columns; `singulars` non-increasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    pub left: Matrix,
    pub singulars: Vec<f64>,
    pub right: Matrix,
}

impl SvdResult {
    /// `left · diag(singulars) · rightᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.left
            .matmul(&Matrix::diag(&self.singulars))
            .and_then(|m| m.matmul(&self.right.transpose()))
            .expect("consistent factor shapes")
    }
}

/// Top-`r` singular triplets of `m`.
pub fn svd_top_r(m: &Matrix, r: usize) -> Result<SvdResult> {
    let (n, d) = m.shape();
    if r == 0 || r > n.min(d) {
        return Err(Error::OutOfRange(format!("rank {r} for a {n}x{d} matrix")));
    }
    let full = thin_svd(m)?;
    Ok(SvdResult {
        left: full.left.leading_cols(r),
        singulars: full.singulars[..r].to_vec(),
        right: full.right.leading_cols(r),
    })
}

/// Orthogonal `R` minimizing `‖A·R − B‖_F`.
///
/// With `AᵀB = W Σ Zᵀ`, the minimizer is `R = W Zᵀ`.
pub fn procrustes(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "procrustes operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("procrustes operands".into()));
    }
    let cross = a.t_matmul(b)?;
    let svd = thin_svd(&cross)?;
    svd.left.matmul(&svd.right.transpose())
}

/// Seeded random orthogonal `r×r` matrix: QR of a Gaussian matrix with the
/// diagonal of `R` forced positive (Haar-distributed).
pub fn random_orthogonal(r: usize, seed: u64) -> Matrix {
    assert!(r >= 1, "random_orthogonal needs r >= 1");
    let mut rng = seeded(seed);
    let g = Matrix::gaussian(r, r, &mut rng);
    let Qr { mut q, r: upper } = qr(&g).expect("square QR");
    for j in 0..r {
        if upper[(j, j)] < 0.0 {
            for i in 0..r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Scale every row to unit L2 norm.
pub fn row_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateDirection { row: r });
        }
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn planted_rank5(seed: u64) -> Matrix {
        let mut rng = seeded(seed);
        let g = Matrix::gaussian(19, 5, &mut rng);
        let h = Matrix::gaussian(64, 5, &mut rng);
        g.matmul(&h.transpose()).unwrap()
    }

    #[test]
    fn identity_and_diagonal_singulars() {
        let s = svd_top_r(&Matrix::identity(3), 3).unwrap();
        for v in &s.singulars {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-14);
        }
        let s = svd_top_r(&Matrix::diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert_abs_diff_eq!(s.singulars[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.singulars[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn planted_rank5_is_recovered() {
        let m = planted_rank5(42);
        let s5 = svd_top_r(&m, 5).unwrap();
        assert!(s5.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8);
        let full = thin_svd(&m).unwrap();
        assert!(
            full.singulars[5] <= 1e-8,
            "sixth singular {}",
            full.singulars[5]
        );
    }

    #[test]
    fn singular_values_match_nalgebra_oracle() {
        let mut rng = seeded(5);
        let m = Matrix::gaussian(20, 64, &mut rng);
        let ours = thin_svd(&m).unwrap().singulars;
        let na = nalgebra::DMatrix::from_row_slice(20, 64, m.as_slice());
        let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.iter().zip(&theirs) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn svd_rank_out_of_range() {
        let m = Matrix::identity(3);
        assert!(matches!(svd_top_r(&m, 0), Err(Error::OutOfRange(_))));
        assert!(matches!(svd_top_r(&m, 4), Err(Error::OutOfRange(_))));
        let mut bad = Matrix::identity(2);
        bad[(0, 1)] = f64::INFINITY;
        assert!(matches!(svd_top_r(&bad, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sign_convention_largest_right_entry_positive() {
        let mut rng = seeded(9);
        let m = Matrix::gaussian(6, 10, &mut rng);
        let s = svd_top_r(&m, 6).unwrap();
        for j in 0..6 {
            let col = s.right.col(j);
            let big = col
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
        let again = svd_top_r(&m, 6).unwrap();
        assert_eq!(s.right, again.right);
    }

    #[test]
    fn procrustes_self_alignment_is_identity() {
        let mut rng = seeded(1);
        let a = Matrix::gaussian(19, 6, &mut rng);
        let r = procrustes(&a, &a).unwrap();
        assert!(r.sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_planted_rotation() {
        let mut rng = seeded(2);
        let a = Matrix::gaussian(19, 8, &mut rng);
        let r0 = random_orthogonal(8, 77);
        let b = a.matmul(&r0).unwrap();
        let r = procrustes(&a, &b).unwrap();
        assert!(r.sub(&r0).unwrap().frobenius_norm() <= 1e-6);
        assert!(r.orthonormality_error() <= 1e-9);
    }

    #[test]
    fn procrustes_beats_random_competitors() {
        let mut rng = seeded(4);
        let a = Matrix::gaussian(19, 5, &mut rng);
        let noise = Matrix::gaussian(19, 5, &mut rng).scale(0.01);
        let b = a
            .matmul(&random_orthogonal(5, 8))
            .unwrap()
            .add(&noise)
            .unwrap();
        let r = procrustes(&a, &b).unwrap();
        let best = a.matmul(&r).unwrap().sub(&b).unwrap().frobenius_norm();
        for seed in 0..100 {
            let q = random_orthogonal(5, 1000 + seed);
            let other = a.matmul(&q).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(best <= other);
        }
    }

    #[test]
    fn procrustes_shape_mismatch() {
        assert!(matches!(
            procrustes(&Matrix::identity(3), &Matrix::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn random_orthogonal_properties() {
        let one = random_orthogonal(1, 5);
        assert_eq!(one[(0, 0)].abs(), 1.0);
        assert_eq!(random_orthogonal(8, 3), random_orthogonal(8, 3));
        let worst = (0..1000)
            .map(|s| random_orthogonal(8, s).orthonormality_error())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-9, "worst {worst}");
    }

    #[test]
    fn row_normalize_cases() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = row_normalize(&m).unwrap();
        assert_abs_diff_eq!(n[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[(0, 1)], 0.8, epsilon = 1e-15);
        let unit = Matrix::identity(4);
        assert!(row_normalize(&unit).unwrap().sub(&unit).unwrap().max_abs() <= 1e-12);
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            row_normalize(&z),
            Err(Error::DegenerateDirection { row: 1 })
        ));
    }
}
