// SPDX-License-Identifier: MIT OR Apache-2.0
//! Low-rank bases per context, Procrustes rotators between contexts,
//! rotated transfer of directions and the dictionary metric triple.
//!
//! Coordinates are rows: `Φ_c = U_c·B_c` and the rotator `R` for
//! `(c_ref → c)` minimizes `‖Φ_ref·R − Φ_c‖_F`, so a reference row `φ`
//! lands on `φ·R` in context `c`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::directions::DirectionDictionary;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, procrustes, row_normalize, svd_top_r, Matrix};
use crate::stats::mean_std;

/// A basis whose `r`-th singular value falls below this is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A rotated direction shorter than this is degenerate.
pub const DEGENERATE_ROTATION: f64 = 1e-9;

/// Rank-`r` orthonormal basis (`d × r`) of the row space of `u`.
pub fn fit_basis(u: &Matrix, r: usize) -> Result<Matrix> {
    let (n, d) = u.shape();
    if r == 0 || r > n.min(d) {
        return Err(Error::OutOfRange(format!(
            "rank {r} for a {n}x{d} dictionary"
        )));
    }
    let svd = svd_top_r(u, r)?;
    let smallest = svd.singulars[r - 1];
    if smallest < RANK_TOLERANCE {
        return Err(Error::RankDeficient(format!(
            "singular value {r} is {smallest:e}"
        )));
    }
    Ok(svd.right)
}

fn check_compatible(dicts: &BTreeMap<i64, DirectionDictionary>) -> Result<()> {
    let mut it = dicts.values();
    let Some(first) = it.next() else {
        return Err(Error::InvalidArgument("no dictionaries".into()));
    };
    for d in it {
        if d.values != first.values {
            return Err(Error::InvalidArgument(format!(
                "context {} uses a different value ordering than context {}",
                d.context, first.context
            )));
        }
        if d.layer != first.layer || d.rows.cols() != first.rows.cols() {
            return Err(Error::InvalidArgument(format!(
                "context {} comes from a different layer or width",
                d.context
            )));
        }
    }
    Ok(())
}

/// Bases for every context.
pub fn fit_bases(
    dicts: &BTreeMap<i64, DirectionDictionary>,
    r: usize,
) -> Result<BTreeMap<i64, Matrix>> {
    check_compatible(dicts)?;
    dicts
        .iter()
        .map(|(&c, d)| {
            let b = fit_basis(&d.rows, r).map_err(|e| match e {
                Error::RankDeficient(m) => Error::RankDeficient(format!("context {c}: {m}")),
                other => other,
            })?;
            Ok((c, b))
        })
        .collect()
}

/// Orthogonal `R` minimizing `‖Φ_ref·R − Φ_c‖_F`.
pub fn fit_rotator(phi_ref: &Matrix, phi_c: &Matrix) -> Result<Matrix> {
    procrustes(phi_ref, phi_c)
}

/// Map a reference-context direction into context `c`:
/// `normalize(B_c · Rᵀ · B_refᵀ · u_ref)`, i.e. the row `(u_refᵀB_ref)·R·B_cᵀ`.
pub fn rotate_direction(
    u_ref: &[f64],
    b_ref: &Matrix,
    r: &Matrix,
    b_c: &Matrix,
) -> Result<Vec<f64>> {
    let z = b_ref.t_mul_vec(u_ref)?;
    let zr = r.t_mul_vec(&z)?;
    let out = b_c.mul_vec(&zr)?;
    let n = norm(&out);
    if !(n >= DEGENERATE_ROTATION) {
        return Err(Error::Degenerate(format!(
            "rotated direction has norm {n:e}"
        )));
    }
    Ok(out.iter().map(|v| v / n).collect())
}

/// Unaligned cosine, aligned cosine and relative Frobenius error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub cos_unaligned: f64,
    pub cos_proc: f64,
    pub relfro: f64,
}

fn mean_row_dot(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows()).map(|i| dot(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
}

/// Metrics for `U₁ → U₂` given their bases and the fitted rotator.
fn pair_metrics(
    u1: &Matrix,
    b1: &Matrix,
    u2: &Matrix,
    b2: &Matrix,
    r: &Matrix,
) -> Result<PairMetrics> {
    let n1 = row_normalize(u1)?;
    let n2 = row_normalize(u2)?;
    let recon = u1.matmul(b1)?.matmul(r)?.matmul(&b2.transpose())?;
    let cos_proc = mean_row_dot(&row_normalize(&recon)?, &n2);
    let denom = u2.frobenius_norm();
    if denom < crate::numerics::DEGENERATE_NORM {
        return Err(Error::Degenerate("target dictionary is zero".into()));
    }
    Ok(PairMetrics {
        cos_unaligned: mean_row_dot(&n1, &n2),
        cos_proc,
        relfro: recon.sub(u2)?.frobenius_norm() / denom,
    })
}

/// Metric triple for aligning `U₁` onto `U₂` at rank `r`.
pub fn dictionary_metrics(u1: &Matrix, u2: &Matrix, r: usize) -> Result<PairMetrics> {
    if u1.shape() != u2.shape() {
        return Err(Error::Shape(format!(
            "dictionaries {:?} vs {:?}",
            u1.shape(),
            u2.shape()
        )));
    }
    let b1 = fit_basis(u1, r)?;
    let b2 = fit_basis(u2, r)?;
    let rot = fit_rotator(&u1.matmul(&b1)?, &u2.matmul(&b2)?)?;
    pair_metrics(u1, &b1, u2, &b2, &rot)
}

/// Rotator and metrics for one ordered context pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAlignment {
    pub from: i64,
    pub to: i64,
    pub rotator: Matrix,
    pub metrics: PairMetrics,
}

/// Everything fitted at one layer for one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBundle {
    pub layer: usize,
    pub rank: usize,
    pub values: Vec<i64>,
    pub bases: BTreeMap<i64, Matrix>,
    /// Every ordered pair, diagonal included, sorted by `(from, to)`.
    pub pairs: Vec<PairAlignment>,
}

impl AlignmentBundle {
    pub fn contexts(&self) -> Vec<i64> {
        self.bases.keys().copied().collect()
    }

    pub fn basis(&self, c: i64) -> Result<&Matrix> {
        self.bases
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("no basis for context {c}")))
    }

    pub fn pair(&self, from: i64, to: i64) -> Result<&PairAlignment> {
        self.pairs
            .binary_search_by(|p| (p.from, p.to).cmp(&(from, to)))
            .map(|i| &self.pairs[i])
            .map_err(|_| Error::InvalidArgument(format!("no rotator for {from} -> {to}")))
    }

    pub fn rotator(&self, from: i64, to: i64) -> Result<&Matrix> {
        Ok(&self.pair(from, to)?.rotator)
    }

    /// Persist bases in a container (contexts stacked, each `d × r`) with
    /// rotators and metrics in the sidecar.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut data = Vec::new();
        let mut d = 0;
        for b in self.bases.values() {
            d = b.rows();
            data.extend(b.as_slice().iter().map(|&v| v as f32));
        }
        let meta = serde_json::json!({
            "kind": "alignment-bundle",
            "layer": self.layer,
            "rank": self.rank,
            "d_model": d,
            "values": self.values,
            "contexts": self.contexts(),
            "pairs": self.pairs,
        });
        container::write(path, self.bases.len() * d, self.rank, &data, meta)
    }
}

/// Fit bases, all ordered-pair rotators and their metrics.
pub fn align(dicts: &BTreeMap<i64, DirectionDictionary>, r: usize) -> Result<AlignmentBundle> {
    let bases = fit_bases(dicts, r)?;
    let phis: BTreeMap<i64, Matrix> = dicts
        .iter()
        .map(|(&c, d)| Ok((c, d.rows.matmul(&bases[&c])?)))
        .collect::<Result<_>>()?;
    let keys: Vec<(i64, i64)> = dicts
        .keys()
        .flat_map(|&a| dicts.keys().map(move |&b| (a, b)))
        .collect();
    let pairs: Vec<PairAlignment> = keys
        .par_iter()
        .map(|&(from, to)| {
            let rotator = fit_rotator(&phis[&from], &phis[&to])?;
            let metrics = pair_metrics(
                &dicts[&from].rows,
                &bases[&from],
                &dicts[&to].rows,
                &bases[&to],
                &rotator,
            )?;
            Ok(PairAlignment {
                from,
                to,
                rotator,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let first = dicts.values().next().expect("checked non-empty");
    Ok(AlignmentBundle {
        layer: first.layer,
        rank: r,
        values: first.values.clone(),
        bases,
        pairs,
    })
}

/// Mean and standard deviation of each metric over off-diagonal pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub n_pairs: usize,
    pub unaligned: (f64, f64),
    pub procrustes: (f64, f64),
    pub relfro: (f64, f64),
}

/// Per-layer averages over ordered off-diagonal context pairs.
pub fn layerwise_summary(bundles: &[AlignmentBundle]) -> Result<Vec<LayerSummary>> {
    bundles
        .iter()
        .map(|b| {
            if b.bases.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "layer {} has {} context(s), need at least 2",
                    b.layer,
                    b.bases.len()
                )));
            }
            let off: Vec<&PairMetrics> = b
                .pairs
                .iter()
                .filter(|p| p.from != p.to)
                .map(|p| &p.metrics)
                .collect();
            let col = |f: fn(&PairMetrics) -> f64| {
                mean_std(&off.iter().map(|m| f(m)).collect::<Vec<_>>()).expect("non-empty")
            };
            Ok(LayerSummary {
                layer: b.layer,
                n_pairs: off.len(),
                unaligned: col(|m| m.cos_unaligned),
                procrustes: col(|m| m.cos_proc),
                relfro: col(|m| m.relfro),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random_orthogonal;

    fn orthonormal_rows(n: usize, d: usize, seed: u64) -> Matrix {
        random_orthogonal(d, seed).leading_rows(n)
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        row_normalize(&Matrix::gaussian(n, d, &mut crate::rng::seeded(seed))).unwrap()
    }

    fn dict(context: i64, rows: Matrix) -> DirectionDictionary {
        let n = rows.rows();
        DirectionDictionary {
            layer: 4,
            context,
            values: (0..n as i64).collect(),
            rows,
            raw_norms: vec![1.0; n],
            positives: vec![32; n],
            negatives: vec![32; n],
        }
    }

    #[test]
    fn basis_of_orthonormal_rows_spans_them() {
        let u = orthonormal_rows(6, 20, 1);
        let b = fit_basis(&u, 6).unwrap();
        assert!(b.orthonormality_error() < 1e-9);
        let resid = u
            .sub(&u.matmul(&b).unwrap().matmul(&b.transpose()).unwrap())
            .unwrap();
        assert!(resid.frobenius_norm() < 1e-9);
        assert!(matches!(fit_basis(&u, 7), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let mut u = orthonormal_rows(4, 10, 2);
        let r0 = u.row(0).to_vec();
        u.row_mut(1).copy_from_slice(&r0);
        assert!(matches!(fit_basis(&u, 4), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn self_metrics_are_exact() {
        let u = unit_rows(19, 64, 3);
        let m = dictionary_metrics(&u, &u, 19).unwrap();
        assert!((m.cos_unaligned - 1.0).abs() < 1e-9);
        assert!((m.cos_proc - 1.0).abs() < 1e-9);
        assert!(m.relfro.abs() < 1e-9);
    }

    #[test]
    fn rotation_identity_cases() {
        let b = random_orthogonal(10, 4).leading_cols(3);
        let u = b.mul_vec(&[0.6, 0.0, 0.8]).unwrap();
        let out = rotate_direction(&u, &b, &Matrix::identity(3), &b).unwrap();
        for (x, y) in out.iter().zip(&u) {
            assert!((x - y).abs() < 1e-9);
        }
        let full = random_orthogonal(10, 4);
        let outside = full.col(5);
        assert!(matches!(
            rotate_direction(&outside, &b, &Matrix::identity(3), &b),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bundle_diagonal_rotators_are_identity_and_summary_skips_them() {
        let u = orthonormal_rows(8, 16, 5);
        let mut dicts = BTreeMap::new();
        for c in 0..3 {
            dicts.insert(c, dict(c, u.clone()));
        }
        let bundle = align(&dicts, 8).unwrap();
        assert_eq!(bundle.pairs.len(), 9);
        for c in 0..3 {
            assert!(
                bundle
                    .rotator(c, c)
                    .unwrap()
                    .sub(&Matrix::identity(8))
                    .unwrap()
                    .max_abs()
                    < 1e-9
            );
        }
        let s = layerwise_summary(&[bundle]).unwrap();
        assert_eq!(s[0].n_pairs, 6);
        assert!((s[0].unaligned.0 - 1.0).abs() < 1e-9);
        assert!((s[0].procrustes.0 - 1.0).abs() < 1e-9);
        assert!(s[0].relfro.0.abs() < 1e-9);
    }

    #[test]
    fn summary_needs_two_contexts() {
        let mut dicts = BTreeMap::new();
        dicts.insert(0, dict(0, unit_rows(5, 8, 6)));
        let bundle = align(&dicts, 3).unwrap();
        assert!(layerwise_summary(&[bundle]).is_err());
    }

    #[test]
    fn mismatched_value_orderings_are_rejected() {
        let mut dicts = BTreeMap::new();
        dicts.insert(0, dict(0, orthonormal_rows(5, 8, 6)));
        let mut other = dict(1, orthonormal_rows(5, 8, 7));
        other.values.reverse();
        dicts.insert(1, other);
        assert!(align(&dicts, 3).is_err());
    }

    #[test]
    fn bundle_saves_to_a_container() {
        let mut dicts = BTreeMap::new();
        dicts.insert(0, dict(0, unit_rows(5, 8, 6)));
        dicts.insert(1, dict(1, unit_rows(5, 8, 7)));
        let bundle = align(&dicts, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.rsaf");
        bundle.save(&p).unwrap();
        let c = container::read(&p).unwrap();
        assert_eq!((c.n_rows, c.dim), (16, 3));
        assert_eq!(c.meta["pairs"].as_array().unwrap().len(), 4);
    }
}
