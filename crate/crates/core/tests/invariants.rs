// SPDX-License-Identifier: MIT OR Apache-2.0
//! Property tests over the public API.

use proptest::prelude::*;
use residforge_core::alignment::dictionary_metrics;
use residforge_core::container;
use residforge_core::numerics::{procrustes, random_orthogonal, Matrix};
use residforge_core::rng::seeded;
use residforge_core::stats::{wilson, Count, Z95};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::gaussian(rows, cols, &mut seeded(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wilson_brackets_the_estimate((n, k) in (1u64..100_000).prop_flat_map(|n| (Just(n), 0..=n))) {
        let (lo, hi) = wilson(k, n, Z95).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
        // Mirror symmetry: failures bound the complement.
        let (clo, chi) = wilson(n - k, n, Z95).unwrap();
        prop_assert!((lo - (1.0 - chi)).abs() < 1e-12 && (hi - (1.0 - clo)).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_order_free(parts in prop::collection::vec((0u64..50, 1u64..50), 1..8)) {
        let counts: Vec<Count> = parts.iter().map(|&(k, extra)| Count::new(k, k + extra)).collect();
        let fwd: Count = counts.iter().copied().sum();
        let rev: Count = counts.iter().rev().copied().sum();
        prop_assert_eq!(fwd, rev);
        let n: u64 = counts.iter().map(|c| c.total).sum();
        let weighted: f64 = counts.iter().map(|c| c.total as f64 * c.rate().unwrap()).sum::<f64>() / n as f64;
        prop_assert!((fwd.rate().unwrap() - weighted).abs() < 1e-12);
    }

    #[test]
    fn procrustes_is_orthogonal_and_recovers_rotations(r in 2usize..12, seed in any::<u64>()) {
        let a = gaussian(3 * r, r, seed);
        let q = random_orthogonal(r, seed ^ 1);
        let fitted = procrustes(&a, &a.matmul(&q).unwrap()).unwrap();
        prop_assert!(fitted.orthonormality_error() < 1e-9);
        prop_assert!(fitted.sub(&q).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn metrics_ignore_a_shared_orthogonal_map(r in 2usize..8, seed in any::<u64>()) {
        let u1 = gaussian(10, 24, seed);
        let u2 = gaussian(10, 24, seed ^ 2);
        let q = random_orthogonal(24, seed ^ 3);
        let a = dictionary_metrics(&u1, &u2, r).unwrap();
        let b = dictionary_metrics(&u1.matmul(&q).unwrap(), &u2.matmul(&q).unwrap(), r).unwrap();
        prop_assert!((a.cos_unaligned - b.cos_unaligned).abs() < 1e-9);
        prop_assert!((a.cos_proc - b.cos_proc).abs() < 1e-9);
        prop_assert!((a.relfro - b.relfro).abs() < 1e-9);
        prop_assert!(a.cos_proc >= -1.0 - 1e-12 && a.cos_proc <= 1.0 + 1e-12);
    }

    #[test]
    fn container_round_trips(rows in 0usize..40, dim in 1usize..17, seed in any::<u64>()) {
        let data: Vec<f32> = gaussian(rows.max(1), dim, seed).as_slice()[..rows * dim]
            .iter()
            .map(|&x| x as f32)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rsaf");
        container::write(&path, rows, dim, &data, serde_json::json!({"seed": seed})).unwrap();
        let back = container::read(&path).unwrap();
        prop_assert_eq!((back.n_rows, back.dim), (rows, dim));
        prop_assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn million_row_container_round_trips() {
    let (rows, dim) = (1_000_000, 4);
    let data: Vec<f32> = (0..rows * dim).map(|i| i as f32 * 0.5 - 7.25).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.rsaf");
    let hash = container::write(&path, rows, dim, &data, serde_json::Value::Null).unwrap();
    assert_eq!(hash.len(), 64);
    let back = container::read(&path).unwrap();
    assert_eq!((back.n_rows, back.dim), (rows, dim));
    assert!(back.data == data);
    assert_eq!(back.row(rows - 1), &data[(rows - 1) * dim..]);
}
