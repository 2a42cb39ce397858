// SPDX-License-Identifier: MIT OR Apache-2.0

//! Success counts, pooling and Wilson score intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

/// Wilson score interval for `k` successes out of `n` trials.
pub fn wilson(k: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("Wilson interval with n = 0".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("{k} successes out of {n}")));
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if k == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok((lo, hi))
}

/// A success count. Pooling adds counts, so any grouping of the same records
/// gives the same pooled rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub successes: u64,
    pub total: u64,
}

impl Count {
    pub fn new(successes: u64, total: u64) -> Self {
        debug_assert!(successes <= total);
        Self { successes, total }
    }

    pub fn record(&mut self, success: bool) {
        self.total += 1;
        self.successes += u64::from(success);
    }

    pub fn merge(self, other: Count) -> Count {
        Count {
            successes: self.successes + other.successes,
            total: self.total + other.total,
        }
    }

    /// Point estimate; `None` for an empty count.
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.successes as f64 / self.total as f64)
    }

    pub fn wilson95(&self) -> Result<(f64, f64)> {
        wilson(self.successes, self.total, Z95)
    }

    /// Rate with its 95% interval.
    pub fn summary(&self) -> Result<RateSummary> {
        let (lo, hi) = self.wilson95()?;
        Ok(RateSummary {
            n: self.total,
            successes: self.successes,
            rate: self.successes as f64 / self.total as f64,
            wilson_lo: lo,
            wilson_hi: hi,
        })
    }
}

impl std::iter::Sum for Count {
    fn sum<I: Iterator<Item = Count>>(iter: I) -> Count {
        iter.fold(Count::default(), Count::merge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n: u64,
    pub successes: u64,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// Mean and population standard deviation; `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fifty_of_hundred() {
        let (lo, hi) = wilson(50, 100, Z95).unwrap();
        assert_abs_diff_eq!(lo, 0.404, epsilon = 1e-3);
        assert_abs_diff_eq!(hi, 0.596, epsilon = 1e-3);
    }

    #[test]
    fn extremes_and_errors() {
        assert_eq!(wilson(10, 10, Z95).unwrap().1, 1.0);
        assert_eq!(wilson(0, 10, Z95).unwrap().0, 0.0);
        assert!(wilson(0, 0, Z95).is_err());
        assert!(wilson(3, 2, Z95).is_err());
    }

    #[test]
    fn interval_contains_estimate_and_shrinks() {
        let mut prev = f64::INFINITY;
        for n in [10u64, 20, 40, 80, 160, 320] {
            let k = 3 * n / 10;
            let (lo, hi) = wilson(k, n, Z95).unwrap();
            let p = k as f64 / n as f64;
            assert!(lo <= p && p <= hi);
            assert!(hi - lo < prev);
            prev = hi - lo;
        }
    }

    #[test]
    fn pooling_adds_counts() {
        let pooled: Count = [Count::new(3, 10), Count::new(7, 10)].into_iter().sum();
        assert_eq!(pooled, Count::new(10, 20));
        assert_eq!(pooled.rate(), Some(0.5));
        assert_eq!(Count::default().rate(), None);
    }
}
