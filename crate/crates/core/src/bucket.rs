//! Discretization of reward-to-go values onto an evenly spaced grid of
//! bucket centers `b_i = v_min + i * (v_max - v_min) / (n - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    v_min: f64,
    v_max: f64,
    n_buckets: usize,
}

impl BucketSpec {
    pub fn new(v_min: f64, v_max: f64, n_buckets: usize) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite()) || v_min >= v_max {
            return Err(Error::InvalidConfig(format!(
                "bucket range must satisfy v_min < v_max, got [{v_min}, {v_max}]"
            )));
        }
        if n_buckets < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 buckets, got {n_buckets}"
            )));
        }
        Ok(Self {
            v_min,
            v_max,
            n_buckets,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn len(&self) -> usize {
        self.n_buckets
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_buckets - 1) as f64
    }

    /// Center of bucket `i`. The last center is pinned to `v_max` exactly.
    pub fn center(&self, i: usize) -> Result<f64> {
        if i >= self.n_buckets {
            return Err(Error::OutOfRange {
                index: i,
                len: self.n_buckets,
            });
        }
        Ok(self.center_unchecked(i))
    }

    pub(crate) fn center_unchecked(&self, i: usize) -> f64 {
        if i + 1 == self.n_buckets {
            self.v_max
        } else {
            self.v_min + i as f64 * self.width()
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_buckets).map(|i| self.center_unchecked(i)).collect()
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.v_min, self.v_max)
    }

    /// Index of the nearest center after clamping into range; equidistant
    /// values go to the higher index.
    pub fn discretize(&self, r: f64) -> usize {
        let r = self.clamp(r);
        let pos = (r - self.v_min) / self.width();
        let lo = (pos.floor() as usize).min(self.n_buckets - 1);
        if lo + 1 >= self.n_buckets {
            return lo;
        }
        let d_lo = (r - self.center_unchecked(lo)).abs();
        let d_hi = (self.center_unchecked(lo + 1) - r).abs();
        // Relative tolerance so that values printed as exact midpoints
        // (0.3 on a 0.2 grid) count as ties.
        let tol = 1e-9 * self.width();
        if d_hi <= d_lo + tol {
            lo + 1
        } else {
            lo
        }
    }
}

pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn discretize_rtg(r: f64, spec: &BucketSpec) -> usize {
    spec.discretize(r)
}

pub fn bucket_center(i: usize, spec: &BucketSpec) -> Result<f64> {
    spec.center(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[0.0, 0.0, 0.0], 0.99), vec![0.0, 0.0, 0.0]);
        assert_eq!(compute_rtg(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(compute_rtg(&[1.0, 2.0, 4.0], 0.5), vec![3.0, 4.0, 4.0]);
        assert!(compute_rtg(&[], 0.9).is_empty());
    }

    #[test]
    fn discretize_edges_and_ties() {
        let spec = BucketSpec::new(0.0, 10.0, 51).unwrap();
        assert_eq!(discretize_rtg(0.0, &spec), 0);
        assert_eq!(discretize_rtg(10.0, &spec), 50);
        assert_eq!(discretize_rtg(0.3, &spec), 2);
        assert_eq!(discretize_rtg(-4.0, &spec), 0);
        assert_eq!(discretize_rtg(12.5, &spec), 50);
    }

    #[test]
    fn centers() {
        let spec = BucketSpec::new(0.0, 1200.0, 80).unwrap();
        assert_eq!(bucket_center(0, &spec).unwrap(), 0.0);
        assert_eq!(bucket_center(79, &spec).unwrap(), 1200.0);
        assert!(matches!(
            bucket_center(80, &spec),
            Err(Error::OutOfRange { index: 80, len: 80 })
        ));
        let spec = BucketSpec::new(0.0, 10.0, 51).unwrap();
        assert!((bucket_center(1, &spec).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(BucketSpec::new(1.0, 1.0, 5).is_err());
        assert!(BucketSpec::new(0.0, 1.0, 1).is_err());
        assert!(BucketSpec::new(f64::NAN, 1.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn center_round_trip(v_min in -50.0f64..50.0, span in 0.01f64..100.0, n in 2usize..200, frac in 0.0f64..1.0) {
            let spec = BucketSpec::new(v_min, v_min + span, n).unwrap();
            let i = ((n as f64 - 1.0) * frac).round() as usize;
            let c = spec.center(i).unwrap();
            prop_assert_eq!(spec.center(spec.discretize(c)).unwrap(), c);
        }

        #[test]
        fn discretize_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, n in 2usize..60) {
            let spec = BucketSpec::new(-10.0, 10.0, n).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.discretize(lo) <= spec.discretize(hi));
        }

        #[test]
        fn rtg_recursion(rewards in proptest::collection::vec(-5.0f64..5.0, 0..40), gamma in 0.01f64..=1.0) {
            let z = compute_rtg(&rewards, gamma);
            for t in 0..rewards.len() {
                let next = if t + 1 < rewards.len() { z[t + 1] } else { 0.0 };
                prop_assert!((z[t] - rewards[t] - gamma * next).abs() < 1e-9);
            }
        }
    }
}
