//! Dynamic time warping with absolute-difference local cost.

use crate::error::{Error, Result};
use crate::model::IntervalSequence;

pub fn dtw_distance(a: &IntervalSequence, b: &IntervalSequence) -> Result<f64> {
    dtw(&a.intervals, &b.intervals)
}

/// Unconstrained DTW over match, insertion and deletion steps.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    // Two rolling rows over `b`; the shorter series indexes the columns.
    let (rows, cols) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![f64::INFINITY; cols.len() + 1];
    let mut curr = vec![f64::INFINITY; cols.len() + 1];
    prev[0] = 0.0;
    for &x in rows {
        curr[0] = f64::INFINITY;
        for (j, &y) in cols.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(curr[j]);
            curr[j + 1] = (x - y).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[cols.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential-time recursion over every warping path.
    fn oracle(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
            let cost = (a[i] - b[j]).abs();
            if i == 0 && j == 0 {
                return cost;
            }
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(go(a, b, i - 1, j - 1));
            }
            if i > 0 {
                best = best.min(go(a, b, i - 1, j));
            }
            if j > 0 {
                best = best.min(go(a, b, i, j - 1));
            }
            cost + best
        }
        go(a, b, a.len() - 1, b.len() - 1)
    }

    #[test]
    fn identical_is_zero() {
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn warped_example() {
        assert_eq!(oracle(&[1.0, 2.0, 3.0], &[1.0, 3.0]), 1.0);
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(dtw(&[], &[1.0]), Err(Error::EmptySequence)));
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_symmetric(
            a in proptest::collection::vec(0u8..4, 1..=5),
            b in proptest::collection::vec(0u8..4, 1..=5),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = dtw(&a, &b).unwrap();
            prop_assert_eq!(d, oracle(&a, &b));
            prop_assert_eq!(d, dtw(&b, &a).unwrap());
            prop_assert!(d >= 0.0);
            if a == b {
                prop_assert_eq!(d, 0.0);
            }
        }
    }
}
