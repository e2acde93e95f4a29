//! Split-conformal calibration primitives.
//!
//! All quantiles use one order-statistic convention: the value at level `l`
//! of `n` scores is the `ceil(l * n)`-th smallest. Levels above one have no
//! finite answer and map to `+inf`, which callers surface as an unbounded
//! interval rather than an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for products like `0.9 * 10` that should be integers.
const RANK_EPS: f64 = 1e-9;

/// Finite-sample inflated level `(1 - alpha)(1 + 1/n)` used by quantile-regression style calibration.
pub fn cqr_level(n: usize, alpha: f64) -> f64 {
    (1.0 - alpha) * (n as f64 + 1.0) / n as f64
}

/// Level `ceil((n + 1)(1 - alpha)) / n` used for classification scores.
pub fn csp_level(n: usize, alpha: f64) -> f64 {
    ((n as f64 + 1.0) * (1.0 - alpha) - RANK_EPS).ceil() / n as f64
}

/// 1-based rank `ceil(level * n)`, or `None` when the level exceeds one.
pub fn quantile_rank(n: usize, level: f64) -> Option<usize> {
    let k = (level * n as f64 - RANK_EPS).ceil().max(1.0);
    if k > n as f64 {
        None
    } else {
        Some(k as usize)
    }
}

/// Empirical quantile at `level`; `+inf` when `level * n` exceeds `n`.
pub fn empirical_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "empirical quantile of an empty list".into(),
        ));
    }
    if !(level > 0.0) {
        return Err(Error::InvalidInput(format!(
            "quantile level must be positive, got {level}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("quantile of non-finite values".into()));
    }
    let Some(k) = quantile_rank(values.len(), level) else {
        return Ok(f64::INFINITY);
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "alpha must be in (0, 1), got {alpha}"
        )))
    }
}

/// Calibration scores and the correction derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
    pub level: f64,
    /// `None` when the level exceeds one (unbounded correction).
    pub correction: Option<f64>,
}

impl CalibrationRecord {
    /// Correction at [`cqr_level`].
    pub fn cqr(scores: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let n = scores.len();
        let level = cqr_level(n.max(1), alpha);
        Self::at_level(scores, alpha, level)
    }

    /// Correction at [`csp_level`].
    pub fn csp(scores: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let n = scores.len();
        let level = csp_level(n.max(1), alpha);
        Self::at_level(scores, alpha, level)
    }

    fn at_level(scores: Vec<f64>, alpha: f64, level: f64) -> Result<Self> {
        let q = empirical_quantile(&scores, level)?;
        Ok(Self {
            n: scores.len(),
            scores,
            alpha,
            level,
            correction: q.is_finite().then_some(q),
        })
    }

    pub fn is_unbounded(&self) -> bool {
        self.correction.is_none()
    }

    /// Correction with `+inf` standing for unbounded.
    pub fn value(&self) -> f64 {
        self.correction.unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: smallest v in the list with #{x <= v} >= level * n.
    fn oracle(values: &[f64], level: f64) -> f64 {
        let n = values.len() as f64;
        if level * n > n + 1e-9 {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        for &v in values {
            let count = values.iter().filter(|&&x| x <= v).count() as f64;
            if count >= level * n - 1e-9 && v < best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn constant_list() {
        for level in [0.01, 0.5, 1.0] {
            assert_eq!(empirical_quantile(&[5.0, 5.0, 5.0], level).unwrap(), 5.0);
        }
    }

    #[test]
    fn tiny_calibration_is_unbounded() {
        let level = cqr_level(5, 0.1);
        assert!((level - 1.08).abs() < 1e-12);
        assert_eq!(
            empirical_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], level).unwrap(),
            f64::INFINITY
        );
        let rec = CalibrationRecord::cqr(vec![1.0, 2.0, 3.0, 4.0, 5.0], 0.1).unwrap();
        assert!(rec.is_unbounded());
    }

    #[test]
    fn nine_scores_at_level_one() {
        let scores = [-0.5, 0.2, 0.1, -0.1, 0.3, -0.2, 0.0, 0.15, 0.25];
        let level = cqr_level(9, 0.1);
        assert!((level - 1.0).abs() < 1e-12);
        assert_eq!(empirical_quantile(&scores, level).unwrap(), 0.3);
        assert_eq!(oracle(&scores, level), 0.3);
    }

    #[test]
    fn levels() {
        assert!((cqr_level(500, 0.1) - 0.9018).abs() < 1e-12);
        assert!((cqr_level(1_000_000, 0.1) - 0.9).abs() < 1e-5);
        assert!((csp_level(99, 0.1) - 90.0 / 99.0).abs() < 1e-12);
        assert!((csp_level(9, 0.5) - 5.0 / 9.0).abs() < 1e-12);
        for n in 1..200 {
            for a in [0.01, 0.05, 0.1, 0.2, 0.5] {
                if (n as f64 + 1.0) * (1.0 - a) <= n as f64 {
                    assert!(csp_level(n, a) <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn errors() {
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 0.0).is_err());
        assert!(empirical_quantile(&[f64::NAN], 0.5).is_err());
        assert!(CalibrationRecord::cqr(vec![1.0; 30], 1.5).is_err());
    }

    #[test]
    fn exhaustive_small_lists_match_oracle() {
        // Every list over a 3-symbol alphabet up to length 7, plus fixed longer lists.
        let alphabet = [-1.0, 0.0, 2.5];
        for len in 1..=7usize {
            for code in 0..3usize.pow(len as u32) {
                let mut c = code;
                let values: Vec<f64> = (0..len)
                    .map(|_| {
                        let v = alphabet[c % 3];
                        c /= 3;
                        v
                    })
                    .collect();
                for l in 1..=100 {
                    let level = l as f64 / 100.0;
                    assert_eq!(
                        empirical_quantile(&values, level).unwrap(),
                        oracle(&values, level)
                    );
                }
            }
        }
    }

    #[test]
    fn monotone_in_level_and_alpha() {
        let values: Vec<f64> = (0..37).map(|i| ((i * 17) % 37) as f64 * 0.1).collect();
        let mut prev = f64::NEG_INFINITY;
        for l in 1..=110 {
            let q = empirical_quantile(&values, l as f64 / 100.0).unwrap();
            assert!(q >= prev);
            prev = q;
        }
        for n in [10, 50, 500] {
            let alphas = [0.01, 0.05, 0.1, 0.2, 0.4];
            for w in alphas.windows(2) {
                assert!(cqr_level(n, w[1]) <= cqr_level(n, w[0]));
                assert!(csp_level(n, w[1]) <= csp_level(n, w[0]));
            }
        }
    }
}
