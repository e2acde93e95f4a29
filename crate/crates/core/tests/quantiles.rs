//! Quantile conventions against counting oracles, and the finite-sample
//! coverage of split-conformal corrections on exchangeable scores.

use cvo::conformal::{empirical_quantile, CalibrationRecord};
use cvo::qforest::weighted_quantile;
use proptest::prelude::*;
use rand::SeedableRng as _;

/// Smallest value `v` with `den * #{x <= v} >= num * n`, by counting in integers.
fn counting_quantile(values: &[i64], num: u64, den: u64) -> Option<i64> {
    let n = values.len() as u64;
    let mut candidates = values.to_vec();
    candidates.sort_unstable();
    candidates
        .into_iter()
        .find(|&v| den * values.iter().filter(|&&x| x <= v).count() as u64 >= num * n)
}

/// Smallest value whose cumulative integer weight reaches `num / den` of the total.
fn counting_weighted_quantile(values: &[i64], weights: &[u64], num: u64, den: u64) -> i64 {
    let total: u64 = weights.iter().sum();
    let mut candidates = values.to_vec();
    candidates.sort_unstable();
    candidates
        .into_iter()
        .find(|&v| {
            den * values
                .iter()
                .zip(weights)
                .filter(|(&x, _)| x <= v)
                .map(|(_, &w)| w)
                .sum::<u64>()
                >= num * total
        })
        .expect("level at most one always has an answer")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn empirical_quantile_matches_counting(values in prop::collection::vec(-5i64..5, 1..40), num in 1u64..=120) {
        let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let got = empirical_quantile(&floats, num as f64 / 100.0).unwrap();
        match counting_quantile(&values, num, 100) {
            Some(v) => prop_assert_eq!(got, v as f64),
            None => prop_assert!(got == f64::INFINITY),
        }
    }

    #[test]
    fn weighted_quantile_matches_counting(
        pairs in prop::collection::vec((-5i64..5, 1u64..6), 1..30),
        num in 1u64..=100,
    ) {
        let (values, weights): (Vec<i64>, Vec<u64>) = pairs.into_iter().unzip();
        let fv: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let fw: Vec<f64> = weights.iter().map(|&w| w as f64).collect();
        let got = weighted_quantile(&fv, &fw, num as f64 / 100.0);
        prop_assert_eq!(got, counting_weighted_quantile(&values, &weights, num, 100) as f64);
    }

    #[test]
    fn unit_weights_agree_with_plain_quantile(values in prop::collection::vec(-3i64..3, 1..30), num in 1u64..=100) {
        let fv: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let ones = vec![1.0; fv.len()];
        prop_assert_eq!(weighted_quantile(&fv, &ones, num as f64 / 100.0), empirical_quantile(&fv, num as f64 / 100.0).unwrap());
    }
}

/// With `n` exchangeable calibration scores, a fresh score falls at or below
/// the correction with probability in `[1 - alpha, 1 - alpha + 1/(n + 1)]`.
#[test]
fn conformal_correction_has_finite_sample_coverage() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for (n, alpha) in [(19, 0.1), (50, 0.1), (99, 0.05), (30, 0.2)] {
        let trials = 20_000;
        let mut hits = 0;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let q = CalibrationRecord::cqr(scores, alpha).unwrap().value();
            if rng.random::<f64>() <= q {
                hits += 1;
            }
        }
        let coverage = hits as f64 / trials as f64;
        // Four binomial standard errors of slack on each side.
        let se = 4.0 * (0.25 / trials as f64).sqrt();
        let (lo, hi) = (1.0 - alpha, 1.0 - alpha + 1.0 / (n as f64 + 1.0));
        assert!(
            coverage >= lo - se && coverage <= hi + se,
            "n={n} alpha={alpha}: coverage {coverage} outside [{lo}, {hi}]"
        );
    }
}

#[test]
fn too_few_scores_give_unbounded_correction() {
    // (1 - 0.1)(1 + 1/5) = 1.08 > 1.
    let rec = CalibrationRecord::cqr(vec![0.1, 0.2, 0.3, 0.4, 0.5], 0.1).unwrap();
    assert!(rec.is_unbounded());
    assert_eq!(rec.value(), f64::INFINITY);
}
