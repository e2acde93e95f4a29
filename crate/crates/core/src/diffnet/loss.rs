//! Losses with analytic gradients.
//!
//! Every reduction is a mean over batch rows and output columns unless noted.
//! Indicator terms are treated as constants when differentiating (the usual
//! subgradient convention for pinball-type losses).

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Loss value with gradients w.r.t. a lower and an upper bound matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundLoss {
    pub value: f64,
    pub d_lower: Matrix,
    pub d_upper: Matrix,
}

fn check_alpha(name: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be in (0, 1), got {alpha}"
        )))
    }
}

fn check_nonempty(m: &Matrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("loss of an empty batch".into()));
    }
    Ok(())
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_loss(y: &Matrix, pred: &Matrix) -> Result<(f64, Matrix)> {
    y.check_same_shape(pred, "mse")?;
    check_nonempty(y)?;
    let n = y.as_slice().len() as f64;
    let mut grad = Matrix::zeros(y.rows(), y.cols());
    let mut sum = 0.0;
    for ((g, &a), &b) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(y.as_slice())
        .zip(pred.as_slice())
    {
        let d = b - a;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// KL divergence from `N(mu, exp(log_var))` to `N(0, I)`: batch mean of
/// `0.5 * sum_dim(mu^2 + sigma^2 - 1 - log sigma^2)`. Returns the value and
/// gradients w.r.t. `mu` and `log_var`.
pub fn kl_loss(mu: &Matrix, log_var: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    mu.check_same_shape(log_var, "kl")?;
    check_nonempty(mu)?;
    if !mu.is_finite() || !log_var.is_finite() {
        return Err(Error::InvalidInput(
            "kl of non-finite latent statistics".into(),
        ));
    }
    let n = mu.rows() as f64;
    let mut d_mu = Matrix::zeros(mu.rows(), mu.cols());
    let mut d_lv = Matrix::zeros(mu.rows(), mu.cols());
    let mut sum = 0.0;
    for i in 0..mu.as_slice().len() {
        let (m, lv) = (mu.as_slice()[i], log_var.as_slice()[i]);
        let e = lv.exp();
        // expm1 keeps the term non-negative and exact near zero.
        sum += 0.5 * (m * m + (lv.exp_m1() - lv));
        d_mu.as_mut_slice()[i] = m / n;
        d_lv.as_mut_slice()[i] = 0.5 * (e - 1.0) / n;
    }
    Ok((sum / n, d_mu, d_lv))
}

/// Quantile (pinball) loss at level `alpha` and its gradient w.r.t. `q`.
pub fn pinball_loss(y: &Matrix, q: &Matrix, alpha: f64) -> Result<(f64, Matrix)> {
    y.check_same_shape(q, "pinball")?;
    check_nonempty(y)?;
    check_alpha("alpha", alpha)?;
    let n = y.as_slice().len() as f64;
    let mut grad = Matrix::zeros(y.rows(), y.cols());
    let mut sum = 0.0;
    for ((g, &yv), &qv) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(y.as_slice())
        .zip(q.as_slice())
    {
        if yv > qv {
            sum += alpha * (yv - qv);
            *g = -alpha / n;
        } else if yv < qv {
            sum += (1.0 - alpha) * (qv - yv);
            *g = (1.0 - alpha) / n;
        }
    }
    Ok((sum / n, grad))
}

fn check_bounds(y: &Matrix, lower: &Matrix, upper: &Matrix, what: &str) -> Result<()> {
    y.check_same_shape(lower, what)?;
    y.check_same_shape(upper, what)?;
    check_nonempty(y)
}

/// Interval (Winkler) score:
/// `(hi - lo) + (2/alpha)(lo - y)[y < lo] + (2/alpha)(y - hi)[y > hi]`.
pub fn interval_score_loss(
    y: &Matrix,
    lower: &Matrix,
    upper: &Matrix,
    alpha: f64,
) -> Result<BoundLoss> {
    check_bounds(y, lower, upper, "interval score")?;
    check_alpha("alpha", alpha)?;
    let n = y.as_slice().len() as f64;
    let mut d_lower = Matrix::zeros(y.rows(), y.cols());
    let mut d_upper = Matrix::zeros(y.rows(), y.cols());
    let penalty = 2.0 / alpha;
    let mut sum = 0.0;
    for i in 0..y.as_slice().len() {
        let (yv, lo, hi) = (y.as_slice()[i], lower.as_slice()[i], upper.as_slice()[i]);
        if lo > hi {
            return Err(Error::Contract(format!(
                "crossed quantiles at element {i}: lower {lo} > upper {hi}"
            )));
        }
        let mut s = hi - lo;
        let mut dl = -1.0;
        let mut du = 1.0;
        if yv < lo {
            s += penalty * (lo - yv);
            dl += penalty;
        }
        if yv > hi {
            s += penalty * (yv - hi);
            du -= penalty;
        }
        sum += s;
        d_lower.as_mut_slice()[i] = dl / n;
        d_upper.as_mut_slice()[i] = du / n;
    }
    Ok(BoundLoss {
        value: sum / n,
        d_lower,
        d_upper,
    })
}

/// Per-column fraction of rows with `lower <= y <= upper`.
pub fn batch_coverage(y: &Matrix, lower: &Matrix, upper: &Matrix) -> Result<Vec<f64>> {
    check_bounds(y, lower, upper, "batch coverage")?;
    let mut cov = vec![0.0; y.cols()];
    for r in 0..y.rows() {
        for (d, c) in cov.iter_mut().enumerate() {
            let v = y.get(r, d);
            if lower.get(r, d) <= v && v <= upper.get(r, d) {
                *c += 1.0;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= y.rows() as f64);
    Ok(cov)
}

/// Adds one bound's calibration term for column `d` into `grad`:
/// `mean((y - b)[y > b])` when `push_up`, else `mean((b - y)[y < b])`.
fn calibration_term(
    y: &Matrix,
    b: &Matrix,
    d: usize,
    push_up: bool,
    scale: f64,
    grad: &mut Matrix,
) -> f64 {
    let n = y.rows() as f64;
    let mut sum = 0.0;
    for r in 0..y.rows() {
        let (yv, bv) = (y.get(r, d), b.get(r, d));
        if push_up && yv > bv {
            sum += yv - bv;
            grad.set(r, d, grad.get(r, d) - scale / n);
        } else if !push_up && yv < bv {
            sum += bv - yv;
            grad.set(r, d, grad.get(r, d) + scale / n);
        }
    }
    sum / n
}

/// Calibration objective. For each column `d` and each bound `b` in
/// `{lower, upper}`: `[cov_d < p] mean((y - b)[y > b]) + [cov_d > p] mean((b - y)[y < b])`,
/// summed over the two bounds and averaged over columns. `coverage` is the
/// per-column interval coverage of the batch, held constant.
pub fn cal_obj(
    y: &Matrix,
    lower: &Matrix,
    upper: &Matrix,
    p: f64,
    coverage: &[f64],
) -> Result<BoundLoss> {
    check_bounds(y, lower, upper, "cal_obj")?;
    check_alpha("p", p)?;
    if coverage.len() != y.cols() {
        return Err(Error::Shape(format!(
            "{} coverage values for {} columns",
            coverage.len(),
            y.cols()
        )));
    }
    let m = y.cols() as f64;
    let mut d_lower = Matrix::zeros(y.rows(), y.cols());
    let mut d_upper = Matrix::zeros(y.rows(), y.cols());
    let mut total = 0.0;
    for (d, &c) in coverage.iter().enumerate() {
        for push_up in [true, false] {
            let active = if push_up { c < p } else { c > p };
            if active {
                total += calibration_term(y, lower, d, push_up, 1.0 / m, &mut d_lower);
                total += calibration_term(y, upper, d, push_up, 1.0 / m, &mut d_upper);
            }
        }
    }
    Ok(BoundLoss {
        value: total / m,
        d_lower,
        d_upper,
    })
}

/// Per-bound variant of [`cal_obj`]: each bound is calibrated as a quantile
/// against its own level (`level_lower`, `level_upper`) using the fraction of
/// rows at or below it.
pub fn cal_obj_per_bound(
    y: &Matrix,
    lower: &Matrix,
    upper: &Matrix,
    level_lower: f64,
    level_upper: f64,
) -> Result<BoundLoss> {
    check_bounds(y, lower, upper, "cal_obj")?;
    check_alpha("lower level", level_lower)?;
    check_alpha("upper level", level_upper)?;
    let m = y.cols() as f64;
    let n = y.rows() as f64;
    let mut d_lower = Matrix::zeros(y.rows(), y.cols());
    let mut d_upper = Matrix::zeros(y.rows(), y.cols());
    let mut total = 0.0;
    for d in 0..y.cols() {
        for (b, level, grad) in [
            (lower, level_lower, &mut d_lower),
            (upper, level_upper, &mut d_upper),
        ] {
            let below = (0..y.rows())
                .filter(|&r| y.get(r, d) <= b.get(r, d))
                .count() as f64
                / n;
            if below < level {
                total += calibration_term(y, b, d, true, 1.0 / m, grad);
            } else if below > level {
                total += calibration_term(y, b, d, false, 1.0 / m, grad);
            }
        }
    }
    Ok(BoundLoss {
        value: total / m,
        d_lower,
        d_upper,
    })
}

/// Sharpness objective: mean of `upper - lower` when `p > 0.5`, else of `lower - upper`.
pub fn sharp_obj(lower: &Matrix, upper: &Matrix, p: f64) -> Result<BoundLoss> {
    lower.check_same_shape(upper, "sharp_obj")?;
    check_nonempty(lower)?;
    let n = lower.as_slice().len() as f64;
    let sign = if p <= 0.5 { -1.0 } else { 1.0 };
    let sum: f64 = lower
        .as_slice()
        .iter()
        .zip(upper.as_slice())
        .map(|(l, u)| u - l)
        .sum();
    Ok(BoundLoss {
        value: sign * sum / n,
        d_lower: Matrix::from_vec(
            lower.rows(),
            lower.cols(),
            vec![-sign / n; lower.as_slice().len()],
        )?,
        d_upper: Matrix::from_vec(
            lower.rows(),
            lower.cols(),
            vec![sign / n; lower.as_slice().len()],
        )?,
    })
}

/// `(1 - lambda) * cal + lambda * sharp`.
pub fn comcal_loss(cal: f64, sharp: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * cal + lambda * sharp)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "lambda must be in [0, 1], got {lambda}"
        )))
    }
}

/// Gradient-carrying [`comcal_loss`].
pub fn comcal(cal: &BoundLoss, sharp: &BoundLoss, lambda: f64) -> Result<BoundLoss> {
    let value = comcal_loss(cal.value, sharp.value, lambda)?;
    let mix = |a: &Matrix, b: &Matrix| {
        let mut out = a.map(|v| (1.0 - lambda) * v);
        out.as_mut_slice()
            .iter_mut()
            .zip(b.as_slice())
            .for_each(|(o, v)| *o += lambda * v);
        out
    };
    Ok(BoundLoss {
        value,
        d_lower: mix(&cal.d_lower, &sharp.d_lower),
        d_upper: mix(&cal.d_upper, &sharp.d_upper),
    })
}

const PROB_FLOOR: f64 = 1e-12;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows || rows == 0 {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!(
            "class {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true class (probabilities floored at
/// 1e-12), with its gradient w.r.t. `probs`.
pub fn cross_entropy_loss(labels: &[usize], probs: &Matrix) -> Result<(f64, Matrix)> {
    check_labels(labels, probs.rows(), probs.cols())?;
    let n = probs.rows() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut sum = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let p = probs.get(r, l);
        if p > PROB_FLOOR {
            sum -= p.ln();
            grad.set(r, l, -1.0 / (n * p));
        } else {
            sum -= PROB_FLOOR.ln();
        }
    }
    Ok((sum / n, grad))
}

/// Cross-entropy of `softmax(logits)` with gradient w.r.t. the logits,
/// `(softmax - onehot) / n`. Numerically safer than chaining the two.
pub fn softmax_cross_entropy(labels: &[usize], logits: &Matrix) -> Result<(f64, Matrix)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let n = logits.rows() as f64;
    let probs = super::softmax_rows(logits);
    let mut grad = probs.map(|v| v / n);
    let mut sum = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        sum -= probs.get(r, l).max(PROB_FLOOR).ln();
        grad.set(r, l, grad.get(r, l) - 1.0 / n);
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn s(v: f64) -> Matrix {
        m(1, 1, &[v])
    }

    #[test]
    fn mse_examples() {
        assert_eq!(
            mse_loss(&m(1, 2, &[0.0, 0.0]), &m(1, 2, &[0.0, 0.0]))
                .unwrap()
                .0,
            0.0
        );
        assert_eq!(
            mse_loss(&m(1, 2, &[0.0, 0.0]), &m(1, 2, &[1.0, 1.0]))
                .unwrap()
                .0,
            1.0
        );
        let y = m(3, 2, &[0.1, -0.4, 2.0, 0.3, 1.1, -1.0]);
        let p = m(3, 2, &[0.5, 0.4, 1.0, -0.3, 0.0, 0.2]);
        let mut naive = 0.0;
        for r in 0..3 {
            for c in 0..2 {
                naive += (y.get(r, c) - p.get(r, c)).powi(2);
            }
        }
        assert!((mse_loss(&y, &p).unwrap().0 - naive / 6.0).abs() < 1e-12);
        assert!(mse_loss(&y, &s(0.0)).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&s(0.0), &s(0.0)).unwrap().0, 0.0);
        assert_eq!(kl_loss(&s(1.0), &s(0.0)).unwrap().0, 0.5);
        let mut r = crate::rng::stream(1, 0);
        use rand::Rng as _;
        for _ in 0..10_000 {
            let v = kl_loss(&s(r.random_range(-3.0..3.0)), &s(r.random_range(-5.0..5.0)))
                .unwrap()
                .0;
            assert!(v >= 0.0);
        }
        assert!(kl_loss(&s(f64::NAN), &s(0.0)).is_err());
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(&s(1.0), &s(1.0), 0.9).unwrap().0, 0.0);
        assert!((pinball_loss(&s(1.0), &s(0.0), 0.9).unwrap().0 - 0.9).abs() < 1e-15);
        assert!(pinball_loss(&s(1.0), &s(0.0), 1.0).is_err());
    }

    #[test]
    fn pinball_minimized_by_empirical_quantile() {
        use rand::Rng as _;
        let mut r = crate::rng::stream(3, 0);
        let ys: Vec<f64> = (0..200).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = m(200, 1, &ys);
        for alpha in [0.1, 0.5, 0.9] {
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=4000 {
                let q = -2.0 + k as f64 * 0.001;
                let v = pinball_loss(&y, &m(200, 1, &[q; 200]), alpha).unwrap().0;
                if v < best.0 {
                    best = (v, q);
                }
            }
            let emp = crate::conformal::empirical_quantile(&ys, alpha).unwrap();
            assert!(
                (best.1 - emp).abs() < 0.02,
                "alpha {alpha}: grid {} vs quantile {emp}",
                best.1
            );
        }
    }

    #[test]
    fn interval_score_examples() {
        let v = |y| {
            interval_score_loss(&s(y), &s(0.0), &s(1.0), 0.1)
                .unwrap()
                .value
        };
        assert_eq!(v(0.5), 1.0);
        assert!((v(1.2) - 5.0).abs() < 1e-12);
        assert!(v(-0.3) > 1.0);
        assert!(matches!(
            interval_score_loss(&s(0.0), &s(1.0), &s(0.0), 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn coverage_counts() {
        let y = m(4, 1, &[0.0, 0.5, 1.0, 2.0]);
        let lo = m(4, 1, &[0.0; 4]);
        let hi = m(4, 1, &[1.0; 4]);
        assert_eq!(batch_coverage(&y, &lo, &hi).unwrap(), vec![0.75]);
        let hi2 = m(4, 1, &[0.7; 4]);
        assert_eq!(batch_coverage(&y, &lo, &hi2).unwrap(), vec![0.5]);
    }

    #[test]
    fn cal_obj_examples() {
        let y = m(2, 1, &[0.0, 1.0]);
        let b = m(2, 1, &[0.5, 0.5]);
        assert_eq!(cal_obj(&y, &b, &b, 0.9, &[0.9]).unwrap().value, 0.0);
        // Coverage 0 < p: each bound contributes mean((y - b)+) = 0.25.
        assert!((cal_obj(&y, &b, &b, 0.9, &[0.0]).unwrap().value - 0.5).abs() < 1e-15);
        // Everything covered: only the upper bound sits above labels.
        let y = m(2, 1, &[0.2, 0.6]);
        let lo = m(2, 1, &[0.0, 0.0]);
        let hi = m(2, 1, &[1.0, 1.0]);
        let v = cal_obj(&y, &lo, &hi, 0.9, &[1.0]).unwrap().value;
        assert!((v - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sharp_and_comcal_examples() {
        let lo = m(3, 1, &[0.0, 1.0, -1.0]);
        let hi = m(3, 1, &[1.0, 2.0, 0.0]);
        assert_eq!(sharp_obj(&lo, &hi, 0.9).unwrap().value, 1.0);
        assert_eq!(sharp_obj(&lo, &hi, 0.4).unwrap().value, -1.0);
        assert_eq!(comcal_loss(2.0, 3.0, 0.0).unwrap(), 2.0);
        assert_eq!(comcal_loss(2.0, 3.0, 1.0).unwrap(), 3.0);
        assert_eq!(comcal_loss(2.0, 3.0, 0.5).unwrap(), 2.5);
        assert!(comcal_loss(2.0, 3.0, 1.5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(
            cross_entropy_loss(&[1], &m(1, 2, &[0.0, 1.0])).unwrap().0,
            0.0
        );
        let v = cross_entropy_loss(&[2], &m(1, 4, &[0.25; 4])).unwrap().0;
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let v = cross_entropy_loss(&[0], &m(1, 2, &[0.0, 1.0])).unwrap().0;
        assert!((v + 1e-12f64.ln()).abs() < 1e-9);
        let logits = m(2, 3, &[0.1, 2.0, -1.0, 0.5, 0.5, 0.3]);
        let (a, _) = softmax_cross_entropy(&[1, 2], &logits).unwrap();
        let (b, _) = cross_entropy_loss(&[1, 2], &super::super::softmax_rows(&logits)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(cross_entropy_loss(&[3], &m(1, 2, &[0.5, 0.5])).is_err());
    }
}
