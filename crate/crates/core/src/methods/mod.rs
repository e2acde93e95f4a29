//! The four uncertainty estimators and the band/region types they produce.

pub mod cjp;
pub mod cqr;
pub mod csp;
pub mod mcqr;

use serde::{Deserialize, Serialize};

use crate::conformal::CalibrationRecord;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-dimension bounds for a batch of inputs, before and after the additive
/// conformal correction `[lo - q, hi + q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBand {
    pub raw_lower: Matrix,
    pub raw_upper: Matrix,
    pub lower: Matrix,
    pub upper: Matrix,
    /// Per-dimension correction; `+inf` marks an unbounded dimension.
    pub q_cal: Vec<f64>,
}

impl IntervalBand {
    /// Band with no correction applied.
    pub fn uncalibrated(lower: Matrix, upper: Matrix) -> Result<Self> {
        lower.check_same_shape(&upper, "interval band")?;
        let q_cal = vec![0.0; lower.cols()];
        Ok(Self {
            raw_lower: lower.clone(),
            raw_upper: upper.clone(),
            lower,
            upper,
            q_cal,
        })
    }

    /// Applies `[lo - q_d, hi + q_d]` per dimension `d`.
    pub fn calibrated(raw_lower: Matrix, raw_upper: Matrix, q_cal: Vec<f64>) -> Result<Self> {
        raw_lower.check_same_shape(&raw_upper, "interval band")?;
        if q_cal.len() != raw_lower.cols() {
            return Err(Error::Shape(format!(
                "{} corrections for {} dimensions",
                q_cal.len(),
                raw_lower.cols()
            )));
        }
        let mut lower = raw_lower.clone();
        let mut upper = raw_upper.clone();
        for r in 0..lower.rows() {
            for (d, q) in q_cal.iter().enumerate() {
                lower.set(r, d, raw_lower.get(r, d) - q);
                upper.set(r, d, raw_upper.get(r, d) + q);
            }
        }
        Ok(Self {
            raw_lower,
            raw_upper,
            lower,
            upper,
            q_cal,
        })
    }

    pub fn len(&self) -> usize {
        self.lower.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.lower.cols()
    }

    pub fn unbounded_dims(&self) -> Vec<bool> {
        self.q_cal.iter().map(|q| q.is_infinite()).collect()
    }

    pub fn is_unbounded(&self) -> bool {
        self.q_cal.iter().any(|q| q.is_infinite())
    }

    pub fn width(&self, r: usize, d: usize) -> f64 {
        self.upper.get(r, d) - self.lower.get(r, d)
    }

    pub fn raw_width(&self, r: usize, d: usize) -> f64 {
        self.raw_upper.get(r, d) - self.raw_lower.get(r, d)
    }

    pub fn contains(&self, r: usize, d: usize, y: f64) -> bool {
        self.lower.get(r, d) <= y && y <= self.upper.get(r, d)
    }

    /// Rows `idx` of the band.
    pub fn select(&self, idx: &[usize]) -> IntervalBand {
        IntervalBand {
            raw_lower: self.raw_lower.select_rows(idx),
            raw_upper: self.raw_upper.select_rows(idx),
            lower: self.lower.select_rows(idx),
            upper: self.upper.select_rows(idx),
            q_cal: self.q_cal.clone(),
        }
    }

    /// Axis-aligned box for row `r`.
    pub fn box_region(&self, r: usize) -> BoxRegion {
        BoxRegion {
            lower: self.lower.row(r).to_vec(),
            upper: self.upper.row(r).to_vec(),
        }
    }
}

/// Cartesian product of per-dimension intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// CQR-style scores `max(lo - y, y - hi)` per dimension for every row.
pub fn interval_scores(lower: &Matrix, upper: &Matrix, y: &Matrix) -> Result<Vec<Vec<f64>>> {
    lower.check_same_shape(y, "scores")?;
    upper.check_same_shape(y, "scores")?;
    Ok((0..y.cols())
        .map(|d| {
            (0..y.rows())
                .map(|r| conformity_score(lower.get(r, d), upper.get(r, d), y.get(r, d)))
                .collect()
        })
        .collect())
}

/// `max(lo - y, y - hi)`: negative strictly inside, zero on a bound.
pub fn conformity_score(lo: f64, hi: f64, y: f64) -> f64 {
    (lo - y).max(y - hi)
}

/// One calibration record per dimension at the inflated CQR level.
pub fn calibrate_dims(scores: Vec<Vec<f64>>, alpha: f64) -> Result<Vec<CalibrationRecord>> {
    scores
        .into_iter()
        .map(|s| CalibrationRecord::cqr(s, alpha))
        .collect()
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "alpha must be in (0, 1), got {alpha}"
        )))
    }
}

/// Training schedule shared by the network-based methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 60,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "hidden, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_match_definition() {
        assert_eq!(conformity_score(0.0, 1.0, 0.5), -0.5);
        assert_eq!(conformity_score(0.0, 1.0, 0.0), 0.0);
        assert!((conformity_score(0.0, 1.0, 1.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn calibration_shifts_bounds() {
        let lo = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let hi = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let band = IntervalBand::calibrated(lo.clone(), hi.clone(), vec![0.3]).unwrap();
        assert_eq!((band.lower.get(0, 0), band.upper.get(0, 0)), (-0.3, 1.3));
        let band = IntervalBand::calibrated(lo, hi, vec![-0.2]).unwrap();
        assert!(band.lower.get(0, 0) > 0.0 && band.upper.get(0, 0) < 1.0);
    }

    #[test]
    fn box_volume() {
        let unit = BoxRegion {
            lower: vec![0.0; 6],
            upper: vec![1.0; 6],
        };
        assert_eq!(unit.volume(), 1.0);
        let flat = BoxRegion {
            lower: vec![0.0; 6],
            upper: vec![1.0, 2.0, 0.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(flat.volume(), 0.0);
        let b = BoxRegion {
            lower: vec![-1.0, 0.5, 2.0],
            upper: vec![0.5, 0.75, 5.0],
        };
        let mut naive = 1.0;
        for d in 0..3 {
            naive *= b.upper[d] - b.lower[d];
        }
        assert_eq!(b.volume(), naive);
        assert!(b.contains(&[0.0, 0.6, 2.0]) && !b.contains(&[0.0, 0.8, 2.0]));
    }
}
