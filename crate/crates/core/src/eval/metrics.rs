//! Coverage, interval score and region volume.

use serde::{Deserialize, Serialize};

use crate::diffnet::loss;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::methods::csp::SetRegion;
use crate::methods::mcqr::{uniform_in_box, BallUnionRegion};
use crate::methods::{BoxRegion, IntervalBand};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    /// Fraction of test labels inside, per dimension.
    pub per_dim: Vec<f64>,
    /// Fraction inside every dimension at once (or inside the joint region).
    pub joint: f64,
}

/// Coverage from membership flags `inside[sample][dim]`. `joint` overrides
/// the all-dimensions conjunction when the method has a genuinely joint region.
pub fn coverage_metrics(inside: &[Vec<bool>], joint: Option<&[bool]>) -> Result<CoverageMetrics> {
    let n = inside.len();
    if n == 0 {
        return Err(Error::InvalidInput("coverage of an empty test set".into()));
    }
    let dims = inside[0].len();
    if inside.iter().any(|r| r.len() != dims) {
        return Err(Error::Shape("ragged membership flags".into()));
    }
    if joint.is_some_and(|j| j.len() != n) {
        return Err(Error::Shape(format!(
            "{} joint flags for {n} samples",
            joint.map_or(0, <[bool]>::len)
        )));
    }
    let per_dim = (0..dims)
        .map(|d| inside.iter().filter(|r| r[d]).count() as f64 / n as f64)
        .collect();
    let joint_hits = match joint {
        Some(j) => j.iter().filter(|&&v| v).count(),
        None => inside.iter().filter(|r| r.iter().all(|&v| v)).count(),
    };
    Ok(CoverageMetrics {
        per_dim,
        joint: joint_hits as f64 / n as f64,
    })
}

/// Membership flags of `y` in an interval band.
pub fn band_membership(band: &IntervalBand, y: &Matrix) -> Result<Vec<Vec<bool>>> {
    band.lower.check_same_shape(y, "band coverage")?;
    Ok((0..y.rows())
        .map(|r| {
            (0..y.cols())
                .map(|d| band.contains(r, d, y.get(r, d)))
                .collect()
        })
        .collect())
}

pub fn band_coverage(band: &IntervalBand, y: &Matrix) -> Result<CoverageMetrics> {
    coverage_metrics(&band_membership(band, y)?, None)
}

/// Mean width per dimension.
pub fn mean_widths(band: &IntervalBand) -> Vec<f64> {
    (0..band.dims())
        .map(|d| (0..band.len()).map(|r| band.width(r, d)).sum::<f64>() / band.len().max(1) as f64)
        .collect()
}

/// Interval score of the band, computed by the training loss itself.
/// `None` when a bound pair is crossed (a negative correction wider than
/// the raw interval), where the score is undefined.
pub fn mean_interval_score(band: &IntervalBand, y: &Matrix, alpha: f64) -> Result<Option<f64>> {
    match loss::interval_score_loss(y, &band.lower, &band.upper, alpha) {
        Ok(l) => Ok(Some(l.value)),
        Err(Error::Contract(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// A region whose volume can be measured.
#[derive(Debug, Clone)]
pub enum Region<'a> {
    Box(&'a BoxRegion),
    Sets(&'a SetRegion),
    Balls(&'a BallUnionRegion),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub value: f64,
    /// Zero for exact volumes.
    pub std_error: f64,
    pub unbounded: bool,
}

impl VolumeEstimate {
    fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
            unbounded: value.is_infinite(),
        }
    }
}

/// Exact for boxes and bin products; Monte Carlo over the bounding box for
/// ball unions, with the binomial standard error.
pub fn volume_estimate(region: Region<'_>, samples: usize, seed: u64) -> Result<VolumeEstimate> {
    match region {
        Region::Box(b) => Ok(VolumeEstimate::exact(b.volume())),
        Region::Sets(s) => Ok(VolumeEstimate::exact(s.volume())),
        Region::Balls(b) => {
            if b.is_unbounded() {
                return Ok(VolumeEstimate {
                    value: f64::INFINITY,
                    std_error: 0.0,
                    unbounded: true,
                });
            }
            if samples == 0 {
                return Err(Error::InvalidInput(
                    "Monte Carlo volume needs at least one sample".into(),
                ));
            }
            let (lo, hi) = b.bounds();
            let box_volume: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).product();
            if box_volume == 0.0 {
                return Ok(VolumeEstimate::exact(0.0));
            }
            let mut r = rng::stream(seed, streams::VOLUME);
            let hits = (0..samples)
                .filter(|_| b.contains(&uniform_in_box(&mut r, &lo, &hi)))
                .count();
            let f = hits as f64 / samples as f64;
            Ok(VolumeEstimate {
                value: box_volume * f,
                std_error: box_volume * (f * (1.0 - f) / samples as f64).sqrt(),
                unbounded: false,
            })
        }
    }
}

/// Mean of the per-point volumes, with the standard error of that mean
/// propagated from the per-point Monte Carlo errors.
pub fn mean_volume(estimates: &[VolumeEstimate]) -> VolumeEstimate {
    let n = estimates.len().max(1) as f64;
    let value = estimates.iter().map(|e| e.value).sum::<f64>() / n;
    let std_error = estimates
        .iter()
        .map(|e| e.std_error * e.std_error)
        .sum::<f64>()
        .sqrt()
        / n;
    VolumeEstimate {
        value,
        std_error,
        unbounded: estimates.iter().any(|e| e.unbounded),
    }
}
