//! Datasets, exchangeable splits, simulation and feature-space noise.

mod io;
mod noise;
mod sim;

pub use io::{
    load_features_csv, load_pose_file, load_pose_records, parse_pose_records, render_pose_records,
    save_features_csv, save_pose_file, save_pose_records, PoseRecord,
};
pub use noise::{apply_noise, apply_noise_matrix, NoiseKind, NoiseSpec};
pub use sim::{
    simulate_bimodal, simulate_trajectory, BimodalConfig, DarkSegment, LightingProfile, SimConfig,
    Simulation,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose6D, Trajectory};
use crate::matrix::Matrix;
use crate::rng;

/// Smallest calibration set accepted by the calibration routines.
pub const MIN_CALIBRATION: usize = 20;

/// One feature vector and its pose label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Pose6D,
}

/// Features `x` (n x D), pose labels `y` (n x 6), timestamps, and optionally
/// the ground-truth noise scale each sample was generated with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub t: Vec<f64>,
    pub noise_scale: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, t: Vec<f64>) -> Result<Self> {
        if x.rows() != y.rows() || t.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels, {} timestamps",
                x.rows(),
                y.rows(),
                t.len()
            )));
        }
        if y.cols() != 6 {
            return Err(Error::Shape(format!(
                "labels must have 6 columns, got {}",
                y.cols()
            )));
        }
        if x.cols() == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Validation(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            t,
            noise_scale: None,
        })
    }

    /// Pairs a trajectory with a feature matrix by row order.
    pub fn from_trajectory(traj: &Trajectory, x: Matrix) -> Result<Self> {
        let rows: Vec<Vec<f64>> = traj.poses().iter().map(|p| p.to_array().to_vec()).collect();
        let y = Matrix::from_rows(&rows)?;
        Self::new(x, y, traj.timestamps())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> Sample {
        let y = self.y.row(i);
        Sample {
            features: self.x.row(i).to_vec(),
            label: Pose6D::from_array([y[0], y[1], y[2], y[3], y[4], y[5]]),
        }
    }

    /// Sub-dataset restricted to `idx`.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            noise_scale: self
                .noise_scale
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.t[a].total_cmp(&self.t[b]));
        Trajectory::new(
            order
                .iter()
                .map(|&i| (self.t[i], self.sample(i).label))
                .collect(),
        )
    }
}

/// Fractions of the dataset assigned to training, calibration and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 2000 / 500 / 1000 on a 3500-sample dataset.
    fn default() -> Self {
        Self {
            train: 4.0 / 7.0,
            cal: 1.0 / 7.0,
            test: 2.0 / 7.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    pub fn require_calibration(&self, min: usize) -> Result<()> {
        if self.cal.len() < min {
            return Err(Error::Validation(format!(
                "calibration set has {} samples, need at least {min}",
                self.cal.len()
            )));
        }
        Ok(())
    }
}

/// Uniformly random partition of `0..n`, deterministic in `seed`.
///
/// Part sizes are `floor(n * fraction)`. When the fractions sum to one the
/// rounding remainder goes to the training part, so the parts cover `0..n`;
/// otherwise the unassigned tail of the permutation is left out.
pub fn split_dataset(n: usize, fractions: SplitFractions, seed: u64) -> Result<DataSplit> {
    let f = [fractions.train, fractions.cal, fractions.test];
    if f.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Validation(format!(
            "split fractions must be positive, got {f:?}"
        )));
    }
    let total: f64 = f.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions sum to {total} > 1"
        )));
    }
    let mut sizes: Vec<usize> = f
        .iter()
        .map(|v| (n as f64 * v + 1e-9).floor() as usize)
        .collect();
    if (total - 1.0).abs() <= 1e-9 {
        sizes[0] = n - sizes[1] - sizes[2];
    }
    if sizes.contains(&0) {
        return Err(Error::Validation(format!(
            "dataset of {n} samples too small for split {f:?}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let (train, rest) = perm.split_at(sizes[0]);
    let (cal, rest) = rest.split_at(sizes[1]);
    Ok(DataSplit {
        train: train.to_vec(),
        cal: cal.to_vec(),
        test: rest[..sizes[2]].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split_dataset(
            10,
            SplitFractions {
                train: 0.6,
                cal: 0.2,
                test: 0.2,
            },
            3,
        )
        .unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.cal)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(
            s,
            split_dataset(
                10,
                SplitFractions {
                    train: 0.6,
                    cal: 0.2,
                    test: 0.2
                },
                3
            )
            .unwrap()
        );
        assert_ne!(
            s,
            split_dataset(
                10,
                SplitFractions {
                    train: 0.6,
                    cal: 0.2,
                    test: 0.2
                },
                4
            )
            .unwrap()
        );
    }

    #[test]
    fn default_split_is_2000_500_1000() {
        let s = split_dataset(3500, SplitFractions::default(), 0).unwrap();
        assert_eq!(
            (s.train.len(), s.cal.len(), s.test.len()),
            (2000, 500, 1000)
        );
        assert!(s.require_calibration(MIN_CALIBRATION).is_ok());
    }

    #[test]
    fn split_rejects_bad_input() {
        let bad = |t, c, e| {
            split_dataset(
                100,
                SplitFractions {
                    train: t,
                    cal: c,
                    test: e,
                },
                0,
            )
        };
        assert!(bad(0.8, 0.3, 0.1).is_err());
        assert!(bad(0.5, 0.0, 0.5).is_err());
        assert!(split_dataset(
            3,
            SplitFractions {
                train: 0.5,
                cal: 0.2,
                test: 0.3
            },
            0
        )
        .is_err());
        let s = split_dataset(
            10,
            SplitFractions {
                train: 0.6,
                cal: 0.2,
                test: 0.2,
            },
            0,
        )
        .unwrap();
        assert!(s.require_calibration(MIN_CALIBRATION).is_err());
    }

    #[test]
    fn partial_fractions_leave_tail_out() {
        let s = split_dataset(
            100,
            SplitFractions {
                train: 0.5,
                cal: 0.2,
                test: 0.1,
            },
            1,
        )
        .unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (50, 20, 10));
    }
}
