//! Conformalized quantile regression, one quantile regression forest per
//! pose dimension. The per-dimension intervals multiply into a 6-D box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibrate_dims, check_alpha, interval_scores, IntervalBand};
use crate::checkpoint::Checkpoint;
use crate::conformal::CalibrationRecord;
use crate::data::{DataSplit, Dataset, MIN_CALIBRATION};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::qforest::{fit_forest, Forest, ForestConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqrConfig {
    pub alpha: f64,
    pub forest: ForestConfig,
}

impl Default for CqrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CqrModel {
    /// Miscoverage used for calibration.
    pub alpha: f64,
    /// Forest quantile levels, fixed at fit time to `alpha/2`, `1 - alpha/2`.
    pub levels: [f64; 2],
    pub forests: Vec<Forest>,
    pub calibration: Option<Vec<CalibrationRecord>>,
}

#[derive(Serialize, Deserialize)]
struct CqrMeta {
    kind: String,
    alpha: f64,
    levels: [f64; 2],
    dims: usize,
    calibration: Option<Vec<CalibrationRecord>>,
}

/// Fits one forest per label column on the training rows.
pub fn cqr_fit(ds: &Dataset, split: &DataSplit, cfg: &CqrConfig) -> Result<CqrModel> {
    check_alpha(cfg.alpha)?;
    let x = ds.x.select_rows(&split.train);
    let forests = (0..ds.y.cols())
        .into_par_iter()
        .map(|d| {
            let y: Vec<f64> = split.train.iter().map(|&i| ds.y.get(i, d)).collect();
            let fcfg = ForestConfig {
                seed: rng::derive_seed(cfg.forest.seed, d as u64),
                ..cfg.forest.clone()
            };
            fit_forest(&x, &y, &fcfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CqrModel {
        alpha: cfg.alpha,
        levels: [cfg.alpha / 2.0, 1.0 - cfg.alpha / 2.0],
        forests,
        calibration: None,
    })
}

impl CqrModel {
    /// Forest quantiles at the fitted levels for every row of `x`.
    pub fn raw_bounds(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let levels = self.levels;
        let rows: Vec<Vec<[f64; 2]>> = (0..x.rows())
            .into_par_iter()
            .map(|r| {
                self.forests
                    .iter()
                    .map(|f| f.predict_quantiles(x.row(r), &levels).map(|q| [q[0], q[1]]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let dims = self.forests.len();
        let mut lo = Matrix::zeros(x.rows(), dims);
        let mut hi = Matrix::zeros(x.rows(), dims);
        for (r, row) in rows.iter().enumerate() {
            for (d, q) in row.iter().enumerate() {
                lo.set(r, d, q[0]);
                hi.set(r, d, q[1]);
            }
        }
        Ok((lo, hi))
    }

    /// Per-dimension conformity scores on rows `idx` of `ds`.
    pub fn scores(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (lo, hi) = self.raw_bounds(&ds.x.select_rows(idx))?;
        interval_scores(&lo, &hi, &ds.y.select_rows(idx))
    }

    pub fn calibrate(&mut self, ds: &Dataset, cal: &[usize]) -> Result<()> {
        if cal.len() < MIN_CALIBRATION {
            return Err(Error::Validation(format!(
                "calibration set has {} samples, need at least {MIN_CALIBRATION}",
                cal.len()
            )));
        }
        self.calibration = Some(calibrate_dims(self.scores(ds, cal)?, self.alpha)?);
        Ok(())
    }

    pub fn q_cal(&self) -> Result<Vec<f64>> {
        let cal = self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::State("model is not calibrated".into()))?;
        Ok(cal.iter().map(CalibrationRecord::value).collect())
    }

    pub fn predict(&self, x: &Matrix) -> Result<IntervalBand> {
        let q = self.q_cal()?;
        let (lo, hi) = self.raw_bounds(x)?;
        IntervalBand::calibrated(lo, hi, q)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CqrMeta {
            kind: "cqr".into(),
            alpha: self.alpha,
            levels: self.levels,
            dims: self.forests.len(),
            calibration: self.calibration.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        for (d, f) in self.forests.iter().enumerate() {
            ck.merge_prefixed(
                &format!("forest{d}."),
                f.to_checkpoint(serde_json::Value::Null),
            );
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CqrMeta = ck.meta_as()?;
        if meta.kind != "cqr" {
            return Err(Error::Checkpoint(format!(
                "expected a cqr checkpoint, found {}",
                meta.kind
            )));
        }
        let forests = (0..meta.dims)
            .map(|d| {
                Forest::from_checkpoint(
                    &ck.extract_prefixed(&format!("forest{d}."), serde_json::Value::Null),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alpha: meta.alpha,
            levels: meta.levels,
            forests,
            calibration: meta.calibration,
        })
    }
}
