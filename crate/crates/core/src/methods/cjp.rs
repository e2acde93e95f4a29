//! Joint prediction: one network emits the pose and both interval bounds.
//!
//! Inputs pass through a trunk into a Gaussian latent; a latent sample feeds
//! the decoder, whose `3 * dims` outputs are the mean `ŷ` and two raw offset
//! heads. Offsets go through softplus, so `Q_l = ŷ - s_l <= ŷ <= ŷ + s_u = Q_h`
//! holds by construction. Training minimizes
//! `MSE + KL + interval score + COMCAL`, with the label terms summed over pose
//! dimensions and batch coverage driving the calibration term. A split-conformal correction can be applied afterwards.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{calibrate_dims, check_alpha, interval_scores, IntervalBand, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::conformal::CalibrationRecord;
use crate::data::{DataSplit, Dataset, MIN_CALIBRATION};
use crate::diffnet::gradcheck::{
    numeric_gradient, relative_error, run_check, GradCheck, KINK_MARGIN, STEP,
};
use crate::diffnet::loss::{self, BoundLoss};
use crate::diffnet::{adam_step, batches, AdamState, Mode, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Standardizer};
use crate::rng::{self, streams};

/// How the interval score turns the percentile pair into a miscoverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    /// One score at `alpha = alpha_low + (1 - alpha_high)`.
    Central,
    /// Mean of the scores at `alpha_low` and at `1 - alpha_high`.
    PerPercentile,
}

/// Which calibration objective drives the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalMode {
    /// Both bounds move according to interval coverage versus `p`.
    Interval,
    /// Each bound is calibrated as a quantile at its own percentile.
    PerBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CjpConfig {
    pub lambda: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Coverage target for the calibration objective.
    pub coverage: f64,
    pub latent_dim: usize,
    pub interval_mode: IntervalMode,
    pub cal_mode: CalMode,
    /// Apply a split-conformal correction on the calibration rows after training.
    pub posthoc: bool,
    pub train: TrainConfig,
}

impl Default for CjpConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha_low: 0.05,
            alpha_high: 0.95,
            coverage: 0.9,
            latent_dim: 3,
            interval_mode: IntervalMode::Central,
            cal_mode: CalMode::Interval,
            posthoc: true,
            train: TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            },
        }
    }
}

impl CjpConfig {
    pub fn validate(&self) -> Result<()> {
        loss::check_lambda(self.lambda).map_err(|e| Error::Validation(e.to_string()))?;
        if !(0.0 < self.alpha_low && self.alpha_low < self.alpha_high && self.alpha_high < 1.0) {
            return Err(Error::Validation(format!(
                "need 0 < alpha_low < alpha_high < 1, got {} and {}",
                self.alpha_low, self.alpha_high
            )));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::Validation(format!(
                "coverage target must be in (0, 1), got {}",
                self.coverage
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Validation(
                "latent dimension must be positive".into(),
            ));
        }
        self.train.validate()
    }

    /// Total miscoverage of the central interval, rounded to 12 decimals so
    /// that 0.05 + (1 - 0.95) reads as 0.1 and compares equal to other methods' alpha.
    pub fn alpha(&self) -> f64 {
        ((self.alpha_low + (1.0 - self.alpha_high)) * 1e12).round() / 1e12
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Inverse of softplus, for building outputs with chosen offsets.
pub fn softplus_inverse(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Splits raw decoder output into `(ŷ, Q_l, Q_h)`.
pub fn split_heads(out: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if !out.cols().is_multiple_of(3) {
        return Err(Error::Shape(format!(
            "{} outputs are not three heads",
            out.cols()
        )));
    }
    let dims = out.cols() / 3;
    let mean = out.columns(0, dims);
    let mut lower = mean.clone();
    let mut upper = mean.clone();
    for r in 0..out.rows() {
        for d in 0..dims {
            lower.set(r, d, mean.get(r, d) - softplus(out.get(r, dims + d)));
            upper.set(r, d, mean.get(r, d) + softplus(out.get(r, 2 * dims + d)));
        }
    }
    Ok((mean, lower, upper))
}

/// The four logged terms of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub kl: f64,
    pub interval_score: f64,
    pub cal: f64,
    pub sharp: f64,
    pub comcal: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.mse + self.kl + self.interval_score + self.comcal
    }
}

/// Loss value, its terms, and gradients w.r.t. the raw output and latent statistics.
#[derive(Debug, Clone)]
pub struct CjpLoss {
    pub terms: LossTerms,
    pub coverage: Vec<f64>,
    pub d_out: Matrix,
    pub d_mu: Matrix,
    pub d_log_var: Matrix,
}

fn interval_score(cfg: &CjpConfig, y: &Matrix, lo: &Matrix, hi: &Matrix) -> Result<BoundLoss> {
    match cfg.interval_mode {
        IntervalMode::Central => loss::interval_score_loss(y, lo, hi, cfg.alpha()),
        IntervalMode::PerPercentile => {
            let a = loss::interval_score_loss(y, lo, hi, cfg.alpha_low)?;
            let b = loss::interval_score_loss(y, lo, hi, 1.0 - cfg.alpha_high)?;
            let avg = |p: &Matrix, q: &Matrix| {
                let mut m = p.clone();
                m.as_mut_slice()
                    .iter_mut()
                    .zip(q.as_slice())
                    .for_each(|(v, w)| *v = 0.5 * (*v + w));
                m
            };
            Ok(BoundLoss {
                value: 0.5 * (a.value + b.value),
                d_lower: avg(&a.d_lower, &b.d_lower),
                d_upper: avg(&a.d_upper, &b.d_upper),
            })
        }
    }
}

/// Full training objective for one batch. `out` is the raw decoder output
/// (`3 * dims` columns); `mu`/`log_var` are the latent statistics.
pub fn cjp_total_loss(
    cfg: &CjpConfig,
    y: &Matrix,
    out: &Matrix,
    mu: &Matrix,
    log_var: &Matrix,
) -> Result<CjpLoss> {
    let dims = y.cols();
    if out.cols() != 3 * dims || out.rows() != y.rows() {
        return Err(Error::Shape(format!(
            "output {}x{} for labels {}x{dims}",
            out.rows(),
            out.cols(),
            y.rows()
        )));
    }
    let (mean, lo, hi) = split_heads(out)?;
    let (mse, d_mean) = loss::mse_loss(y, &mean)?;
    let (kl, d_mu, d_log_var) = loss::kl_loss(mu, log_var)?;
    let is = interval_score(cfg, y, &lo, &hi)?;
    let coverage = loss::batch_coverage(y, &lo, &hi)?;
    let cal = match cfg.cal_mode {
        CalMode::Interval => loss::cal_obj(y, &lo, &hi, cfg.coverage, &coverage)?,
        CalMode::PerBound => loss::cal_obj_per_bound(y, &lo, &hi, cfg.alpha_low, cfg.alpha_high)?,
    };
    let sharp = loss::sharp_obj(&lo, &hi, cfg.coverage)?;
    let mix = loss::comcal(&cal, &sharp, cfg.lambda)?;
    // Per-dimension batch means are summed over the label dimensions; the
    // loss helpers average over columns, so scale by the column count.
    let k = dims as f64;
    let terms = LossTerms {
        mse: k * mse,
        kl,
        interval_score: k * is.value,
        cal: k * cal.value,
        sharp: k * sharp.value,
        comcal: k * mix.value,
    };
    if !terms.total().is_finite() {
        return Err(Error::Diverged(format!("non-finite loss terms {terms:?}")));
    }
    let mut d_out = Matrix::zeros(out.rows(), out.cols());
    for r in 0..out.rows() {
        for d in 0..dims {
            let g_lo = k * (is.d_lower.get(r, d) + mix.d_lower.get(r, d));
            let g_hi = k * (is.d_upper.get(r, d) + mix.d_upper.get(r, d));
            d_out.set(r, d, k * d_mean.get(r, d) + g_lo + g_hi);
            d_out.set(r, dims + d, -g_lo * sigmoid(out.get(r, dims + d)));
            d_out.set(r, 2 * dims + d, g_hi * sigmoid(out.get(r, 2 * dims + d)));
        }
    }
    Ok(CjpLoss {
        terms,
        coverage,
        d_out,
        d_mu,
        d_log_var,
    })
}

/// Trunk, Gaussian latent, then a decoder fed by the latent sample only.
pub fn cjp_spec(input: usize, hidden: usize, latent: usize, dims: usize) -> NetworkSpec {
    NetworkSpec::new(input)
        .dense(hidden)
        .prelu()
        .dense(hidden)
        .prelu()
        .gaussian_latent(latent)
        .dense(hidden)
        .prelu()
        .dense(3 * dims)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// Batch coverage per dimension, averaged over the epoch's batches.
    pub coverage: Vec<f64>,
}

/// Writes the log as CSV: epoch, each term, total, then `p_cov_avg_<d>`.
pub fn write_training_log(log: &[EpochLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dims = log.first().map_or(0, |e| e.coverage.len());
    let mut header: Vec<String> = [
        "epoch",
        "mse",
        "kl",
        "interval_score",
        "cal",
        "sharp",
        "comcal",
        "total",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..dims).map(|d| format!("p_cov_avg_{d}")));
    w.write_record(&header)?;
    for e in log {
        let t = &e.terms;
        let mut row = vec![e.epoch.to_string()];
        row.extend(
            [
                t.mse,
                t.kl,
                t.interval_score,
                t.cal,
                t.sharp,
                t.comcal,
                e.total,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        row.extend(e.coverage.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CjpModel {
    pub config: CjpConfig,
    pub net: Network,
    pub x_std: Standardizer,
    pub y_std: Standardizer,
    /// Per-dimension post-hoc correction, if applied.
    pub calibration: Option<Vec<CalibrationRecord>>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CjpMeta {
    kind: String,
    config: CjpConfig,
    spec: NetworkSpec,
    x_std: Standardizer,
    y_std: Standardizer,
    calibration: Option<Vec<CalibrationRecord>>,
}

/// Trains on the training rows. Labels are standardized internally; bands
/// are reported in original units.
pub fn cjp_train(ds: &Dataset, split: &DataSplit, cfg: &CjpConfig) -> Result<CjpModel> {
    cfg.validate()?;
    let x_raw = ds.x.select_rows(&split.train);
    let y_raw = ds.y.select_rows(&split.train);
    let x_std = Standardizer::fit(&x_raw);
    let y_std = Standardizer::fit(&y_raw);
    let (x, y) = (x_std.transform(&x_raw), y_std.transform(&y_raw));
    let t = &cfg.train;
    let mut net = Network::new(
        cjp_spec(x.cols(), t.hidden, cfg.latent_dim, y.cols()),
        t.seed,
    )?;
    let mut adam = AdamState::new(net.param_count());
    let mut order = rng::stream(t.seed, streams::BATCHES);
    let mut latent = rng::stream(t.seed, streams::LATENT);
    let mut log = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let mut sums = LossTerms::default();
        let mut coverage = vec![0.0; y.cols()];
        let mut n_batches = 0.0;
        for b in batches(x.rows(), t.batch_size, &mut order) {
            let (xb, yb) = (x.select_rows(&b), y.select_rows(&b));
            let out = net.forward(&xb, Mode::Train, &mut latent)?;
            let (mu, lv) = net.latent_stats().expect("cjp network has a latent layer");
            let l = cjp_total_loss(cfg, &yb, &out, mu, lv).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            let w = b.len() as f64;
            sums.mse += l.terms.mse * w;
            sums.kl += l.terms.kl * w;
            sums.interval_score += l.terms.interval_score * w;
            sums.cal += l.terms.cal * w;
            sums.sharp += l.terms.sharp * w;
            sums.comcal += l.terms.comcal * w;
            coverage
                .iter_mut()
                .zip(&l.coverage)
                .for_each(|(c, v)| *c += v);
            n_batches += 1.0;
            net.set_latent_grad(l.d_mu, l.d_log_var);
            net.backward(&l.d_out)?;
            let (p, g) = net.params_and_grads();
            adam_step(p, g, &mut adam, t.learning_rate)?;
        }
        let n = x.rows() as f64;
        let terms = LossTerms {
            mse: sums.mse / n,
            kl: sums.kl / n,
            interval_score: sums.interval_score / n,
            cal: sums.cal / n,
            sharp: sums.sharp / n,
            comcal: sums.comcal / n,
        };
        coverage.iter_mut().for_each(|c| *c /= n_batches);
        log.push(EpochLog {
            epoch,
            total: terms.total(),
            terms,
            coverage,
        });
    }
    Ok(CjpModel {
        config: cfg.clone(),
        net,
        x_std,
        y_std,
        calibration: None,
        log,
    })
}

impl CjpModel {
    /// Mean and uncorrected bounds in original label units (latent at its mean).
    pub fn raw_outputs(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let out = self.net.predict(&self.x_std.transform(x))?;
        let (m, lo, hi) = split_heads(&out)?;
        Ok((
            self.y_std.inverse(&m),
            self.y_std.inverse(&lo),
            self.y_std.inverse(&hi),
        ))
    }

    /// Per-dimension scores on rows `idx` of `ds`, against the uncorrected bounds.
    pub fn scores(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (_, lo, hi) = self.raw_outputs(&ds.x.select_rows(idx))?;
        interval_scores(&lo, &hi, &ds.y.select_rows(idx))
    }

    /// Split-conformal correction at miscoverage `alpha` on held-out rows.
    pub fn posthoc_calibrate(&mut self, ds: &Dataset, cal: &[usize], alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        if cal.len() < MIN_CALIBRATION {
            return Err(Error::Validation(format!(
                "calibration set has {} samples, need at least {MIN_CALIBRATION}",
                cal.len()
            )));
        }
        self.calibration = Some(calibrate_dims(self.scores(ds, cal)?, alpha)?);
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    /// Point prediction and band; the band carries the post-hoc correction if one was applied.
    pub fn predict(&self, x: &Matrix) -> Result<(Matrix, IntervalBand)> {
        let (m, lo, hi) = self.raw_outputs(x)?;
        let band = match &self.calibration {
            Some(c) => {
                IntervalBand::calibrated(lo, hi, c.iter().map(CalibrationRecord::value).collect())?
            }
            None => IntervalBand::uncalibrated(lo, hi)?,
        };
        Ok((m, band))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CjpMeta {
            kind: "cjp".into(),
            config: self.config.clone(),
            spec: self.net.spec().clone(),
            x_std: self.x_std.clone(),
            y_std: self.y_std.clone(),
            calibration: self.calibration.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        self.net.write_sections("", &mut ck);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CjpMeta = ck.meta_as()?;
        if meta.kind != "cjp" {
            return Err(Error::Checkpoint(format!(
                "expected a cjp checkpoint, found {}",
                meta.kind
            )));
        }
        Ok(Self {
            config: meta.config,
            net: Network::read_sections(meta.spec, "", ck)?,
            x_std: meta.x_std,
            y_std: meta.y_std,
            calibration: meta.calibration,
            log: Vec::new(),
        })
    }
}

/// Finite-difference check of the full training loss w.r.t. the parameters
/// of a small joint network, at points away from every indicator and
/// activation kink.
pub fn total_loss_gradcheck(cfg: &CjpConfig, points: usize, seed: u64) -> Result<GradCheck> {
    use rand::Rng as _;
    let (rows, input, dims) = (6, 4, 2);
    let spec = cjp_spec(input, 5, 2, dims);
    let name = format!("cjp_total_{:?}_{:?}", cfg.interval_mode, cfg.cal_mode).to_lowercase();
    run_check(&name, points, seed, |r| {
        let mut net = Network::new(spec.clone(), r.random())?;
        let x = Matrix::from_vec(
            rows,
            input,
            (0..rows * input)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )?;
        let y = Matrix::from_vec(
            rows,
            dims,
            (0..rows * dims)
                .map(|_| r.random_range(-1.5..1.5))
                .collect(),
        )?;
        let fseed: u64 = r.random();
        let eval = |net: &mut Network| -> Result<(CjpLoss, Matrix)> {
            let out = net.forward_seeded(&x, Mode::Train, fseed)?;
            let (mu, lv) = net.latent_stats().expect("latent layer");
            Ok((cjp_total_loss(cfg, &y, &out, mu, lv)?, out))
        };
        let (l, out) = eval(&mut net)?;
        let (_, lo, hi) = split_heads(&out)?;
        let near_bound = y
            .as_slice()
            .iter()
            .zip(lo.as_slice().iter().zip(hi.as_slice()))
            .any(|(v, (a, b))| (v - a).abs() < KINK_MARGIN || (v - b).abs() < KINK_MARGIN);
        if near_bound || net.prelu_margin().is_some_and(|m| m < KINK_MARGIN) {
            return Ok(None);
        }
        net.set_latent_grad(l.d_mu, l.d_log_var);
        net.backward(&l.d_out)?;
        let analytic = net.grads().to_vec();
        let mut probe = net.clone();
        let numeric = numeric_gradient(
            &mut |v| {
                probe.params_mut().copy_from_slice(v);
                eval(&mut probe)
                    .map(|(l, _)| l.terms.total())
                    .unwrap_or(f64::NAN)
            },
            net.params(),
            STEP,
        );
        Ok(Some(relative_error(&analytic, &numeric)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, SplitFractions};
    use rand::Rng as _;

    fn outputs(mean: f64, s_l: f64, s_u: f64) -> Matrix {
        Matrix::from_vec(
            1,
            3,
            vec![mean, softplus_inverse(s_l), softplus_inverse(s_u)],
        )
        .unwrap()
    }

    fn one(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn single_sample_hand_case() {
        let cfg = CjpConfig::default();
        let l = cjp_total_loss(
            &cfg,
            &one(0.0),
            &outputs(0.0, 1.0, 1.0),
            &one(0.0),
            &one(0.0),
        )
        .unwrap();
        let t = l.terms;
        assert_eq!(t.mse, 0.0);
        assert!((t.interval_score - 2.0).abs() < 1e-12);
        assert_eq!(l.coverage, vec![1.0]);
        // Coverage 1 > p: each bound is pulled toward y by its mean distance
        // below it; only the upper bound sits above y.
        assert!((t.cal - 1.0).abs() < 1e-12);
        assert!((t.sharp - 2.0).abs() < 1e-12);
        assert!((t.comcal - 1.5).abs() < 1e-12);
        assert_eq!(t.kl, 0.0);
        assert!((t.total() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        // Offsets underflow to exactly zero, so both bounds sit on y.
        let cfg = CjpConfig::default();
        let y = Matrix::from_vec(2, 1, vec![0.3, -0.2]).unwrap();
        let out = Matrix::from_vec(2, 3, vec![0.3, -800.0, -800.0, -0.2, -800.0, -800.0]).unwrap();
        let l = cjp_total_loss(&cfg, &y, &out, &Matrix::zeros(2, 1), &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(l.terms.total(), 0.0, "{:?}", l.terms);
    }

    #[test]
    fn bounds_never_cross() {
        let mut r = rng::stream(1, 0);
        let spec = cjp_spec(5, 8, 3, 6);
        let net = Network::new(spec, 3).unwrap();
        let x = Matrix::from_vec(
            10_000,
            5,
            (0..50_000).map(|_| r.random_range(-50.0..50.0)).collect(),
        )
        .unwrap();
        let (m, lo, hi) = split_heads(&net.predict(&x).unwrap()).unwrap();
        for i in 0..m.as_slice().len() {
            assert!(lo.as_slice()[i] <= m.as_slice()[i] && m.as_slice()[i] <= hi.as_slice()[i]);
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for (im, cm) in [
            (IntervalMode::Central, CalMode::Interval),
            (IntervalMode::PerPercentile, CalMode::PerBound),
        ] {
            let cfg = CjpConfig {
                interval_mode: im,
                cal_mode: cm,
                ..CjpConfig::default()
            };
            let c = total_loss_gradcheck(&cfg, 100, 5).unwrap();
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(CjpConfig::default().validate().is_ok());
        assert!((CjpConfig::default().alpha() - 0.1).abs() < 1e-15);
        for bad in [
            CjpConfig {
                lambda: 1.5,
                ..CjpConfig::default()
            },
            CjpConfig {
                alpha_low: 0.96,
                ..CjpConfig::default()
            },
            CjpConfig {
                coverage: 1.0,
                ..CjpConfig::default()
            },
            CjpConfig {
                latent_dim: 0,
                ..CjpConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        }
    }

    /// Labels `u * (d + 1) + (0.05 + u) * noise` in six dimensions.
    fn hetero(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 0);
        let mut x = Matrix::zeros(n, 3);
        let mut y = Matrix::zeros(n, 6);
        for i in 0..n {
            let u: f64 = r.random_range(0.0..1.0);
            x.set(i, 0, u);
            x.set(i, 1, r.random_range(0.0..1.0));
            x.set(i, 2, r.random_range(0.0..1.0));
            for d in 0..6 {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                y.set(i, d, u * (d as f64 + 1.0) + (0.05 + u) * z);
            }
        }
        Dataset::new(x, y, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    fn small_train(lambda: f64, epochs: usize) -> (Dataset, DataSplit, CjpModel) {
        let ds = hetero(800, 2);
        let split = split_dataset(
            800,
            SplitFractions {
                train: 0.6,
                cal: 0.2,
                test: 0.2,
            },
            1,
        )
        .unwrap();
        let cfg = CjpConfig {
            lambda,
            train: TrainConfig {
                hidden: 16,
                epochs,
                ..TrainConfig::default()
            },
            ..CjpConfig::default()
        };
        let m = cjp_train(&ds, &split, &cfg).unwrap();
        (ds, split, m)
    }

    fn mean_width(m: &CjpModel, x: &Matrix) -> f64 {
        let (_, band) = m.predict(x).unwrap();
        let mut s = 0.0;
        for r in 0..band.len() {
            for d in 0..band.dims() {
                s += band.width(r, d);
            }
        }
        s / (band.len() * band.dims()) as f64
    }

    #[test]
    fn log_terms_sum_to_total_and_training_is_deterministic() {
        let (ds, split, m) = small_train(0.5, 5);
        assert_eq!(m.log.len(), 5);
        for e in &m.log {
            let t = e.terms;
            assert!(
                (e.total - (t.mse + t.kl + t.interval_score + t.comcal)).abs()
                    <= 1e-12 * e.total.abs().max(1.0)
            );
            assert!(e.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        let (_, _, again) = small_train(0.5, 5);
        assert_eq!(m.net.params(), again.net.params());
        let mut csv = Vec::new();
        write_training_log(&m.log, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,mse,kl,interval_score,cal,sharp,comcal,total,p_cov_avg_0,p_cov_avg_1,p_cov_avg_2,p_cov_avg_3,p_cov_avg_4,p_cov_avg_5\n"));
        assert_eq!(text.lines().count(), 6);
        let x = ds.x.select_rows(&split.test);
        let back = CjpModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn sharper_weighting_gives_narrower_bands() {
        let (ds, split, calib) = small_train(0.0, 15);
        let (_, _, sharp) = small_train(1.0, 15);
        let x = ds.x.select_rows(&split.test);
        assert!(mean_width(&sharp, &x) <= mean_width(&calib, &x));
    }

    #[test]
    fn posthoc_correction_shifts_bands() {
        let (ds, split, mut m) = small_train(0.5, 10);
        let x = ds.x.select_rows(&split.test);
        let (_, raw) = m.predict(&x).unwrap();
        m.posthoc_calibrate(&ds, &split.cal, 0.1).unwrap();
        let (_, cal) = m.predict(&x).unwrap();
        let q = &cal.q_cal;
        for r in 0..cal.len() {
            for d in 0..6 {
                assert_eq!(cal.raw_lower.get(r, d), raw.lower.get(r, d));
                assert_eq!(cal.lower.get(r, d), raw.lower.get(r, d) - q[d]);
            }
        }
        assert!(m.posthoc_calibrate(&ds, &split.cal[..5], 0.1).is_err());
    }

    #[test]
    fn negative_scores_narrow_bands() {
        let (ds, split, mut m) = small_train(0.5, 3);
        // Inflate the labels' spread into the model's bounds: with every
        // calibration label deep inside, the correction must be negative.
        let mut tight = ds.clone();
        let (mean, _, _) = m.raw_outputs(&ds.x.select_rows(&split.cal)).unwrap();
        for (k, &i) in split.cal.iter().enumerate() {
            for d in 0..6 {
                tight.y.set(i, d, mean.get(k, d));
            }
        }
        m.posthoc_calibrate(&tight, &split.cal, 0.1).unwrap();
        assert!(m
            .calibration
            .as_ref()
            .unwrap()
            .iter()
            .all(|c| c.value() < 0.0));
    }
}
