//! Multivariate regions from a conditional VAE trained on MC-dropout
//! augmented data.
//!
//! A dropout regressor is sampled `T` times per training input to produce
//! pseudo-labels; a CVAE (encoder `x ⊕ y -> z`, decoder `z ⊕ x -> y`) is fit
//! on originals plus pseudo-labels. At prediction time a fixed grid of latent
//! points inside a ball of radius `r0` is decoded into a set of centers, and
//! the nonconformity score of `(x, y)` is the distance from `y` to the
//! nearest center (in standardized label units). The calibrated region is the
//! union of balls of radius `q` around the centers, so membership and
//! `score <= q` are the same test and split-conformal validity is exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_alpha, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::conformal::CalibrationRecord;
use crate::data::{DataSplit, Dataset, MIN_CALIBRATION};
use crate::diffnet::{adam_step, batches, loss, AdamState, Mode, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Standardizer};
use crate::rng::{self, streams, Rng};

const HALTON_BASES: [u32; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
/// Inputs decoded per block when scoring.
const SCORE_BLOCK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McqrConfig {
    pub alpha: f64,
    pub latent_dim: usize,
    pub grid_points: usize,
    /// Latent ball radius; `None` uses the radius holding 90% of the standard normal mass.
    pub grid_radius: Option<f64>,
    /// Stochastic passes per training input.
    pub mc_samples: usize,
    pub dropout: f64,
    pub predictor: TrainConfig,
    pub cvae: TrainConfig,
}

impl Default for McqrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            latent_dim: 3,
            grid_points: 64,
            grid_radius: None,
            mc_samples: 5,
            dropout: 0.2,
            predictor: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            cvae: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
        }
    }
}

/// Regularized lower incomplete gamma `P(a, x)` by its power series.
fn lower_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = 1.0;
    while term > sum * 1e-17 && n < 10_000.0 {
        term *= x / (a + n);
        sum += term;
        n += 1.0;
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * sum
}

/// `ln Γ(a)` for `a` a positive multiple of 1/2.
fn ln_gamma(a: f64) -> f64 {
    let mut v = if (a - a.floor()).abs() > 0.25 {
        0.5 * std::f64::consts::PI.ln()
    } else {
        0.0
    };
    let mut k = if v == 0.0 { 1.0 } else { 0.5 };
    while k < a - 0.25 {
        v += k.ln();
        k += 1.0;
    }
    v
}

/// Radius of the ball holding `mass` of a standard normal in `dim` dimensions.
pub fn normal_ball_radius(dim: usize, mass: f64) -> f64 {
    let a = dim as f64 / 2.0;
    let (mut lo, mut hi) = (0.0f64, 20.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lower_gamma_p(a, mid * mid / 2.0) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// Deterministic low-discrepancy points inside a latent ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub radius: f64,
    /// `points x dim`.
    pub points: Matrix,
}

impl LatentGrid {
    /// Halton points in the cube `[-r, r]^dim`, rejected outside the ball,
    /// starting at a seed-dependent index.
    pub fn new(dim: usize, count: usize, radius: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim > HALTON_BASES.len() || count == 0 || !(radius > 0.0) {
            return Err(Error::Validation(format!(
                "invalid latent grid: dim {dim}, {count} points, radius {radius}"
            )));
        }
        let mut data = Vec::with_capacity(count * dim);
        let mut i = 1 + rng::derive_seed(seed, streams::GRID) % 4096;
        let mut p = vec![0.0; dim];
        while data.len() < count * dim {
            for (d, v) in p.iter_mut().enumerate() {
                *v = radius * (2.0 * radical_inverse(i, HALTON_BASES[d]) - 1.0);
            }
            if p.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                data.extend_from_slice(&p);
            }
            i += 1;
        }
        Ok(Self {
            radius,
            points: Matrix::from_vec(count, dim, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

/// `T` stochastic passes of `predictor` over `x`, appended after the originals.
/// Returns `N * (T + 1)` rows.
pub fn mc_dropout_augment(
    predictor: &Network,
    x: &Matrix,
    y: &Matrix,
    t: usize,
    seed: u64,
) -> Result<(Matrix, Matrix)> {
    if !predictor.has_dropout() {
        return Err(Error::Validation(
            "MC-dropout augmentation needs a dropout layer".into(),
        ));
    }
    if t == 0 {
        return Err(Error::Validation(
            "need at least one stochastic pass".into(),
        ));
    }
    x.check_same_shape(&Matrix::zeros(y.rows(), x.cols()), "augmentation inputs")?;
    let mut rng = rng::stream(seed, streams::AUGMENT);
    let mut xs = x.clone();
    let mut ys = y.clone();
    for _ in 0..t {
        ys = ys.vstack(&predictor.sample(x, &mut rng)?)?;
        xs = xs.vstack(x)?;
    }
    Ok((xs, ys))
}

fn regressor_spec(input: usize, hidden: usize, dropout: f64, output: usize) -> NetworkSpec {
    NetworkSpec::new(input)
        .dense(hidden)
        .prelu()
        .dropout(dropout)
        .dense(hidden)
        .prelu()
        .dropout(dropout)
        .dense(output)
}

/// Dropout regressor trained with MSE (inputs and labels already standardized).
pub fn train_point_predictor(
    x: &Matrix,
    y: &Matrix,
    dropout: f64,
    cfg: &TrainConfig,
) -> Result<Network> {
    cfg.validate()?;
    let mut net = Network::new(
        regressor_spec(x.cols(), cfg.hidden, dropout, y.cols()),
        cfg.seed,
    )?;
    let mut adam = AdamState::new(net.param_count());
    let mut order = rng::stream(cfg.seed, streams::BATCHES);
    let mut drop = rng::stream(cfg.seed, streams::DROPOUT);
    for epoch in 0..cfg.epochs {
        for b in batches(x.rows(), cfg.batch_size, &mut order) {
            let out = net.forward(&x.select_rows(&b), Mode::Train, &mut drop)?;
            let (l, g) = loss::mse_loss(&y.select_rows(&b), &out)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "point predictor loss {l} at epoch {epoch}"
                )));
            }
            net.backward(&g)?;
            let (p, g) = net.params_and_grads();
            adam_step(p, g, &mut adam, cfg.learning_rate)?;
        }
    }
    Ok(net)
}

#[derive(Debug, Clone)]
pub struct Cvae {
    pub encoder: Network,
    pub decoder: Network,
    pub latent_dim: usize,
    /// Per-epoch mean `(mse, kl)`.
    pub history: Vec<(f64, f64)>,
}

impl Cvae {
    /// Decodes every latent row against the same input `x`.
    pub fn decode_grid(&self, grid: &Matrix, x: &[f64]) -> Result<Matrix> {
        let xs = Matrix::from_vec(grid.rows(), x.len(), x.repeat(grid.rows()))?;
        self.decoder.predict(&grid.hstack(&xs)?)
    }

    /// Reconstruction through the encoder mean (no sampling).
    pub fn reconstruct(&self, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        let z = self.encoder.predict(&x.hstack(y)?)?;
        self.decoder.predict(&z.hstack(x)?)
    }
}

/// Trains a CVAE with MSE reconstruction plus KL to the standard normal.
pub fn cvae_train(x: &Matrix, y: &Matrix, latent_dim: usize, cfg: &TrainConfig) -> Result<Cvae> {
    cfg.validate()?;
    if latent_dim == 0 {
        return Err(Error::Validation(
            "latent dimension must be positive".into(),
        ));
    }
    x.check_same_shape(&Matrix::zeros(y.rows(), x.cols()), "cvae inputs")?;
    let h = cfg.hidden;
    let enc_spec = NetworkSpec::new(x.cols() + y.cols())
        .dense(h)
        .prelu()
        .dense(h)
        .prelu()
        .gaussian_latent(latent_dim);
    let dec_spec = NetworkSpec::new(latent_dim + x.cols())
        .dense(h)
        .prelu()
        .dense(h)
        .prelu()
        .dense(y.cols());
    let mut encoder = Network::new(enc_spec, rng::derive_seed(cfg.seed, 1))?;
    let mut decoder = Network::new(dec_spec, rng::derive_seed(cfg.seed, 2))?;
    let mut enc_adam = AdamState::new(encoder.param_count());
    let mut dec_adam = AdamState::new(decoder.param_count());
    let mut order = rng::stream(cfg.seed, streams::BATCHES);
    let mut latent = rng::stream(cfg.seed, streams::LATENT);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut mse_sum, mut kl_sum) = (0.0, 0.0);
        for b in batches(x.rows(), cfg.batch_size, &mut order) {
            let (xb, yb) = (x.select_rows(&b), y.select_rows(&b));
            let z = encoder.forward(&xb.hstack(&yb)?, Mode::Train, &mut latent)?;
            let pred = decoder.forward(&z.hstack(&xb)?, Mode::Train, &mut latent)?;
            let (mse, g) = loss::mse_loss(&yb, &pred)?;
            let (mu, lv) = encoder.latent_stats().expect("encoder has a latent layer");
            let (kl, d_mu, d_lv) = loss::kl_loss(mu, lv)?;
            if !(mse + kl).is_finite() {
                return Err(Error::Diverged(format!(
                    "cvae loss mse {mse} kl {kl} at epoch {epoch}"
                )));
            }
            mse_sum += mse * b.len() as f64;
            kl_sum += kl * b.len() as f64;
            let d_in = decoder.backward(&g)?;
            encoder.set_latent_grad(d_mu, d_lv);
            encoder.backward(&d_in.columns(0, latent_dim))?;
            let (p, g) = decoder.params_and_grads();
            adam_step(p, g, &mut dec_adam, cfg.learning_rate)?;
            let (p, g) = encoder.params_and_grads();
            adam_step(p, g, &mut enc_adam, cfg.learning_rate)?;
        }
        history.push((mse_sum / x.rows() as f64, kl_sum / x.rows() as f64));
    }
    Ok(Cvae {
        encoder,
        decoder,
        latent_dim,
        history,
    })
}

/// Distance from `y` to the nearest row of `centers`.
pub fn min_distance(centers: &Matrix, y: &[f64]) -> f64 {
    (0..centers.rows())
        .map(|j| {
            centers
                .row(j)
                .iter()
                .zip(y)
                .map(|(c, v)| (c - v) * (c - v))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Union of equal-radius balls (in standardized label space).
#[derive(Debug, Clone, PartialEq)]
pub struct BallUnionRegion {
    /// Centers in standardized label units.
    pub centers: Matrix,
    pub radius: f64,
    pub y_std: Standardizer,
}

impl BallUnionRegion {
    pub fn contains(&self, y: &[f64]) -> bool {
        min_distance(&self.centers, &self.standardize(y)) <= self.radius
    }

    pub fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_std.mean.iter().zip(&self.y_std.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Per-dimension `[min_j c - r, max_j c + r]` in original label units.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let dims = self.centers.cols();
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for j in 0..self.centers.rows() {
            for d in 0..dims {
                lo[d] = lo[d].min(self.centers.get(j, d));
                hi[d] = hi[d].max(self.centers.get(j, d));
            }
        }
        let to_orig = |v: f64, d: usize| v * self.y_std.std[d] + self.y_std.mean[d];
        (
            (0..dims).map(|d| to_orig(lo[d] - self.radius, d)).collect(),
            (0..dims).map(|d| to_orig(hi[d] + self.radius, d)).collect(),
        )
    }

    /// Per-dimension extent `max_j c + r - (min_j c - r)`, in original units.
    pub fn extents(&self) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        lo.iter().zip(&hi).map(|(l, h)| h - l).collect()
    }

    pub fn is_unbounded(&self) -> bool {
        self.radius.is_infinite()
    }
}

#[derive(Debug, Clone)]
pub struct McqrModel {
    pub alpha: f64,
    pub cvae: Cvae,
    pub grid: LatentGrid,
    pub x_std: Standardizer,
    pub y_std: Standardizer,
    pub calibration: Option<CalibrationRecord>,
    /// Rows the CVAE was trained on (originals plus pseudo-labels).
    pub augmented_rows: usize,
}

#[derive(Serialize, Deserialize)]
struct McqrMeta {
    kind: String,
    alpha: f64,
    latent_dim: usize,
    grid_radius: f64,
    encoder: NetworkSpec,
    decoder: NetworkSpec,
    x_std: Standardizer,
    y_std: Standardizer,
    calibration: Option<CalibrationRecord>,
    augmented_rows: usize,
}

/// Full training pipeline: dropout regressor, augmentation, CVAE, grid.
pub fn mcqr_fit(ds: &Dataset, split: &DataSplit, cfg: &McqrConfig) -> Result<McqrModel> {
    check_alpha(cfg.alpha)?;
    let x_raw = ds.x.select_rows(&split.train);
    let y_raw = ds.y.select_rows(&split.train);
    let x_std = Standardizer::fit(&x_raw);
    let y_std = Standardizer::fit(&y_raw);
    let (x, y) = (x_std.transform(&x_raw), y_std.transform(&y_raw));
    let predictor = train_point_predictor(&x, &y, cfg.dropout, &cfg.predictor)?;
    let (xa, ya) = mc_dropout_augment(&predictor, &x, &y, cfg.mc_samples, cfg.predictor.seed)?;
    let cvae = cvae_train(&xa, &ya, cfg.latent_dim, &cfg.cvae)?;
    let radius = cfg
        .grid_radius
        .unwrap_or_else(|| normal_ball_radius(cfg.latent_dim, 0.9));
    let grid = LatentGrid::new(cfg.latent_dim, cfg.grid_points, radius, cfg.cvae.seed)?;
    Ok(McqrModel {
        alpha: cfg.alpha,
        cvae,
        grid,
        x_std,
        y_std,
        calibration: None,
        augmented_rows: xa.rows(),
    })
}

impl McqrModel {
    /// Decoded centers (standardized) for each row of `x`.
    pub fn centers(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let xs = self.x_std.transform(x);
        let blocks: Vec<Result<Vec<Matrix>>> = (0..xs.rows())
            .collect::<Vec<_>>()
            .par_chunks(SCORE_BLOCK)
            .map(|rows| {
                let m = self.grid.len();
                let mut input = Matrix::zeros(rows.len() * m, self.grid.dim() + xs.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        let dst = input.row_mut(k * m + j);
                        dst[..self.grid.dim()].copy_from_slice(self.grid.points.row(j));
                        dst[self.grid.dim()..].copy_from_slice(xs.row(r));
                    }
                }
                let out = self.cvae.decoder.predict(&input)?;
                Ok((0..rows.len())
                    .map(|k| out.select_rows(&(k * m..(k + 1) * m).collect::<Vec<_>>()))
                    .collect())
            })
            .collect();
        let mut all = Vec::with_capacity(x.rows());
        for b in blocks {
            all.extend(b?);
        }
        Ok(all)
    }

    /// Distance from each standardized label to its nearest decoded center.
    pub fn scores(&self, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
        let centers = self.centers(x)?;
        let ys = self.y_std.transform(y);
        Ok(centers
            .iter()
            .enumerate()
            .map(|(r, c)| min_distance(c, ys.row(r)))
            .collect())
    }

    pub fn calibrate(&mut self, ds: &Dataset, cal: &[usize]) -> Result<()> {
        if cal.len() < MIN_CALIBRATION {
            return Err(Error::Validation(format!(
                "calibration set has {} samples, need at least {MIN_CALIBRATION}",
                cal.len()
            )));
        }
        let scores = self.scores(&ds.x.select_rows(cal), &ds.y.select_rows(cal))?;
        self.calibration = Some(CalibrationRecord::cqr(scores, self.alpha)?);
        Ok(())
    }

    pub fn qhat(&self) -> Result<f64> {
        Ok(self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::State("model is not calibrated".into()))?
            .value())
    }

    pub fn regions(&self, x: &Matrix) -> Result<Vec<BallUnionRegion>> {
        let q = self.qhat()?;
        Ok(self
            .centers(x)?
            .into_iter()
            .map(|centers| BallUnionRegion {
                centers,
                radius: q,
                y_std: self.y_std.clone(),
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = McqrMeta {
            kind: "mcqr".into(),
            alpha: self.alpha,
            latent_dim: self.cvae.latent_dim,
            grid_radius: self.grid.radius,
            encoder: self.cvae.encoder.spec().clone(),
            decoder: self.cvae.decoder.spec().clone(),
            x_std: self.x_std.clone(),
            y_std: self.y_std.clone(),
            calibration: self.calibration.clone(),
            augmented_rows: self.augmented_rows,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        self.cvae.encoder.write_sections("encoder.", &mut ck);
        self.cvae.decoder.write_sections("decoder.", &mut ck);
        ck.insert("grid", self.grid.points.as_slice().to_vec());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: McqrMeta = ck.meta_as()?;
        if meta.kind != "mcqr" {
            return Err(Error::Checkpoint(format!(
                "expected an mcqr checkpoint, found {}",
                meta.kind
            )));
        }
        let points = ck.section("grid")?.to_vec();
        let rows = points.len() / meta.latent_dim.max(1);
        Ok(Self {
            alpha: meta.alpha,
            cvae: Cvae {
                encoder: Network::read_sections(meta.encoder, "encoder.", ck)?,
                decoder: Network::read_sections(meta.decoder, "decoder.", ck)?,
                latent_dim: meta.latent_dim,
                history: Vec::new(),
            },
            grid: LatentGrid {
                radius: meta.grid_radius,
                points: Matrix::from_vec(rows, meta.latent_dim, points)?,
            },
            x_std: meta.x_std,
            y_std: meta.y_std,
            calibration: meta.calibration,
            augmented_rows: meta.augmented_rows,
        })
    }
}

/// Draws a point uniformly from the bounding box `[lo, hi]`.
pub(crate) fn uniform_in_box(rng: &mut Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    use rand::Rng as _;
    lo.iter()
        .zip(hi)
        .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
        .collect()
}
