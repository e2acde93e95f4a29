//! Synthetic camera-like trajectories.
//!
//! A smooth 6-DOF path is pushed through a frozen random nonlinear feature map
//! (a stand-in for a CNN backbone). Additive feature noise has scale
//! `sigma0 * (1 + beta * L(t))` where `L` is a lighting-darkness curve in
//! `[0, 1]`; darkness also enters the feature map, the way a dim image is
//! visibly dim.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geom::Pose6D;
use crate::matrix::Matrix;
use crate::rng::{self, streams};

/// A dark stretch of the trajectory in normalized time `[0, 1]`: darkness is 1
/// within `plateau` of `center` and falls to 0 over a further `ramp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkSegment {
    pub center: f64,
    pub plateau: f64,
    pub ramp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightingProfile {
    pub segments: Vec<DarkSegment>,
}

impl Default for LightingProfile {
    /// Six short dark stretches spread evenly over the run, so dark frames
    /// cover many different poses rather than one stretch of the path.
    fn default() -> Self {
        Self {
            segments: (0..6)
                .map(|i| DarkSegment {
                    center: (i as f64 + 0.5) / 6.0,
                    plateau: 0.02,
                    ramp: 0.02,
                })
                .collect(),
        }
    }
}

impl LightingProfile {
    /// Darkness at normalized time `tau`.
    pub fn darkness(&self, tau: f64) -> f64 {
        self.segments
            .iter()
            .map(|s| {
                let d = (tau - s.center).abs() - s.plateau;
                if d <= 0.0 {
                    1.0
                } else if s.ramp <= 0.0 || d >= s.ramp {
                    0.0
                } else {
                    let u = 1.0 - d / s.ramp;
                    u * u * (3.0 - 2.0 * u)
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of frames.
    pub n: usize,
    pub feature_dim: usize,
    /// Seconds covered by the trajectory.
    pub duration: f64,
    pub sigma0: f64,
    pub beta: f64,
    pub lighting: LightingProfile,
    pub start_pose: [f64; 6],
    /// Fixes the path shape and the feature map.
    pub scene_seed: u64,
    /// Drives the feature noise.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 3500,
            feature_dim: 32,
            duration: 120.0,
            sigma0: 0.03,
            beta: 3.0,
            lighting: LightingProfile::default(),
            start_pose: [0.0; 6],
            scene_seed: 2023,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.feature_dim == 0 {
            return Err(Error::Validation(
                "simulation needs n >= 1 and feature_dim >= 1".into(),
            ));
        }
        if !(self.sigma0 >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Validation(
                "sigma0 and beta must be non-negative".into(),
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Validation("duration must be positive".into()));
        }
        if self.start_pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("start pose must be finite".into()));
        }
        Ok(())
    }

    /// Feature noise scale at normalized time `tau`.
    pub fn noise_scale(&self, tau: f64) -> f64 {
        self.sigma0 * (1.0 + self.beta * self.lighting.darkness(tau))
    }
}

/// Output of [`simulate_trajectory`]: frames in time order plus the noise
/// scale each frame's features were drawn with (also in `dataset.noise_scale`).
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub noise_scale: Vec<f64>,
}

struct PathComponent {
    amplitude: f64,
    freq: f64,
    phase: f64,
}

/// Sum of three sinusoids per pose dimension, offset so `tau = 0` is the start.
struct SmoothPath {
    start: [f64; 6],
    dims: Vec<Vec<PathComponent>>,
}

impl SmoothPath {
    fn random(start: [f64; 6], rng: &mut rng::Rng) -> Self {
        let dims = (0..6)
            .map(|d| {
                let (lo, hi) = if d < 3 { (0.3, 1.0) } else { (0.05, 0.3) };
                (0..3)
                    .map(|k| PathComponent {
                        amplitude: rng.random_range(lo..hi) / (k + 1) as f64,
                        freq: rng.random_range(0.5..1.5) * (k + 1) as f64,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    })
                    .collect()
            })
            .collect();
        Self { start, dims }
    }

    fn at(&self, tau: f64) -> [f64; 6] {
        let mut out = self.start;
        for (d, comps) in self.dims.iter().enumerate() {
            for c in comps {
                out[d] += c.amplitude
                    * ((std::f64::consts::TAU * c.freq * tau + c.phase).sin() - c.phase.sin());
            }
        }
        out
    }

    fn scale(&self, d: usize) -> f64 {
        self.dims[d].iter().map(|c| c.amplitude).sum()
    }
}

/// Frozen random map `tanh(W u + b)` from normalized pose (+ darkness) to features.
struct FeatureMap {
    weights: Matrix,
    bias: Vec<f64>,
}

impl FeatureMap {
    fn random(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let gain = 1.5 / (inputs as f64).sqrt();
        let mut weights = Matrix::zeros(outputs, inputs);
        for v in weights.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *v = gain * z;
        }
        let bias = (0..outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                0.3 * z
            })
            .collect();
        Self { weights, bias }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let s: f64 = self.weights.row(j).iter().zip(u).map(|(w, x)| w * x).sum();
            *o = (s + self.bias[j]).tanh();
        }
    }
}

fn add_noise(x: &mut Matrix, scale: &[f64], seed: u64) {
    let mut noise_rng = rng::stream(seed, streams::FEATURE_NOISE);
    for (i, s) in scale.iter().enumerate() {
        for v in x.row_mut(i) {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *v += s * z;
        }
    }
}

/// Simulates a heteroskedastic trajectory; samples are returned in time order.
pub fn simulate_trajectory(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut scene = rng::stream(cfg.scene_seed, streams::TRAJECTORY);
    let path = SmoothPath::random(cfg.start_pose, &mut scene);
    let map = FeatureMap::random(
        7,
        cfg.feature_dim,
        &mut rng::stream(cfg.scene_seed, streams::FEATURE_MAP),
    );
    let scales: Vec<f64> = (0..6).map(|d| path.scale(d).max(1e-9)).collect();

    let n = cfg.n;
    let mut x = Matrix::zeros(n, cfg.feature_dim);
    let mut y = Matrix::zeros(n, 6);
    let mut t = Vec::with_capacity(n);
    let mut noise_scale = Vec::with_capacity(n);
    let mut u = [0.0; 7];
    for i in 0..n {
        let tau = if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let pose = Pose6D::from_array(path.at(tau));
        let raw = pose.to_array();
        for d in 0..6 {
            u[d] = (raw[d] - cfg.start_pose[d]) / scales[d];
        }
        let dark = cfg.lighting.darkness(tau);
        u[6] = 2.0 * dark - 1.0;
        map.apply(&u, x.row_mut(i));
        y.row_mut(i).copy_from_slice(&raw);
        t.push(tau * cfg.duration);
        noise_scale.push(cfg.sigma0 * (1.0 + cfg.beta * dark));
    }
    add_noise(&mut x, &noise_scale, cfg.seed);

    let mut dataset = Dataset::new(x, y, t)?;
    dataset.noise_scale = Some(noise_scale.clone());
    Ok(Simulation {
        dataset,
        noise_scale,
    })
}

/// Dataset whose x-position posterior is bimodal: `x = s * r` with a random
/// sign `s`, while the features only see `r`. Used to exercise disjoint
/// prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub scene_seed: u64,
    pub seed: u64,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            n: 3500,
            feature_dim: 16,
            sigma: 0.02,
            scene_seed: 11,
            seed: 0,
        }
    }
}

pub fn simulate_bimodal(cfg: &BimodalConfig) -> Result<Dataset> {
    if cfg.n == 0 || cfg.feature_dim == 0 || !(cfg.sigma >= 0.0) {
        return Err(Error::Validation("invalid bimodal configuration".into()));
    }
    let map = FeatureMap::random(
        6,
        cfg.feature_dim,
        &mut rng::stream(cfg.scene_seed, streams::FEATURE_MAP),
    );
    let mut draw = rng::stream(cfg.seed, streams::TRAJECTORY);
    let mut x = Matrix::zeros(cfg.n, cfg.feature_dim);
    let mut y = Matrix::zeros(cfg.n, 6);
    for i in 0..cfg.n {
        let r: f64 = draw.random_range(0.0..1.0);
        let sign = if draw.random_bool(0.5) { 1.0 } else { -1.0 };
        let rest: [f64; 5] = std::array::from_fn(|_| draw.random_range(-1.0..1.0));
        let u = [2.0 * r - 1.0, rest[0], rest[1], rest[2], rest[3], rest[4]];
        map.apply(&u, x.row_mut(i));
        let label = [
            sign * (1.0 + r),
            rest[0],
            0.5 * rest[1],
            0.2 * rest[2],
            0.2 * rest[3],
            0.2 * rest[4],
        ];
        y.row_mut(i).copy_from_slice(&label);
    }
    add_noise(&mut x, &vec![cfg.sigma; cfg.n], cfg.seed);
    let t = (0..cfg.n).map(|i| i as f64).collect();
    Dataset::new(x, y, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_configured_pose() {
        let cfg = SimConfig {
            n: 50,
            start_pose: [1.0, -2.0, 0.5, 0.1, -0.2, 0.3],
            ..SimConfig::default()
        };
        let sim = simulate_trajectory(&cfg).unwrap();
        let first = sim.dataset.y.row(0);
        for (a, b) in first.iter().zip(cfg.start_pose) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(sim.dataset.t[0], 0.0);
    }

    #[test]
    fn constant_noise_without_gain() {
        let cfg = SimConfig {
            n: 200,
            beta: 0.0,
            ..SimConfig::default()
        };
        let sim = simulate_trajectory(&cfg).unwrap();
        assert!(sim.noise_scale.iter().all(|&s| s == cfg.sigma0));
    }

    #[test]
    fn noise_scale_monotone_in_darkness() {
        let cfg = SimConfig::default();
        let mut pairs: Vec<(f64, f64)> = (0..=1000)
            .map(|i| {
                let tau = i as f64 / 1000.0;
                (cfg.lighting.darkness(tau), cfg.noise_scale(tau))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
        assert!(pairs.iter().all(|p| (0.0..=1.0).contains(&p.0)));
    }

    #[test]
    fn deterministic_given_seeds() {
        let cfg = SimConfig {
            n: 100,
            ..SimConfig::default()
        };
        let a = simulate_trajectory(&cfg).unwrap();
        let b = simulate_trajectory(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = simulate_trajectory(&SimConfig {
            seed: 1,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.dataset.y, c.dataset.y);
        assert_ne!(a.dataset.x, c.dataset.x);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(simulate_trajectory(&SimConfig {
            n: 0,
            ..SimConfig::default()
        })
        .is_err());
        assert!(simulate_trajectory(&SimConfig {
            sigma0: -1.0,
            ..SimConfig::default()
        })
        .is_err());
    }

    #[test]
    fn bimodal_labels_have_both_signs() {
        let d = simulate_bimodal(&BimodalConfig {
            n: 400,
            ..BimodalConfig::default()
        })
        .unwrap();
        let xs = d.y.column(0);
        assert!(xs.iter().any(|&v| v > 1.0) && xs.iter().any(|&v| v < -1.0));
        assert!(xs.iter().all(|v| v.abs() >= 1.0 && v.abs() <= 2.0));
    }
}
