//! Feature-space analogues of image noise: additive gaussian, salt-and-pepper
//! saturation, and multiplicative speckle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian,
    SaltPepper,
    Speckle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation of additive gaussian noise.
    pub sigma_g: f64,
    /// Probability that a coordinate is saturated (half to each bound).
    pub rho: f64,
    /// Saturation bounds; [`apply_noise_matrix`] fills them from the data when unset.
    pub saturation: Option<(f64, f64)>,
    /// Standard deviation of the multiplicative speckle factor.
    pub sigma_s: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma_g: 0.0,
            rho: 0.0,
            saturation: None,
            sigma_s: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Validation(format!(
                "flip probability {} outside [0, 1]",
                self.rho
            )));
        }
        if !(self.sigma_g >= 0.0 && self.sigma_s >= 0.0) {
            return Err(Error::Validation(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        if self.kind == NoiseKind::SaltPepper && self.rho > 0.0 && self.saturation.is_none() {
            return Err(Error::Validation(
                "salt-and-pepper noise needs saturation bounds".into(),
            ));
        }
        Ok(())
    }
}

/// Noisy copy of feature vector `x`. The draw is fixed by `(spec.seed, index)`,
/// so distinct rows of a dataset get independent noise.
pub fn apply_noise(x: &[f64], spec: &NoiseSpec, index: u64) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut rng = rng::stream(rng::derive_seed(spec.seed, index), streams::EXTRA_NOISE);
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian => {
            if spec.sigma_g > 0.0 {
                for v in &mut out {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.sigma_g * z;
                }
            }
        }
        NoiseKind::SaltPepper => {
            if spec.rho > 0.0 {
                let (lo, hi) = spec
                    .saturation
                    .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                for v in &mut out {
                    let u: f64 = rng.random();
                    if u < spec.rho / 2.0 {
                        *v = lo;
                    } else if u < spec.rho {
                        *v = hi;
                    }
                }
            }
        }
        NoiseKind::Speckle => {
            if spec.sigma_s > 0.0 {
                for v in &mut out {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v *= 1.0 + spec.sigma_s * z;
                }
            }
        }
    }
    out
}

/// Applies [`apply_noise`] to every row; salt-and-pepper bounds default to the
/// matrix minimum and maximum.
pub fn apply_noise_matrix(x: &Matrix, spec: &NoiseSpec) -> Result<Matrix> {
    let mut spec = *spec;
    if spec.kind == NoiseKind::SaltPepper && spec.saturation.is_none() {
        let lo = x.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x
            .as_slice()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        spec.saturation = Some((lo, hi));
    }
    spec.validate()?;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let noisy = apply_noise(x.row(i), &spec, i as u64);
        out.row_mut(i).copy_from_slice(&noisy);
    }
    Ok(out)
}
