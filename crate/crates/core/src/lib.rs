//! Conformal uncertainty bands for learned 6-DOF pose regression.
//!
//! Four estimators share the same data layer and calibration machinery:
//!
//! * [`methods::cqr`]: per-dimension conformalized quantile regression on a
//!   quantile regression forest, combined into a 6-D box.
//! * [`methods::csp`]: conformal set prediction over quantile-binned
//!   positions, which can yield disjoint regions.
//! * [`methods::mcqr`]: a conditional VAE trained on MC-dropout augmented
//!   data, conformalized with a latent-grid distance score.
//! * [`methods::cjp`]: a single network emitting the mean pose and bounds,
//!   trained with an interval-score plus calibration/sharpness loss.
//!
//! [`eval`] computes coverage and sharpness metrics and renders reports;
//! [`pipeline`] wires everything to a JSON run configuration.

pub mod checkpoint;
pub mod conformal;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod geom;
pub mod matrix;
pub mod methods;
pub mod pipeline;
pub mod qforest;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use geom::{Pose6D, Quaternion, Trajectory};
pub use matrix::Matrix;
