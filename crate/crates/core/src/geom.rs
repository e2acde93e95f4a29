//! Pose representations.
//!
//! Orientation uses intrinsic Z-Y-X (yaw, pitch, roll) Euler angles. Quaternions
//! are stored scalar-first as `(w, p, q, r)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pose dimension names in label-vector order.
pub const POSE_DIMS: [&str; 6] = ["x", "y", "z", "roll", "pitch", "yaw"];

/// Tolerance on `|norm - 1|` accepted by [`quat_to_euler`] before it refuses.
const NORM_TOLERANCE: f64 = 1e-6;
const GIMBAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        p: 0.0,
        q: 0.0,
        r: 0.0,
    };

    pub fn new(w: f64, p: f64, q: f64, r: f64) -> Self {
        Self { w, p, q, r }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.p * self.p + self.q * self.q + self.r * self.r).sqrt()
    }

    /// Scales to unit norm; fails on zero or non-finite input.
    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidInput(format!(
                "cannot normalize quaternion {self:?}"
            )));
        }
        Ok(Self {
            w: self.w / n,
            p: self.p / n,
            q: self.q / n,
            r: self.r / n,
        })
    }

    /// Representative of `{q, -q}` with `w >= 0` (ties broken on the vector part).
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.p, self.q, self.r]
                .iter()
                .find(|v| **v != 0.0)
                .is_some_and(|v| *v < 0.0)
        };
        if flip {
            Self {
                w: -self.w,
                p: -self.p,
                q: -self.q,
                r: -self.r,
            }
        } else {
            self
        }
    }
}

/// Roll, pitch and yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6D {
    pub fn new(position: [f64; 3], angles: EulerAngles) -> Self {
        Self {
            x: position[0],
            y: position[1],
            z: position[2],
            roll: wrap_angle(angles.roll),
            pitch: wrap_angle(angles.pitch),
            yaw: wrap_angle(angles.yaw),
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new([a[0], a[1], a[2]], EulerAngles::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn angles(&self) -> EulerAngles {
        EulerAngles::new(self.roll, self.pitch, self.yaw)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x - 2.0 * PI
    } else {
        x
    }
}

/// Z-Y-X Euler angles of a (near-)unit quaternion.
///
/// At gimbal lock (`|sin pitch| > 1 - 1e-9`) roll is set to zero and the
/// whole rotation about the vertical is reported as yaw.
pub fn quat_to_euler(q: Quaternion) -> Result<EulerAngles> {
    let n = q.norm();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::InvalidInput(format!(
            "quaternion {q:?} is not finite or has zero norm"
        )));
    }
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "quaternion norm {n} is not unit"
        )));
    }
    let Quaternion { w, p, q: qq, r } = q.normalized()?.canonical();

    let sin_pitch = (2.0 * (w * qq - r * p)).clamp(-1.0, 1.0);
    if sin_pitch.abs() > 1.0 - GIMBAL_EPS {
        let pitch = PI / 2.0 * sin_pitch.signum();
        let yaw = -2.0 * sin_pitch.signum() * p.atan2(w);
        return Ok(EulerAngles::new(0.0, pitch, wrap_angle(yaw)));
    }
    let roll = (2.0 * (w * p + qq * r)).atan2(1.0 - 2.0 * (p * p + qq * qq));
    let pitch = sin_pitch.asin();
    let yaw = (2.0 * (w * r + p * qq)).atan2(1.0 - 2.0 * (qq * qq + r * r));
    Ok(EulerAngles::new(wrap_angle(roll), pitch, wrap_angle(yaw)))
}

/// Unit quaternion (with `w >= 0`) of Z-Y-X Euler angles.
pub fn euler_to_quat(a: EulerAngles) -> Result<Quaternion> {
    if !(a.roll.is_finite() && a.pitch.is_finite() && a.yaw.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite angles {a:?}")));
    }
    let (sr, cr) = (a.roll / 2.0).sin_cos();
    let (sp, cp) = (a.pitch / 2.0).sin_cos();
    let (sy, cy) = (a.yaw / 2.0).sin_cos();
    let q = Quaternion {
        w: cr * cp * cy + sr * sp * sy,
        p: sr * cp * cy - cr * sp * sy,
        q: cr * sp * cy + sr * cp * sy,
        r: cr * cp * sy - sr * sp * cy,
    };
    Ok(q.normalized()?.canonical())
}

/// Time-stamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: Vec<(f64, Pose6D)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose6D)>) -> Result<Self> {
        for (i, (t, pose)) in samples.iter().enumerate() {
            if !t.is_finite() || !pose.is_finite() {
                return Err(Error::Validation(format!("sample {i} is not finite")));
            }
            if i > 0 && *t <= samples[i - 1].0 {
                return Err(Error::Validation(format!(
                    "timestamps not strictly increasing at sample {i} ({} after {})",
                    t,
                    samples[i - 1].0
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(f64, Pose6D)] {
        &self.samples
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn poses(&self) -> Vec<Pose6D> {
        self.samples.iter().map(|s| s.1).collect()
    }
}
