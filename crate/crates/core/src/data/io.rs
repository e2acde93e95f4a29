//! Pose files and feature CSVs.
//!
//! Pose file grammar, one frame per line:
//!
//! ```text
//! line    := blank | comment | record
//! comment := '#' <anything>
//! record  := t SP x SP y SP z SP w SP p SP q SP r
//! ```
//!
//! Fields are decimal floats separated by ASCII whitespace; the quaternion is
//! scalar-first. Timestamps must be strictly increasing. Files are written
//! with the shortest decimal that parses back to the same `f64`.
//!
//! Feature files are CSV with header `f0,...,f{D-1}` and one row per pose
//! record, paired by row order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{euler_to_quat, quat_to_euler, Pose6D, Quaternion, Trajectory};
use crate::matrix::Matrix;

/// One pose-file line in its stored form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub t: f64,
    pub position: [f64; 3],
    pub orientation: Quaternion,
}

impl PoseRecord {
    pub fn from_pose(t: f64, pose: &Pose6D) -> Result<Self> {
        Ok(Self {
            t,
            position: [pose.x, pose.y, pose.z],
            orientation: euler_to_quat(pose.angles())?,
        })
    }

    pub fn to_pose(&self) -> Result<Pose6D> {
        let q = self.orientation.normalized()?;
        Ok(Pose6D::new(self.position, quat_to_euler(q)?))
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<Option<PoseRecord>> {
    let body = line.trim();
    if body.is_empty() || body.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = body.split_ascii_whitespace().collect();
    if fields.len() != 8 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 8 fields, found {}", fields.len()),
        });
    }
    let mut v = [0.0f64; 8];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("not a number: {f:?}"),
        })?;
        if !slot.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite value {f:?}"),
            });
        }
    }
    Ok(Some(PoseRecord {
        t: v[0],
        position: [v[1], v[2], v[3]],
        orientation: Quaternion::new(v[4], v[5], v[6], v[7]),
    }))
}

pub fn parse_pose_records(text: &str) -> Result<Vec<PoseRecord>> {
    let mut out: Vec<PoseRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(rec) = parse_record(line, i + 1)? {
            if let Some(prev) = out.last() {
                if rec.t <= prev.t {
                    return Err(Error::Validation(format!(
                        "line {}: timestamp {} does not increase (previous {})",
                        i + 1,
                        rec.t,
                        prev.t
                    )));
                }
            }
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    Ok(out)
}

pub fn load_pose_records(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    parse_pose_records(&fs::read_to_string(path)?)
}

pub fn render_pose_records(records: &[PoseRecord]) -> String {
    let mut s = String::from("# t x y z w p q r\n");
    for r in records {
        let q = r.orientation;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            r.t, r.position[0], r.position[1], r.position[2], q.w, q.p, q.q, q.r
        );
    }
    s
}

pub fn save_pose_records(path: impl AsRef<Path>, records: &[PoseRecord]) -> Result<()> {
    fs::write(path, render_pose_records(records))?;
    Ok(())
}

/// Reads a pose file; orientations are converted to Euler angles.
pub fn load_pose_file(path: impl AsRef<Path>) -> Result<Trajectory> {
    let records = load_pose_records(path)?;
    let samples = records
        .iter()
        .map(|r| Ok((r.t, r.to_pose()?)))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(samples)
}

pub fn save_pose_file(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let records = traj
        .samples()
        .iter()
        .map(|(t, p)| PoseRecord::from_pose(*t, p))
        .collect::<Result<Vec<_>>>()?;
    save_pose_records(path, &records)
}

pub fn save_features_csv(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..x.cols()).map(|j| format!("f{j}")))?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    for (j, h) in header.iter().enumerate() {
        if h != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column f{j}, found {h:?}"),
            });
        }
    }
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected {cols} fields, found {}", rec.len()),
            });
        }
        for f in rec.iter() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: i + 2,
                msg: format!("not a number: {f:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Validation("no samples".into()));
    }
    Matrix::from_vec(rows, cols, data)
}
