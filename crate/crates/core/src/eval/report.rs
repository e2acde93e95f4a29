//! Per-method reports and the side-by-side comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::POSE_DIMS;

/// Version of the report JSON layout; bump on any field change.
pub const REPORT_SCHEMA: u32 = 1;

/// Wall-clock medians in seconds. Kept out of the deterministic artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub fit: f64,
    pub calibrate: f64,
    pub predict: f64,
}

/// Median of `reps` timed runs of `f`, returning the last result.
pub fn timed_median<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(reps.max(1));
    let mut out = None;
    for _ in 0..reps.max(1) {
        let start = std::time::Instant::now();
        out = Some(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((
        out.expect("at least one repetition"),
        times[times.len() / 2],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub alpha: f64,
    pub n_test: usize,
    /// Label columns the method predicts (CSP may cover a subset).
    pub dims: Vec<usize>,
    /// Aligned with `dims`.
    pub coverage: Vec<f64>,
    pub joint_coverage: f64,
    /// Mean interval length (or set-region extent) per entry of `dims`;
    /// `null` in JSON when unbounded.
    #[serde(deserialize_with = "lengths_or_inf")]
    pub mean_length: Vec<f64>,
    /// `None` for methods without interval bounds or with crossed bounds.
    pub interval_score: Option<f64>,
    /// Mean region volume over test points, in the units of `dims`;
    /// `null` in JSON when unbounded.
    #[serde(deserialize_with = "number_or_inf")]
    pub volume: f64,
    pub volume_std_error: f64,
    /// Dimensions with an unbounded (`+inf`) correction.
    pub unbounded_dims: usize,
    /// Test points where an empty set was replaced by the top class.
    pub fallback_sets: usize,
    #[serde(skip)]
    pub timings: Option<Timings>,
}

/// JSON has no infinity; `serde_json` writes it as `null`, read back as `+inf`.
fn number_or_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

fn lengths_or_inf<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Vec::<Option<f64>>::deserialize(d)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::INFINITY))
        .collect())
}

impl MethodReport {
    pub fn validate(&self) -> Result<()> {
        let fractions = self
            .coverage
            .iter()
            .chain(std::iter::once(&self.joint_coverage));
        if fractions.clone().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!(
                "{}: coverage outside [0, 1]",
                self.method
            )));
        }
        if self.coverage.len() != self.dims.len() || self.mean_length.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "{}: per-dimension fields disagree with dims",
                self.method
            )));
        }
        if self.volume.is_nan() || self.volume < 0.0 {
            return Err(Error::Validation(format!(
                "{}: negative volume",
                self.method
            )));
        }
        Ok(())
    }

    fn coverage_of(&self, d: usize) -> Option<f64> {
        self.dims
            .iter()
            .position(|&k| k == d)
            .map(|i| self.coverage[i])
    }

    fn length_of(&self, d: usize) -> Option<f64> {
        self.dims
            .iter()
            .position(|&k| k == d)
            .map(|i| self.mean_length[i])
    }
}

/// Reports for several methods at a shared miscoverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema: u32,
    pub alpha: f64,
    pub methods: Vec<MethodReport>,
}

/// Aligns reports into one table; all must share `alpha`.
pub fn compare_methods(reports: Vec<MethodReport>) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!(
            "a comparison needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let alpha = reports[0].alpha;
    if let Some(r) = reports.iter().find(|r| r.alpha != alpha) {
        return Err(Error::Validation(format!(
            "alpha mismatch: {} has {}, {} has {alpha}",
            r.method, r.alpha, reports[0].method
        )));
    }
    for r in &reports {
        r.validate()?;
    }
    Ok(ComparisonTable {
        schema: REPORT_SCHEMA,
        alpha,
        methods: reports,
    })
}

fn parse_error(line: usize, msg: String) -> Error {
    Error::Parse { line, msg }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| parse_error(0, format!("bad number {s:?} in comparison table")))
    }
}

impl ComparisonTable {
    /// Metric names in CSV row order.
    pub fn metric_names() -> Vec<String> {
        let mut rows = vec!["alpha".to_string(), "n_test".to_string()];
        rows.extend(POSE_DIMS.iter().map(|d| format!("coverage_{d}")));
        rows.push("joint_coverage".into());
        rows.extend(POSE_DIMS.iter().map(|d| format!("mean_length_{d}")));
        rows.extend(
            [
                "interval_score",
                "volume",
                "volume_std_error",
                "volume_dims",
                "unbounded_dims",
                "fallback_sets",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        rows
    }

    fn column(r: &MethodReport) -> Vec<Option<f64>> {
        let mut c = vec![Some(r.alpha), Some(r.n_test as f64)];
        c.extend((0..POSE_DIMS.len()).map(|d| r.coverage_of(d)));
        c.push(Some(r.joint_coverage));
        c.extend((0..POSE_DIMS.len()).map(|d| r.length_of(d)));
        c.extend([
            r.interval_score,
            Some(r.volume),
            Some(r.volume_std_error),
            Some(r.dims.len() as f64),
            Some(r.unbounded_dims as f64),
            Some(r.fallback_sets as f64),
        ]);
        c
    }

    /// Rows are metrics, columns are methods; empty cells mean "not applicable".
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.methods.iter().map(|m| m.method.clone()));
        w.write_record(&header)?;
        let cols: Vec<Vec<Option<f64>>> = self.methods.iter().map(Self::column).collect();
        for (i, name) in Self::metric_names().iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(cols.iter().map(|c| cell(c[i])));
            w.write_record(&row)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| parse_error(0, e.to_string()))
    }

    /// Inverse of [`ComparisonTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let methods: Vec<String> = rd.headers()?.iter().skip(1).map(str::to_string).collect();
        let names = Self::metric_names();
        let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            if names.get(i).map(String::as_str) != rec.get(0) {
                return Err(parse_error(
                    i + 2,
                    format!("unexpected metric row {:?}", rec.get(0)),
                ));
            }
            let row = rec.iter().skip(1).map(parse_cell).collect::<Result<_>>();
            rows.push(row.map_err(|e| match e {
                Error::Parse { msg, .. } => parse_error(i + 2, msg),
                other => other,
            })?);
        }
        if rows.len() != names.len() {
            return Err(parse_error(
                0,
                format!("expected {} metric rows, found {}", names.len(), rows.len()),
            ));
        }
        let need =
            |v: Option<f64>, what: &str| v.ok_or_else(|| parse_error(0, format!("missing {what}")));
        let n = POSE_DIMS.len();
        let reports = methods
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let get = |i: usize| rows[i].get(j).copied().flatten();
                let dims: Vec<usize> = (0..n).filter(|&d| get(2 + d).is_some()).collect();
                Ok(MethodReport {
                    method: name.clone(),
                    alpha: need(get(0), "alpha")?,
                    n_test: need(get(1), "n_test")? as usize,
                    coverage: dims
                        .iter()
                        .map(|&d| need(get(2 + d), "coverage"))
                        .collect::<Result<_>>()?,
                    joint_coverage: need(get(2 + n), "joint coverage")?,
                    mean_length: dims
                        .iter()
                        .map(|&d| need(get(3 + n + d), "mean length"))
                        .collect::<Result<_>>()?,
                    interval_score: get(3 + 2 * n),
                    volume: need(get(4 + 2 * n), "volume")?,
                    volume_std_error: need(get(5 + 2 * n), "volume std error")?,
                    unbounded_dims: need(get(7 + 2 * n), "unbounded dims")? as usize,
                    fallback_sets: need(get(8 + 2 * n), "fallback sets")? as usize,
                    dims,
                    timings: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha = reports.first().map_or(0.0, |r| r.alpha);
        Ok(Self {
            schema: REPORT_SCHEMA,
            alpha,
            methods: reports,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.schema != REPORT_SCHEMA {
            return Err(parse_error(
                0,
                format!(
                    "report schema {} is not supported (expected {REPORT_SCHEMA})",
                    t.schema
                ),
            ));
        }
        Ok(t)
    }

    /// Fixed-width text rendering.
    pub fn render_text(&self) -> String {
        let cols: Vec<Vec<Option<f64>>> = self.methods.iter().map(Self::column).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "metric");
        for m in &self.methods {
            let _ = write!(out, "{:>14}", m.method);
        }
        out.push('\n');
        for (i, name) in Self::metric_names().iter().enumerate() {
            let _ = write!(out, "{name:<20}");
            for c in &cols {
                let s = match c[i] {
                    None => "-".to_string(),
                    Some(v) if v.is_infinite() => "inf".to_string(),
                    Some(v) if v == v.trunc() && v.abs() < 1e9 => format!("{v:.0}"),
                    Some(v) if v.abs() < 1e-3 => format!("{v:.3e}"),
                    Some(v) => format!("{v:.4}"),
                };
                let _ = write!(out, "{s:>14}");
            }
            out.push('\n');
        }
        out
    }

    /// Timings per method as JSON (non-deterministic, written separately).
    pub fn timings_json(&self) -> Result<String> {
        let map: serde_json::Map<String, serde_json::Value> = self
            .methods
            .iter()
            .map(|m| {
                Ok((
                    m.method.clone(),
                    serde_json::to_value(m.timings.unwrap_or_default())?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(serde_json::to_string_pretty(&map)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(method: &str, alpha: f64) -> MethodReport {
        MethodReport {
            method: method.into(),
            alpha,
            n_test: 1000,
            dims: (0..6).collect(),
            coverage: vec![0.9, 0.91, 0.899, 0.9123456789012345, 0.88, 1.0],
            joint_coverage: 0.6,
            mean_length: vec![0.1, 0.2, 0.3, 1e-7, 0.05, 0.0],
            interval_score: Some(0.3333333333333333),
            volume: 1.5e-9,
            volume_std_error: 0.0,
            unbounded_dims: 0,
            fallback_sets: 0,
            timings: Some(Timings {
                fit: 1.0,
                calibrate: 0.1,
                predict: 0.2,
            }),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let mut csp = sample("csp", 0.1);
        csp.dims = vec![0, 1, 2];
        csp.coverage.truncate(3);
        csp.mean_length.truncate(3);
        csp.interval_score = None;
        csp.fallback_sets = 3;
        let mut open = sample("cqr", 0.1);
        open.unbounded_dims = 2;
        open.volume = f64::INFINITY;
        let t = compare_methods(vec![open, csp]).unwrap();
        let back = ComparisonTable::from_csv(&t.to_csv().unwrap()).unwrap();
        let strip = |t: &ComparisonTable| {
            t.methods
                .iter()
                .map(|m| MethodReport {
                    timings: None,
                    ..m.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&back), strip(&t));
        assert!(t.render_text().contains("coverage_yaw"));
    }

    #[test]
    fn json_roundtrip_and_duplicates() {
        let t = compare_methods(vec![sample("a", 0.1), sample("a", 0.1)]).unwrap();
        let cols: Vec<_> = t.methods.iter().map(ComparisonTable::column).collect();
        assert_eq!(cols[0], cols[1]);
        let json = t.to_json().unwrap();
        assert!(!json.contains("timings") && !json.contains("fit"));
        let back = ComparisonTable::from_json(&json).unwrap();
        assert_eq!(back.methods[0].coverage, t.methods[0].coverage);
        assert!(t.timings_json().unwrap().contains("\"fit\": 1.0"));
    }

    #[test]
    fn rejects_mismatched_alpha_and_bad_values() {
        assert!(matches!(
            compare_methods(vec![sample("a", 0.1), sample("b", 0.2)]),
            Err(Error::Validation(_))
        ));
        assert!(compare_methods(vec![sample("a", 0.1)]).is_err());
        let mut bad = sample("b", 0.1);
        bad.coverage[0] = 1.2;
        assert!(compare_methods(vec![sample("a", 0.1), bad]).is_err());
        assert!(ComparisonTable::from_csv("metric,a\nalpha,x\n").is_err());
    }

    #[test]
    fn median_timing() {
        let mut calls = 0;
        let (v, t) = timed_median(3, || {
            calls += 1;
            Ok(calls)
        })
        .unwrap();
        assert_eq!((v, calls), (3, 3));
        assert!(t >= 0.0);
    }
}
