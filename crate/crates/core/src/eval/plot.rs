//! Deterministic SVG plots: per-dimension bands over time and a top-down
//! projection of regions. Coordinates are printed with fixed precision so
//! identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 40.0;

/// One band series over time; `lower`/`upper` may be empty for a path-only plot.
#[derive(Debug, Clone, Default)]
pub struct BandSeries<'a> {
    pub t: &'a [f64],
    pub truth: &'a [f64],
    pub center: Option<&'a [f64]>,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

/// Top-down outline of one prediction region.
#[derive(Debug, Clone, PartialEq)]
pub enum Outline {
    /// `(x0, y0, x1, y1)`.
    Rect(f64, f64, f64, f64),
    /// Center and radius.
    Circle(f64, f64, f64),
    /// Center and the two semi-axes.
    Ellipse(f64, f64, f64, f64),
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn new(
        xs: impl Iterator<Item = f64> + Clone,
        ys: impl Iterator<Item = f64> + Clone,
        w: f64,
        h: f64,
    ) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in it.filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo > hi {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = range(&mut xs.clone());
        let (y0, y1) = range(&mut ys.clone());
        Self {
            x0,
            x1,
            y0,
            y1,
            w,
            h,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (self.w - 2.0 * MARGIN)
    }

    /// Clamps infinite bounds to the frame edge.
    fn py(&self, y: f64) -> f64 {
        let v = self.h - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (self.h - 2.0 * MARGIN);
        v.clamp(MARGIN / 2.0, self.h - MARGIN / 2.0)
    }

    fn scale(&self) -> f64 {
        (self.w - 2.0 * MARGIN) / (self.x1 - self.x0)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, self.w - MARGIN, MARGIN, self.h - MARGIN);
        let _ = writeln!(
            out,
            r##"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            r - l,
            b - t
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            self.w / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            self.w / 2.0,
            self.h - 8.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="12" y="{:.2}" font-size="11" transform="rotate(-90 12 {:.2})" text-anchor="middle">{}</text>"#,
            self.h / 2.0,
            self.h / 2.0,
            escape(ylabel)
        );
        for (v, anchor, x, y) in [
            (self.x0, "start", l, b + 14.0),
            (self.x1, "end", r, b + 14.0),
        ] {
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="10">{v:.3}</text>"#
            );
        }
        for (v, y) in [(self.y0, b), (self.y1, t + 10.0)] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{y:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                l - 3.0
            );
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn polyline(out: &mut String, pts: &[(f64, f64)], style: &str) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" {style}/>"#,
        coords.join(" ")
    );
}

/// Vertices of the band envelope: upper bound forward in time, lower bound
/// backward, `2 N` points for `N` steps.
pub fn band_polygon(t: &[f64], lower: &[f64], upper: &[f64]) -> Vec<(f64, f64)> {
    t.iter()
        .zip(upper)
        .map(|(a, b)| (*a, *b))
        .chain(t.iter().zip(lower).rev().map(|(a, b)| (*a, *b)))
        .collect()
}

/// Time series of one dimension with the shaded band.
pub fn band_svg(series: &BandSeries<'_>, title: &str, ylabel: &str) -> Result<String> {
    let n = series.t.len();
    if series.truth.len() != n || series.center.is_some_and(|c| c.len() != n) {
        return Err(Error::Shape("band series lengths differ".into()));
    }
    let has_band = !series.lower.is_empty();
    if has_band && (series.lower.len() != n || series.upper.len() != n) {
        return Err(Error::Shape(
            "band bounds do not match the time axis".into(),
        ));
    }
    if series.t.iter().chain(series.truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("plot data must be finite".into()));
    }
    let ys = series
        .truth
        .iter()
        .chain(series.lower)
        .chain(series.upper)
        .copied();
    let frame = Frame::new(series.t.iter().copied(), ys, WIDTH, HEIGHT);
    let mut out = header(WIDTH, HEIGHT);
    frame.axes(&mut out, title, "t [s]", ylabel);
    if has_band && n > 0 {
        let pts: Vec<String> = band_polygon(series.t, series.lower, series.upper)
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polygon class="band" points="{}" fill="#4a90d9" fill-opacity="0.3" stroke="none"/>"##,
            pts.join(" ")
        );
    }
    let map = |v: &[f64]| -> Vec<(f64, f64)> {
        series
            .t
            .iter()
            .zip(v)
            .map(|(x, y)| (frame.px(*x), frame.py(*y)))
            .collect()
    };
    if let Some(c) = series.center {
        polyline(
            &mut out,
            &map(c),
            r##"stroke="#1f4e8c" stroke-width="1" stroke-dasharray="3,2""##,
        );
    }
    polyline(
        &mut out,
        &map(series.truth),
        r##"stroke="#111" stroke-width="1.2""##,
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Top-down (x, y) projection: ground-truth path plus region outlines.
pub fn topdown_svg(path: &[(f64, f64)], outlines: &[Outline], title: &str) -> Result<String> {
    if path.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::InvalidInput("plot data must be finite".into()));
    }
    let bounded = |o: &&Outline| match o {
        Outline::Rect(a, b, c, d) => [a, b, c, d].iter().all(|v| v.is_finite()),
        Outline::Circle(a, b, r) => [a, b, r].iter().all(|v| v.is_finite()),
        Outline::Ellipse(a, b, rx, ry) => [a, b, rx, ry].iter().all(|v| v.is_finite()),
    };
    let extents: Vec<(f64, f64, f64, f64)> = outlines
        .iter()
        .filter(bounded)
        .map(|o| match *o {
            Outline::Rect(a, b, c, d) => (a, b, c, d),
            Outline::Circle(x, y, r) => (x - r, y - r, x + r, y + r),
            Outline::Ellipse(x, y, rx, ry) => (x - rx, y - ry, x + rx, y + ry),
        })
        .collect();
    let xs = path
        .iter()
        .map(|p| p.0)
        .chain(extents.iter().flat_map(|e| [e.0, e.2]));
    let ys = path
        .iter()
        .map(|p| p.1)
        .chain(extents.iter().flat_map(|e| [e.1, e.3]));
    let size = WIDTH;
    let mut frame = Frame::new(xs, ys, size, size);
    // Equal aspect: widen the narrower axis around its center.
    let (dx, dy) = (frame.x1 - frame.x0, frame.y1 - frame.y0);
    if dx > dy {
        let c = 0.5 * (frame.y0 + frame.y1);
        (frame.y0, frame.y1) = (c - dx / 2.0, c + dx / 2.0);
    } else {
        let c = 0.5 * (frame.x0 + frame.x1);
        (frame.x0, frame.x1) = (c - dy / 2.0, c + dy / 2.0);
    }
    let mut out = header(size, size);
    frame.axes(&mut out, title, "x", "y");
    for o in outlines.iter().filter(bounded) {
        match *o {
            Outline::Rect(a, b, c, d) => {
                let (x, y) = (frame.px(a), frame.py(d));
                let _ = writeln!(
                    out,
                    r##"<rect class="region" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#d9534f" stroke-opacity="0.5"/>"##,
                    frame.px(c) - x,
                    frame.py(b) - y
                );
            }
            Outline::Circle(x, y, r) => {
                let _ = writeln!(
                    out,
                    r##"<circle class="region" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="#d9534f" stroke-opacity="0.3"/>"##,
                    frame.px(x),
                    frame.py(y),
                    r * frame.scale()
                );
            }
            Outline::Ellipse(x, y, rx, ry) => {
                let _ = writeln!(
                    out,
                    r##"<ellipse class="region" cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="#d9534f" stroke-opacity="0.3"/>"##,
                    frame.px(x),
                    frame.py(y),
                    rx * frame.scale(),
                    ry * frame.scale()
                );
            }
        }
    }
    let pts: Vec<(f64, f64)> = path
        .iter()
        .map(|(x, y)| (frame.px(*x), frame.py(*y)))
        .collect();
    polyline(&mut out, &pts, r##"stroke="#111" stroke-width="1.2""##);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes `svgs` as `<dir>/<name>.svg`, returning the paths in order.
pub fn write_svgs(dir: &Path, svgs: &[(String, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    svgs.iter()
        .map(|(name, body)| {
            let p = dir.join(format!("{name}.svg"));
            std::fs::write(&p, body)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series<'a>(t: &'a [f64], y: &'a [f64], lo: &'a [f64], hi: &'a [f64]) -> BandSeries<'a> {
        BandSeries {
            t,
            truth: y,
            center: None,
            lower: lo,
            upper: hi,
        }
    }

    #[test]
    fn polygon_has_two_vertices_per_step() {
        let t: Vec<f64> = (0..17).map(f64::from).collect();
        let lo = vec![0.0; 17];
        let hi = vec![1.0; 17];
        let poly = band_polygon(&t, &lo, &hi);
        assert_eq!(poly.len(), 34);
        assert_eq!((poly[0], poly[33]), ((0.0, 1.0), (0.0, 0.0)));
        let svg = band_svg(&series(&t, &lo, &lo, &hi), "x", "m").unwrap();
        let pts = svg
            .split("<polygon")
            .nth(1)
            .unwrap()
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(pts.split(' ').count(), 34);
    }

    #[test]
    fn empty_band_is_axes_only() {
        let t = [0.0, 1.0];
        let svg = band_svg(&series(&t, &[0.0, 1.0], &[], &[]), "x", "m").unwrap();
        assert!(!svg.contains("<polygon"));
        assert!(svg.contains("<rect"));
    }

    #[test]
    fn identical_input_identical_bytes() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|v| v.sin()).collect();
        let lo: Vec<f64> = y.iter().map(|v| v - 0.2).collect();
        let hi: Vec<f64> = y.iter().map(|v| v + f64::INFINITY).collect();
        let a = band_svg(&series(&t, &y, &lo, &hi), "<yaw>", "rad").unwrap();
        assert_eq!(
            a,
            band_svg(&series(&t, &y, &lo, &hi), "<yaw>", "rad").unwrap()
        );
        assert!(a.contains("&lt;yaw&gt;"));
        let path: Vec<(f64, f64)> = t.iter().zip(&y).map(|(a, b)| (*a, *b)).collect();
        let outlines = [
            Outline::Rect(0.0, 0.0, 1.0, 0.5),
            Outline::Circle(2.0, 0.0, 0.3),
            Outline::Rect(0.0, f64::NEG_INFINITY, 1.0, 1.0),
        ];
        let b = topdown_svg(&path, &outlines, "top").unwrap();
        assert_eq!(b, topdown_svg(&path, &outlines, "top").unwrap());
        assert_eq!(b.matches("class=\"region\"").count(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(band_svg(&series(&[0.0], &[f64::NAN], &[], &[]), "", "").is_err());
        assert!(band_svg(&series(&[0.0, 1.0], &[0.0], &[], &[]), "", "").is_err());
    }
}
