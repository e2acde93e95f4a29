//! Browser demo of conformal calibration, compiled to WebAssembly.
//!
//! Three operations, each returning a JSON string for `www/index.html`:
//!
//! * [`cqr_band`]: fit and calibrate CQR on a small simulated trajectory and
//!   return the SVG band for one pose dimension.
//! * [`comcal_curve`]: the calibration/sharpness objective as a function of
//!   interval scale for a chosen trade-off weight.
//! * [`csp_sets`]: class sets on a bimodal dataset, including how often they
//!   split into disjoint pieces.
//!
//! The `*_json` functions hold the logic and run natively; the exported
//! wrappers only translate errors for JavaScript.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use cvo::data::{
    simulate_bimodal, simulate_trajectory, split_dataset, BimodalConfig, SimConfig, SplitFractions,
};
use cvo::diffnet::loss::{batch_coverage, cal_obj, comcal_loss, sharp_obj};
use cvo::eval::{band_coverage, band_svg, mean_widths, BandSeries};
use cvo::geom::POSE_DIMS;
use cvo::methods::cqr::{cqr_fit, CqrConfig};
use cvo::methods::csp::{csp_train, CspConfig};
use cvo::methods::TrainConfig;
use cvo::qforest::ForestConfig;
use cvo::{rng, Error, Matrix, Result};

#[derive(Debug, Serialize)]
pub struct BandDemo {
    pub svg: String,
    pub coverage: f64,
    pub mean_width: f64,
    pub q_cal: f64,
    pub n_cal: usize,
}

/// CQR on a 700-frame simulated trajectory; band for dimension `dim` over the test frames.
pub fn cqr_band_json(seed: u64, alpha: f64, dim: usize) -> Result<String> {
    if dim >= POSE_DIMS.len() {
        return Err(Error::InvalidInput(format!("dimension {dim} outside 0..6")));
    }
    let sim = simulate_trajectory(&SimConfig {
        n: 700,
        feature_dim: 8,
        seed,
        ..SimConfig::default()
    })?;
    let ds = sim.dataset;
    let split = split_dataset(ds.len(), SplitFractions::default(), seed)?;
    let cfg = CqrConfig {
        alpha,
        forest: ForestConfig {
            n_trees: 25,
            seed,
            ..ForestConfig::default()
        },
    };
    let mut model = cqr_fit(&ds, &split, &cfg)?;
    model.calibrate(&ds, &split.cal)?;

    let mut test = split.test.clone();
    test.sort_by(|&a, &b| ds.t[a].total_cmp(&ds.t[b]));
    let band = model.predict(&ds.x.select_rows(&test))?;
    let y = ds.y.select_rows(&test);
    let t: Vec<f64> = test.iter().map(|&i| ds.t[i]).collect();
    let (truth, lower, upper) = (
        y.column(dim),
        band.lower.column(dim),
        band.upper.column(dim),
    );
    let series = BandSeries {
        t: &t,
        truth: &truth,
        center: None,
        lower: &lower,
        upper: &upper,
    };
    let name = POSE_DIMS[dim];
    let demo = BandDemo {
        svg: band_svg(&series, &format!("CQR band, {name}, alpha = {alpha}"), name)?,
        coverage: band_coverage(&band, &y)?.per_dim[dim],
        mean_width: mean_widths(&band)[dim],
        q_cal: model.q_cal()?[dim],
        n_cal: split.cal.len(),
    };
    Ok(serde_json::to_string(&demo)?)
}

#[derive(Debug, Serialize)]
pub struct CurveDemo {
    pub scales: Vec<f64>,
    pub coverage: Vec<f64>,
    pub cal: Vec<f64>,
    pub sharp: Vec<f64>,
    pub comcal: Vec<f64>,
    /// Scale minimizing the combined objective, and its coverage.
    pub best_scale: f64,
    pub best_coverage: f64,
}

/// Heteroskedastic labels `y = sigma(x) z` with intervals `[-s sigma, s sigma]`;
/// evaluates coverage and the calibration/sharpness objectives over `s`.
pub fn comcal_curve_json(lambda: f64, p: f64, seed: u64) -> Result<String> {
    let n = 2000;
    let mut r = rng::stream(seed, 0);
    let sigma: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let y: Vec<f64> = sigma
        .iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(&mut r);
            s * z
        })
        .collect();
    let y = Matrix::from_vec(n, 1, y)?;
    let mut demo = CurveDemo {
        scales: Vec::new(),
        coverage: Vec::new(),
        cal: Vec::new(),
        sharp: Vec::new(),
        comcal: Vec::new(),
        best_scale: 0.0,
        best_coverage: 0.0,
    };
    let mut best = f64::INFINITY;
    for k in 1..=60 {
        let s = k as f64 * 0.05;
        let lower = Matrix::from_vec(n, 1, sigma.iter().map(|v| -s * v).collect())?;
        let upper = Matrix::from_vec(n, 1, sigma.iter().map(|v| s * v).collect())?;
        let cov = batch_coverage(&y, &lower, &upper)?;
        let cal = cal_obj(&y, &lower, &upper, p, &cov)?.value;
        let sharp = sharp_obj(&lower, &upper, p)?.value;
        let total = comcal_loss(cal, sharp, lambda)?;
        if total < best {
            best = total;
            demo.best_scale = s;
            demo.best_coverage = cov[0];
        }
        demo.scales.push(s);
        demo.coverage.push(cov[0]);
        demo.cal.push(cal);
        demo.sharp.push(sharp);
        demo.comcal.push(total);
    }
    Ok(serde_json::to_string(&demo)?)
}

#[derive(Debug, Serialize)]
pub struct SetExample {
    pub truth: f64,
    /// Selected bins as `[lo, hi]` intervals.
    pub intervals: Vec<(f64, f64)>,
    pub covered: bool,
}

#[derive(Debug, Serialize)]
pub struct SetDemo {
    pub coverage: f64,
    pub disjoint_fraction: f64,
    pub mean_set_size: f64,
    /// Bin edges of the x dimension.
    pub edges: Vec<f64>,
    pub examples: Vec<SetExample>,
}

/// CSP over the x position of a bimodal dataset (features cannot tell the two branches apart).
pub fn csp_sets_json(seed: u64, alpha: f64) -> Result<String> {
    let ds = simulate_bimodal(&BimodalConfig {
        n: 1400,
        seed,
        ..BimodalConfig::default()
    })?;
    let split = split_dataset(ds.len(), SplitFractions::default(), seed)?;
    let cfg = CspConfig {
        alpha,
        classes: 15,
        dims: vec![0],
        train: TrainConfig {
            hidden: 32,
            epochs: 25,
            seed,
            ..TrainConfig::default()
        },
        ..CspConfig::default()
    };
    let mut model = csp_train(&ds, &split, &cfg)?;
    model.calibrate(&ds, &split.cal)?;
    let x = ds.x.select_rows(&split.test);
    let y = ds.y.select_rows(&split.test);
    let sets = model.predict_sets(&x, cfg.rule)?;
    let truth = model.true_classes(&y);
    let n = sets.len() as f64;
    let covered: Vec<bool> = sets
        .iter()
        .zip(&truth)
        .map(|(s, c)| s.contains(0, c[0]))
        .collect();
    let demo = SetDemo {
        coverage: covered.iter().filter(|&&c| c).count() as f64 / n,
        disjoint_fraction: sets.iter().filter(|s| s.is_disjoint(0)).count() as f64 / n,
        mean_set_size: sets.iter().map(|s| s.classes[0].len()).sum::<usize>() as f64 / n,
        edges: model.discretizations[0].edges.clone(),
        examples: sets
            .iter()
            .zip(&covered)
            .enumerate()
            .take(40)
            .map(|(r, (s, &c))| SetExample {
                truth: y.get(r, 0),
                intervals: model.region(s).intervals[0].clone(),
                covered: c,
            })
            .collect(),
    };
    Ok(serde_json::to_string(&demo)?)
}

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn cqr_band(seed: u32, alpha: f64, dim: u32) -> std::result::Result<String, JsValue> {
    cqr_band_json(seed.into(), alpha, dim as usize).map_err(js_err)
}

#[wasm_bindgen]
pub fn comcal_curve(lambda: f64, p: f64, seed: u32) -> std::result::Result<String, JsValue> {
    comcal_curve_json(lambda, p, seed.into()).map_err(js_err)
}

#[wasm_bindgen]
pub fn csp_sets(seed: u32, alpha: f64) -> std::result::Result<String, JsValue> {
    csp_sets_json(seed.into(), alpha).map_err(js_err)
}
