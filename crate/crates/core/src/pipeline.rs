//! End-to-end runs driven by one JSON configuration: data generation or
//! loading, training, calibration, evaluation and the method comparison.
//!
//! Every stage writes its artifacts under the run's output directory:
//!
//! ```text
//! <out>/config.json               resolved configuration
//! <out>/data/poses.txt            simulate: time-stamped poses
//! <out>/data/features.csv         simulate: feature matrix
//! <out>/data/split.json           simulate: train/cal/test indices
//! <out>/models/<method>.ckpt      train, calibrate
//! <out>/cjp_training_log.csv      train (CJP)
//! <out>/reports/<method>.json     evaluate
//! <out>/plots/<method>_*.svg      evaluate
//! <out>/comparison.{json,csv,txt} report, compare
//! <out>/timings.json              wall-clock seconds (not deterministic)
//! ```
//!
//! Apart from `timings.json`, the outputs depend only on the configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    apply_noise_matrix, load_features_csv, load_pose_file, save_features_csv, save_pose_file,
    simulate_trajectory, split_dataset, DataSplit, Dataset, NoiseKind, NoiseSpec, SimConfig,
    SplitFractions, MIN_CALIBRATION,
};
use crate::error::{Error, Result};
use crate::eval::{
    band_coverage, band_svg, compare_methods, coverage_metrics, mean_interval_score, mean_volume,
    mean_widths, timed_median, topdown_svg, volume_estimate, write_svgs, BandSeries,
    ComparisonTable, MethodReport, Outline, Region, Timings, VolumeEstimate,
};
use crate::geom::POSE_DIMS;
use crate::matrix::Matrix;
use crate::methods::cjp::{cjp_train, write_training_log, CjpConfig, CjpModel};
use crate::methods::cqr::{cqr_fit, CqrConfig, CqrModel};
use crate::methods::csp::{csp_train, CspConfig, CspModel, PredictionSet, SetRegion};
use crate::methods::mcqr::{mcqr_fit, BallUnionRegion, McqrConfig, McqrModel};
use crate::methods::IntervalBand;
use crate::rng::derive_seed;

/// Version of the configuration layout.
pub const CONFIG_SCHEMA: u32 = 1;
/// Output root used when the configuration names no output directory.
pub const OUTPUT_ROOT_ENV: &str = "CVO_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Seed tags for the per-component seeds derived from the run seed.
mod seed_tags {
    pub const NOISE: u64 = 100;
    pub const CQR: u64 = 101;
    pub const CSP: u64 = 102;
    pub const MCQR_PREDICTOR: u64 = 103;
    pub const MCQR_CVAE: u64 = 104;
    pub const CJP: u64 = 105;
    pub const VOLUME: u64 = 106;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Cqr,
    Csp,
    Mcqr,
    Cjp,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::Cqr, MethodId::Csp, MethodId::Mcqr, MethodId::Cjp];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Cqr => "cqr",
            MethodId::Csp => "csp",
            MethodId::Mcqr => "mcqr",
            MethodId::Cjp => "cjp",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown method {s:?}; expected one of cqr, csp, mcqr, cjp"
                ))
            })
    }
}

/// Parses a comma-separated method list, keeping the first occurrence of each.
pub fn parse_methods(list: &str) -> Result<Vec<MethodId>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: MethodId = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("empty method list".into()));
    }
    Ok(out)
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// The heteroskedastic trajectory simulator.
    Simulate(SimConfig),
    /// A pose file (`t x y z qw qx qy qz` per line) and a feature CSV with one row per pose.
    Files { poses: PathBuf, features: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate(SimConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    /// Run name; the output directory defaults to `$CVO_OUTPUT_ROOT/<name>`.
    pub name: String,
    /// Master seed. Simulation, split, noise and every method seed derive from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub split: SplitFractions,
    /// Extra feature noise applied after loading.
    pub noise: NoiseSpec,
    /// Methods run when no method list is given on the command line.
    pub methods: Vec<MethodId>,
    pub cqr: CqrConfig,
    pub csp: CspConfig,
    pub mcqr: McqrConfig,
    pub cjp: CjpConfig,
    /// Monte Carlo samples per test point for ball-union volumes.
    pub volume_samples: usize,
    /// Repetitions behind each calibrate/predict wall-clock median.
    pub timing_reps: usize,
    /// Test points whose regions are outlined in the top-down plot.
    pub plot_regions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            name: "run".into(),
            seed: 0,
            output_dir: None,
            data: DataSource::default(),
            split: SplitFractions::default(),
            noise: NoiseSpec::default(),
            methods: MethodId::ALL.to_vec(),
            cqr: CqrConfig::default(),
            csp: CspConfig::default(),
            mcqr: McqrConfig::default(),
            cjp: CjpConfig::default(),
            volume_samples: 2000,
            timing_reps: 3,
            plot_regions: 12,
        }
    }
}

/// Configuration problems are validation errors (exit code 1), whatever their source.
fn config_error(context: &str, e: impl fmt::Display) -> Error {
    Error::Validation(format!("{context}: {e}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_error("invalid configuration", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(&format!("cannot read {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Sets one field by dotted path (`cqr.alpha`, `data.n`, `seed`). The
    /// value is parsed as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Validation(format!("unknown configuration key {key:?}")))?;
        }
        *node =
            serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
        *self = serde_json::from_value(tree)
            .map_err(|e| config_error(&format!("bad value for {key}"), e))?;
        Ok(())
    }

    /// Overwrites every component seed with one derived from `seed`.
    pub fn resolve(&mut self) {
        let s = self.seed;
        if let DataSource::Simulate(sim) = &mut self.data {
            sim.seed = s;
        }
        self.noise.seed = derive_seed(s, seed_tags::NOISE);
        self.cqr.forest.seed = derive_seed(s, seed_tags::CQR);
        self.csp.train.seed = derive_seed(s, seed_tags::CSP);
        self.mcqr.predictor.seed = derive_seed(s, seed_tags::MCQR_PREDICTOR);
        self.mcqr.cvae.seed = derive_seed(s, seed_tags::MCQR_CVAE);
        self.cjp.train.seed = derive_seed(s, seed_tags::CJP);
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Validation(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Validation(format!(
                "run name {:?} must be a non-empty file name",
                self.name
            )));
        }
        if let DataSource::Simulate(sim) = &self.data {
            sim.validate()?;
        }
        let mut noise = self.noise;
        noise.saturation.get_or_insert((0.0, 1.0));
        noise.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Validation("no methods selected".into()));
        }
        for alpha in [self.cqr.alpha, self.csp.alpha, self.mcqr.alpha] {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Validation(format!(
                    "alpha must be in (0, 1), got {alpha}"
                )));
            }
        }
        if self.csp.classes < 2
            || self.csp.dims.is_empty()
            || self.csp.dims.iter().any(|&d| d >= POSE_DIMS.len())
        {
            return Err(Error::Validation(
                "csp needs at least 2 classes and pose dimensions in 0..6".into(),
            ));
        }
        if self.mcqr.latent_dim == 0
            || self.mcqr.grid_points == 0
            || !(0.0..1.0).contains(&self.mcqr.dropout)
        {
            return Err(Error::Validation(
                "mcqr needs a latent dimension, grid points and dropout in [0, 1)".into(),
            ));
        }
        for t in [&self.csp.train, &self.mcqr.predictor, &self.mcqr.cvae] {
            t.validate()?;
        }
        self.cjp.validate()?;
        if self.volume_samples == 0 || self.timing_reps == 0 {
            return Err(Error::Validation(
                "volume_samples and timing_reps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output directory: explicit, else `$CVO_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ROOT_ENV)
                .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
                .join(&self.name)
        })
    }

    /// Miscoverage each method reports at.
    pub fn alpha_of(&self, m: MethodId) -> f64 {
        match m {
            MethodId::Cqr => self.cqr.alpha,
            MethodId::Csp => self.csp.alpha,
            MethodId::Mcqr => self.mcqr.alpha,
            MethodId::Cjp => self.cjp.alpha(),
        }
    }
}

/// Artifact locations of one run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn poses(&self) -> PathBuf {
        self.root.join("data").join("poses.txt")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("data").join("features.csv")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("data").join("split.json")
    }

    pub fn model(&self, m: MethodId) -> PathBuf {
        self.root.join("models").join(format!("{m}.ckpt"))
    }

    pub fn report(&self, m: MethodId) -> PathBuf {
        self.root.join("reports").join(format!("{m}.json"))
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("cjp_training_log.csv")
    }

    pub fn comparison(&self, ext: &str) -> PathBuf {
        self.root.join(format!("comparison.{ext}"))
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}

/// A validated, seed-resolved configuration bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub paths: RunPaths,
}

impl Run {
    /// Resolves seeds, validates, and writes the resolved configuration copy.
    pub fn prepare(mut config: RunConfig) -> Result<Self> {
        config.resolve();
        config.validate()?;
        let paths = RunPaths::new(config.output_root());
        write_file(&paths.config(), config.to_json()?)?;
        Ok(Self { config, paths })
    }

    fn update_timings(&self, m: MethodId, f: impl FnOnce(&mut Timings)) -> Result<()> {
        let path = self.paths.timings();
        let mut all: BTreeMap<String, Timings> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        f(all.entry(m.to_string()).or_default());
        write_file(&path, serde_json::to_string_pretty(&all)? + "\n")
    }
}

/// Samples plus their split.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub split: DataSplit,
}

/// Simulates or loads the samples, applies the configured feature noise and splits.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let mut dataset = match &cfg.data {
        DataSource::Simulate(sim) => simulate_trajectory(sim)?.dataset,
        DataSource::Files { poses, features } => {
            let traj = load_pose_file(poses)?;
            Dataset::from_trajectory(&traj, load_features_csv(features)?)?
        }
    };
    if cfg.noise.kind != NoiseKind::None {
        dataset.x = apply_noise_matrix(&dataset.x, &cfg.noise)?;
    }
    let split = split_dataset(dataset.len(), cfg.split, cfg.seed)?;
    split.require_calibration(MIN_CALIBRATION)?;
    Ok(LoadedData { dataset, split })
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    seed: u64,
    fractions: SplitFractions,
    #[serde(flatten)]
    split: &'a DataSplit,
}

/// `simulate`: writes the pose file, feature CSV and split manifest.
pub fn simulate(run: &Run) -> Result<Vec<PathBuf>> {
    let DataSource::Simulate(sim) = &run.config.data else {
        return Err(Error::Validation(
            "simulate needs a \"simulate\" data source".into(),
        ));
    };
    let ds = simulate_trajectory(sim)?.dataset;
    let split = split_dataset(ds.len(), run.config.split, run.config.seed)?;
    let p = &run.paths;
    fs::create_dir_all(p.root.join("data"))?;
    save_pose_file(p.poses(), &ds.trajectory()?)?;
    save_features_csv(p.features(), &ds.x)?;
    let manifest = SplitManifest {
        seed: run.config.seed,
        fractions: run.config.split,
        split: &split,
    };
    write_file(&p.split(), serde_json::to_string(&manifest)? + "\n")?;
    Ok(vec![p.poses(), p.features(), p.split()])
}

/// A fitted model of any method.
#[derive(Debug, Clone)]
pub enum Model {
    Cqr(CqrModel),
    Csp(CspModel),
    Mcqr(McqrModel),
    Cjp(CjpModel),
}

impl Model {
    pub fn method(&self) -> MethodId {
        match self {
            Model::Cqr(_) => MethodId::Cqr,
            Model::Csp(_) => MethodId::Csp,
            Model::Mcqr(_) => MethodId::Mcqr,
            Model::Cjp(_) => MethodId::Cjp,
        }
    }

    pub fn fit(m: MethodId, cfg: &RunConfig, data: &LoadedData) -> Result<Self> {
        let (ds, split) = (&data.dataset, &data.split);
        Ok(match m {
            MethodId::Cqr => Model::Cqr(cqr_fit(ds, split, &cfg.cqr)?),
            MethodId::Csp => Model::Csp(csp_train(ds, split, &cfg.csp)?),
            MethodId::Mcqr => Model::Mcqr(mcqr_fit(ds, split, &cfg.mcqr)?),
            MethodId::Cjp => Model::Cjp(cjp_train(ds, split, &cfg.cjp)?),
        })
    }

    /// Conformal calibration on the calibration rows. CJP is corrected
    /// post hoc only when its configuration asks for it.
    pub fn calibrate(&mut self, cfg: &RunConfig, data: &LoadedData) -> Result<()> {
        let (ds, cal) = (&data.dataset, &data.split.cal);
        match self {
            Model::Cqr(m) => m.calibrate(ds, cal),
            Model::Csp(m) => m.calibrate(ds, cal),
            Model::Mcqr(m) => m.calibrate(ds, cal),
            Model::Cjp(m) if cfg.cjp.posthoc => m.posthoc_calibrate(ds, cal, cfg.cjp.alpha()),
            Model::Cjp(_) => Ok(()),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        match self {
            Model::Cqr(m) => m.to_checkpoint(),
            Model::Csp(m) => m.to_checkpoint(),
            Model::Mcqr(m) => m.to_checkpoint(),
            Model::Cjp(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(m: MethodId, ck: &Checkpoint) -> Result<Self> {
        Ok(match m {
            MethodId::Cqr => Model::Cqr(CqrModel::from_checkpoint(ck)?),
            MethodId::Csp => Model::Csp(CspModel::from_checkpoint(ck)?),
            MethodId::Mcqr => Model::Mcqr(McqrModel::from_checkpoint(ck)?),
            MethodId::Cjp => Model::Cjp(CjpModel::from_checkpoint(ck)?),
        })
    }

    /// Regions for every row of `x`.
    pub fn predict(&self, cfg: &RunConfig, x: &Matrix) -> Result<Prediction<'_>> {
        Ok(match self {
            Model::Cqr(m) => Prediction::Band {
                center: None,
                band: m.predict(x)?,
            },
            Model::Cjp(m) => {
                let (center, band) = m.predict(x)?;
                Prediction::Band {
                    center: Some(center),
                    band,
                }
            }
            Model::Csp(m) => {
                let sets = m.predict_sets(x, cfg.csp.rule)?;
                let regions = sets.iter().map(|s| m.region(s)).collect();
                Prediction::Sets {
                    sets,
                    regions,
                    true_class: Box::new(move |y: &Matrix| m.true_classes(y)),
                }
            }
            Model::Mcqr(m) => Prediction::Balls(m.regions(x)?),
        })
    }
}

/// Test-time output of a model.
pub enum Prediction<'a> {
    /// Per-dimension intervals (CQR, CJP).
    Band {
        center: Option<Matrix>,
        band: IntervalBand,
    },
    /// Class sets and their bin regions (CSP).
    Sets {
        sets: Vec<PredictionSet>,
        regions: Vec<SetRegion>,
        true_class: Box<dyn Fn(&Matrix) -> Vec<Vec<usize>> + 'a>,
    },
    /// Ball unions (MCQR).
    Balls(Vec<BallUnionRegion>),
}

/// Report and plots of one method on the test rows.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MethodReport,
    /// `(file name, SVG body)`.
    pub plots: Vec<(String, String)>,
}

/// Test rows sorted by time, so bands plot as time series.
fn test_order(data: &LoadedData) -> Vec<usize> {
    let mut idx = data.split.test.clone();
    idx.sort_by(|&a, &b| {
        data.dataset.t[a]
            .total_cmp(&data.dataset.t[b])
            .then(a.cmp(&b))
    });
    idx
}

/// `count` evenly spaced positions in `0..n`.
fn spaced(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|k| k * n / count).collect()
}

fn band_plots(
    m: MethodId,
    t: &[f64],
    y: &Matrix,
    dims: &[usize],
    center: Option<&Matrix>,
    lower: &Matrix,
    upper: &Matrix,
) -> Result<Vec<(String, String)>> {
    dims.iter()
        .enumerate()
        .map(|(k, &d)| {
            let truth = y.column(d);
            let c = center.map(|c| c.column(d));
            let (lo, hi) = (lower.column(k), upper.column(k));
            let series = BandSeries {
                t,
                truth: &truth,
                center: c.as_deref(),
                lower: &lo,
                upper: &hi,
            };
            let name = POSE_DIMS[d];
            Ok((
                format!("{m}_{name}"),
                band_svg(
                    &series,
                    &format!("{} {name}", m.name().to_uppercase()),
                    name,
                )?,
            ))
        })
        .collect()
}

/// Builds the report and plots for one method. `pred` must cover the test
/// rows in [`test_order`].
pub fn evaluate_prediction(
    m: MethodId,
    cfg: &RunConfig,
    data: &LoadedData,
    pred: &Prediction<'_>,
) -> Result<Evaluation> {
    let order = test_order(data);
    let y = data.dataset.y.select_rows(&order);
    let t: Vec<f64> = order.iter().map(|&i| data.dataset.t[i]).collect();
    let path: Vec<(f64, f64)> = (0..y.rows()).map(|r| (y.get(r, 0), y.get(r, 1))).collect();
    let outlined = spaced(order.len(), cfg.plot_regions);
    let alpha = cfg.alpha_of(m);
    let title = format!("{} top-down", m.name().to_uppercase());
    let all_dims: Vec<usize> = (0..y.cols()).collect();

    let (report, plots) = match pred {
        Prediction::Band { center, band } => {
            let cov = band_coverage(band, &y)?;
            let volumes: Vec<VolumeEstimate> = (0..band.len())
                .map(|r| volume_estimate(Region::Box(&band.box_region(r)), cfg.volume_samples, 0))
                .collect::<Result<_>>()?;
            let vol = mean_volume(&volumes);
            let report = MethodReport {
                method: m.to_string(),
                alpha,
                n_test: order.len(),
                dims: all_dims.clone(),
                coverage: cov.per_dim,
                joint_coverage: cov.joint,
                mean_length: mean_widths(band),
                interval_score: mean_interval_score(band, &y, alpha)?,
                volume: vol.value,
                volume_std_error: vol.std_error,
                unbounded_dims: band.unbounded_dims().iter().filter(|&&u| u).count(),
                fallback_sets: 0,
                timings: None,
            };
            let mut plots = band_plots(
                m,
                &t,
                &y,
                &all_dims,
                center.as_ref(),
                &band.lower,
                &band.upper,
            )?;
            let outlines: Vec<Outline> = outlined
                .iter()
                .map(|&r| {
                    Outline::Rect(
                        band.lower.get(r, 0),
                        band.lower.get(r, 1),
                        band.upper.get(r, 0),
                        band.upper.get(r, 1),
                    )
                })
                .collect();
            plots.push((
                format!("{m}_topdown"),
                topdown_svg(&path, &outlines, &title)?,
            ));
            (report, plots)
        }
        Prediction::Sets {
            sets,
            regions,
            true_class,
        } => {
            let truth = true_class(&y);
            let inside: Vec<Vec<bool>> = sets
                .iter()
                .zip(&truth)
                .map(|(s, c)| {
                    c.iter()
                        .enumerate()
                        .map(|(h, &k)| s.contains(h, k))
                        .collect()
                })
                .collect();
            let cov = coverage_metrics(&inside, None)?;
            let dims = regions
                .first()
                .map_or_else(|| cfg.csp.dims.clone(), |r| r.dims.clone());
            let n = regions.len().max(1) as f64;
            let mean_length = (0..dims.len())
                .map(|h| regions.iter().map(|r| r.extent(h)).sum::<f64>() / n)
                .collect();
            let volumes: Vec<VolumeEstimate> = regions
                .iter()
                .map(|r| volume_estimate(Region::Sets(r), cfg.volume_samples, 0))
                .collect::<Result<_>>()?;
            let vol = mean_volume(&volumes);
            let report = MethodReport {
                method: m.to_string(),
                alpha,
                n_test: order.len(),
                dims: dims.clone(),
                coverage: cov.per_dim,
                joint_coverage: cov.joint,
                mean_length,
                interval_score: None,
                volume: vol.value,
                volume_std_error: vol.std_error,
                unbounded_dims: 0,
                fallback_sets: sets
                    .iter()
                    .filter(|s| s.fallback.iter().any(|&f| f))
                    .count(),
                timings: None,
            };
            // Envelope of each set region per dimension.
            let mut lower = Matrix::zeros(regions.len(), dims.len());
            let mut upper = Matrix::zeros(regions.len(), dims.len());
            for (r, reg) in regions.iter().enumerate() {
                for (h, iv) in reg.intervals.iter().enumerate() {
                    lower.set(r, h, iv.iter().map(|p| p.0).fold(f64::INFINITY, f64::min));
                    upper.set(
                        r,
                        h,
                        iv.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
                    );
                }
            }
            let mut plots = band_plots(m, &t, &y, &dims, None, &lower, &upper)?;
            let (hx, hy) = (
                dims.iter().position(|&d| d == 0),
                dims.iter().position(|&d| d == 1),
            );
            let mut outlines = Vec::new();
            if let (Some(hx), Some(hy)) = (hx, hy) {
                for &r in &outlined {
                    for a in &regions[r].intervals[hx] {
                        for b in &regions[r].intervals[hy] {
                            outlines.push(Outline::Rect(a.0, b.0, a.1, b.1));
                        }
                    }
                }
            }
            plots.push((
                format!("{m}_topdown"),
                topdown_svg(&path, &outlines, &title)?,
            ));
            (report, plots)
        }
        Prediction::Balls(regions) => {
            let dims = y.cols();
            let mut lower = Matrix::zeros(regions.len(), dims);
            let mut upper = Matrix::zeros(regions.len(), dims);
            for (r, reg) in regions.iter().enumerate() {
                let (lo, hi) = reg.bounds();
                lower.row_mut(r).copy_from_slice(&lo);
                upper.row_mut(r).copy_from_slice(&hi);
            }
            let envelope = IntervalBand::uncalibrated(lower.clone(), upper.clone())?;
            let joint: Vec<bool> = regions
                .iter()
                .enumerate()
                .map(|(r, reg)| reg.contains(y.row(r)))
                .collect();
            let per_dim = crate::eval::band_membership(&envelope, &y)?;
            let cov = coverage_metrics(&per_dim, Some(&joint))?;
            let base = derive_seed(cfg.seed, seed_tags::VOLUME);
            let volumes: Vec<VolumeEstimate> = regions
                .iter()
                .enumerate()
                .map(|(r, reg)| {
                    volume_estimate(
                        Region::Balls(reg),
                        cfg.volume_samples,
                        derive_seed(base, r as u64),
                    )
                })
                .collect::<Result<_>>()?;
            let vol = mean_volume(&volumes);
            let report = MethodReport {
                method: m.to_string(),
                alpha,
                n_test: order.len(),
                dims: all_dims.clone(),
                coverage: cov.per_dim,
                joint_coverage: cov.joint,
                mean_length: mean_widths(&envelope),
                interval_score: mean_interval_score(&envelope, &y, alpha)?,
                volume: vol.value,
                volume_std_error: vol.std_error,
                unbounded_dims: if regions.iter().any(BallUnionRegion::is_unbounded) {
                    dims
                } else {
                    0
                },
                fallback_sets: 0,
                timings: None,
            };
            let mut plots = band_plots(m, &t, &y, &all_dims, None, &lower, &upper)?;
            let mut outlines = Vec::new();
            for &r in &outlined {
                let reg = &regions[r];
                let (s, mu) = (&reg.y_std.std, &reg.y_std.mean);
                for j in 0..reg.centers.rows() {
                    let c = reg.centers.row(j);
                    outlines.push(Outline::Ellipse(
                        c[0] * s[0] + mu[0],
                        c[1] * s[1] + mu[1],
                        reg.radius * s[0],
                        reg.radius * s[1],
                    ));
                }
            }
            plots.push((
                format!("{m}_topdown"),
                topdown_svg(&path, &outlines, &title)?,
            ));
            (report, plots)
        }
    };
    report.validate()?;
    Ok(Evaluation { report, plots })
}

fn save_model(run: &Run, model: &Model) -> Result<()> {
    let path = run.paths.model(model.method());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    model.to_checkpoint()?.save(path)
}

fn load_model(run: &Run, m: MethodId) -> Result<Model> {
    let path = run.paths.model(m);
    if !path.exists() {
        return Err(Error::State(format!(
            "no {m} checkpoint at {}; run `train` first",
            path.display()
        )));
    }
    Model::from_checkpoint(m, &Checkpoint::load(path)?)
}

fn fit_timed(run: &Run, m: MethodId, data: &LoadedData) -> Result<Model> {
    let start = std::time::Instant::now();
    let model = Model::fit(m, &run.config, data)?;
    let fit = start.elapsed().as_secs_f64();
    run.update_timings(m, |t| t.fit = fit)?;
    if let Model::Cjp(c) = &model {
        let mut log = Vec::new();
        write_training_log(&c.log, &mut log)?;
        write_file(&run.paths.training_log(), log)?;
    }
    Ok(model)
}

fn calibrate_timed(run: &Run, model: &mut Model, data: &LoadedData) -> Result<()> {
    let ((), secs) = timed_median(run.config.timing_reps, || {
        model.calibrate(&run.config, data)
    })?;
    run.update_timings(model.method(), |t| t.calibrate = secs)
}

fn evaluate_timed(run: &Run, model: &Model, data: &LoadedData) -> Result<Evaluation> {
    let x = data.dataset.x.select_rows(&test_order(data));
    let m = model.method();
    let (pred, secs) = timed_median(run.config.timing_reps, || model.predict(&run.config, &x))?;
    let mut eval = evaluate_prediction(m, &run.config, data, &pred)?;
    run.update_timings(m, |t| t.predict = secs)?;
    write_file(
        &run.paths.report(m),
        serde_json::to_string_pretty(&eval.report)? + "\n",
    )?;
    write_svgs(&run.paths.plots(), &eval.plots)?;
    eval.report.timings = Some(read_timings(run)?.remove(m.name()).unwrap_or_default());
    Ok(eval)
}

fn read_timings(run: &Run) -> Result<BTreeMap<String, Timings>> {
    match fs::read_to_string(run.paths.timings()) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(_) => Ok(BTreeMap::new()),
    }
}

/// `train`: fits each method and saves an uncalibrated checkpoint.
pub fn train(run: &Run, methods: &[MethodId]) -> Result<Vec<PathBuf>> {
    let data = load_data(&run.config)?;
    methods
        .iter()
        .map(|&m| {
            save_model(run, &fit_timed(run, m, &data)?)?;
            Ok(run.paths.model(m))
        })
        .collect()
}

/// `calibrate`: loads each checkpoint, calibrates it and saves it back.
pub fn calibrate(run: &Run, methods: &[MethodId]) -> Result<Vec<PathBuf>> {
    let data = load_data(&run.config)?;
    methods
        .iter()
        .map(|&m| {
            let mut model = load_model(run, m)?;
            calibrate_timed(run, &mut model, &data)?;
            save_model(run, &model)?;
            Ok(run.paths.model(m))
        })
        .collect()
}

/// `evaluate`: reports and plots from calibrated checkpoints.
pub fn evaluate(run: &Run, methods: &[MethodId]) -> Result<Vec<MethodReport>> {
    let data = load_data(&run.config)?;
    methods
        .iter()
        .map(|&m| Ok(evaluate_timed(run, &load_model(run, m)?, &data)?.report))
        .collect()
}

fn write_comparison(run: &Run, reports: Vec<MethodReport>) -> Result<ComparisonTable> {
    let table = compare_methods(reports)?;
    write_file(&run.paths.comparison("json"), table.to_json()?)?;
    write_file(&run.paths.comparison("csv"), table.to_csv()?)?;
    write_file(&run.paths.comparison("txt"), table.render_text())?;
    Ok(table)
}

/// `report`: the comparison table from saved per-method reports.
pub fn report(run: &Run, methods: &[MethodId]) -> Result<ComparisonTable> {
    let timings = read_timings(run)?;
    let reports = methods
        .iter()
        .map(|&m| {
            let path = run.paths.report(m);
            let text = fs::read_to_string(&path).map_err(|e| {
                Error::State(format!(
                    "no {m} report at {} ({e}); run `evaluate` first",
                    path.display()
                ))
            })?;
            let mut r: MethodReport = serde_json::from_str(&text)?;
            r.timings = timings.get(m.name()).copied();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    write_comparison(run, reports)
}

/// `compare`: every stage for every method, then the comparison table.
pub fn compare(run: &Run, methods: &[MethodId]) -> Result<ComparisonTable> {
    let alphas: Vec<f64> = methods.iter().map(|&m| run.config.alpha_of(m)).collect();
    if alphas.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Validation(format!(
            "methods must share one alpha to be compared, got {alphas:?}"
        )));
    }
    if methods.len() < 2 {
        return Err(Error::Validation("compare needs at least 2 methods".into()));
    }
    let data = load_data(&run.config)?;
    let mut reports = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut model = fit_timed(run, m, &data)?;
        calibrate_timed(run, &mut model, &data)?;
        save_model(run, &model)?;
        reports.push(evaluate_timed(run, &model, &data)?.report);
    }
    write_comparison(run, reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::TrainConfig;
    use crate::qforest::ForestConfig;

    /// A run small enough for unit tests.
    pub(crate) fn tiny_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig {
            name: "tiny".into(),
            output_dir: Some(dir.to_path_buf()),
            ..RunConfig::default()
        };
        c.data = DataSource::Simulate(SimConfig {
            n: 280,
            feature_dim: 8,
            ..SimConfig::default()
        });
        c.cqr.forest = ForestConfig {
            n_trees: 10,
            ..ForestConfig::default()
        };
        let quick = TrainConfig {
            hidden: 16,
            epochs: 3,
            ..TrainConfig::default()
        };
        c.csp.train = quick.clone();
        c.csp.classes = 5;
        c.mcqr.predictor = quick.clone();
        c.mcqr.cvae = quick.clone();
        c.mcqr.grid_points = 8;
        c.cjp.train = quick;
        c.volume_samples = 50;
        c.timing_reps = 1;
        c.plot_regions = 3;
        c
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_json(r#"{"sede": 3}"#)
            .unwrap_err()
            .is_validation());
        assert!(RunConfig::from_json(r#"{"data": {"source": "simulate", "nn": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"cqr": {"alpah": 0.1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"data": {"source": "simulate", "n": 700}, "seed": 4}"#)
            .unwrap();
        assert_eq!(c.seed, 4);
        assert!(matches!(
            c.data,
            DataSource::Simulate(SimConfig { n: 700, .. })
        ));
        let files = RunConfig::from_json(
            r#"{"data": {"source": "files", "poses": "p.txt", "features": "f.csv"}}"#,
        )
        .unwrap();
        assert!(matches!(files.data, DataSource::Files { .. }));

        let mut bad = RunConfig {
            schema: 9,
            ..RunConfig::default()
        };
        assert!(bad.validate().unwrap_err().is_validation());
        bad.schema = CONFIG_SCHEMA;
        bad.cqr.alpha = 1.5;
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("cqr.alpha", "0.2").unwrap();
        c.set("name", "demo").unwrap();
        c.set("cjp.interval_mode", "per_percentile").unwrap();
        assert_eq!((c.cqr.alpha, c.name.as_str()), (0.2, "demo"));
        assert!(c.set("cqr.nope", "1").unwrap_err().is_validation());
        assert!(c.set("cqr.alpha", "\"x\"").unwrap_err().is_validation());
    }

    #[test]
    fn methods_parse_and_dedupe() {
        assert_eq!(
            parse_methods("cqr, CJP,cqr").unwrap(),
            vec![MethodId::Cqr, MethodId::Cjp]
        );
        assert!(parse_methods("cqr,foo").is_err());
        assert!(parse_methods("").is_err());
    }

    #[test]
    fn seeds_derive_from_the_run_seed() {
        let mut a = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        a.resolve();
        let mut b = RunConfig {
            seed: 6,
            ..RunConfig::default()
        };
        b.resolve();
        assert_ne!(a.cqr.forest.seed, b.cqr.forest.seed);
        assert_ne!(a.cjp.train.seed, a.csp.train.seed);
        let DataSource::Simulate(sim) = &a.data else {
            unreachable!()
        };
        assert_eq!(sim.seed, 5);
    }

    #[test]
    fn output_root_precedence() {
        let named = RunConfig {
            name: "abc".into(),
            ..RunConfig::default()
        };
        assert!(named.output_root().ends_with("abc"));
        let explicit = RunConfig {
            output_dir: Some("/tmp/x".into()),
            ..named
        };
        assert_eq!(explicit.output_root(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn staged_pipeline_matches_compare() {
        let dir = tempfile::tempdir().unwrap();
        let staged = Run::prepare(tiny_config(&dir.path().join("staged"))).unwrap();
        let methods = MethodId::ALL;
        let files = simulate(&staged).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        train(&staged, &methods).unwrap();
        assert!(evaluate(&staged, &[MethodId::Cqr])
            .unwrap_err()
            .to_string()
            .contains("calibrated"));
        calibrate(&staged, &methods).unwrap();
        evaluate(&staged, &methods).unwrap();
        let t1 = report(&staged, &methods).unwrap();

        let direct = Run::prepare(tiny_config(&dir.path().join("direct"))).unwrap();
        let t2 = compare(&direct, &methods).unwrap();
        assert_eq!(t1.to_json().unwrap(), t2.to_json().unwrap());
        assert_eq!(t2.methods.len(), 4);
        for m in methods {
            let a = fs::read(staged.paths.plots().join(format!("{m}_topdown.svg"))).unwrap();
            let b = fs::read(direct.paths.plots().join(format!("{m}_topdown.svg"))).unwrap();
            assert_eq!(a, b);
        }
        assert!(direct.paths.config().exists() && direct.paths.training_log().exists());
        let timings = read_timings(&direct).unwrap();
        assert_eq!(timings.len(), 4);
    }

    #[test]
    fn files_source_reads_simulated_data() {
        let dir = tempfile::tempdir().unwrap();
        let sim_run = Run::prepare(tiny_config(&dir.path().join("sim"))).unwrap();
        simulate(&sim_run).unwrap();
        let from_sim = load_data(&sim_run.config).unwrap();
        let mut cfg = tiny_config(&dir.path().join("files"));
        cfg.data = DataSource::Files {
            poses: sim_run.paths.poses(),
            features: sim_run.paths.features(),
        };
        let files_run = Run::prepare(cfg).unwrap();
        let from_files = load_data(&files_run.config).unwrap();
        assert_eq!(from_files.split, from_sim.split);
        assert_eq!(from_files.dataset.x, from_sim.dataset.x);
        for (a, b) in from_files
            .dataset
            .y
            .as_slice()
            .iter()
            .zip(from_sim.dataset.y.as_slice())
        {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
