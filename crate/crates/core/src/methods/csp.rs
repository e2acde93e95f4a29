//! Conformal set prediction over quantile-binned pose dimensions.
//!
//! Each selected dimension is cut into `K` bins at label quantiles, a shared
//! trunk with one softmax head per dimension classifies the bin, and a
//! calibrated threshold on `1 - softmax(true bin)` turns the softmax vector
//! into a set of bins, which need not be contiguous.

use serde::{Deserialize, Serialize};

use super::{check_alpha, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::conformal::{empirical_quantile, CalibrationRecord};
use crate::data::{DataSplit, Dataset, MIN_CALIBRATION};
use crate::diffnet::{
    adam_step, batches, loss, softmax_rows, AdamState, Mode, Network, NetworkSpec,
};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Standardizer};
use crate::rng::{self, streams};

/// Slack when comparing softmax scores against the threshold.
pub const SCORE_TOLERANCE: f64 = 1e-12;
const EDGE_NUDGE: f64 = 1e-12;

/// Bin edges for one dimension: `K + 1` strictly increasing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub edges: Vec<f64>,
}

impl Discretization {
    /// Edges at the empirical `j/K` quantiles, with the label range as outer edges.
    pub fn build(labels: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {k}"
            )));
        }
        let mut sorted = labels.to_vec();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite label".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < k {
            return Err(Error::Validation(format!(
                "{} distinct label values for {k} classes",
                distinct.len()
            )));
        }
        let mut edges = Vec::with_capacity(k + 1);
        edges.push(sorted[0]);
        for j in 1..k {
            edges.push(empirical_quantile(&sorted, j as f64 / k as f64)?);
        }
        edges.push(*sorted.last().expect("non-empty"));
        for j in 1..edges.len() {
            if edges[j] <= edges[j - 1] {
                edges[j] = edges[j - 1] + EDGE_NUDGE.max(edges[j - 1].abs() * f64::EPSILON);
            }
        }
        Ok(Self { edges })
    }

    pub fn classes(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin `j` is `[e_j, e_{j+1})`, the last one closed; values outside the
    /// range go to the nearest end bin.
    pub fn bin(&self, v: f64) -> usize {
        let k = self.classes();
        let j = self.edges[1..k].partition_point(|&e| e <= v);
        j.min(k - 1)
    }

    pub fn bin_width(&self, j: usize) -> f64 {
        self.edges[j + 1] - self.edges[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRule {
    #[default]
    /// `{k : s_k >= 1 - q}`.
    Threshold,
    /// Smallest prefix of classes by descending softmax with mass `>= q`.
    Aps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CspConfig {
    pub alpha: f64,
    pub classes: usize,
    /// Label columns to discretize (translation by default).
    pub dims: Vec<usize>,
    /// Set construction used by the pipelines.
    pub rule: SetRule,
    pub train: TrainConfig,
}

impl Default for CspConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            classes: 25,
            dims: vec![0, 1, 2],
            rule: SetRule::Threshold,
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
        }
    }
}

/// Per-dimension class sets for one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub classes: Vec<Vec<usize>>,
    /// Set when the thresholded set was empty and the argmax was substituted.
    pub fallback: Vec<bool>,
}

impl PredictionSet {
    pub fn contains(&self, d: usize, class: usize) -> bool {
        self.classes[d].binary_search(&class).is_ok()
    }

    /// True if dimension `d`'s classes do not form one run of adjacent bins.
    pub fn is_disjoint(&self, d: usize) -> bool {
        self.classes[d].windows(2).any(|w| w[1] != w[0] + 1)
    }

    pub fn is_superset_of(&self, other: &PredictionSet) -> bool {
        self.classes
            .iter()
            .zip(&other.classes)
            .all(|(a, b)| b.iter().all(|c| a.binary_search(c).is_ok()))
    }
}

/// Union-of-boxes region: per dimension, a union of bin intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRegion {
    pub dims: Vec<usize>,
    pub intervals: Vec<Vec<(f64, f64)>>,
}

impl SetRegion {
    /// Summed width of the selected bins in dimension `d`.
    pub fn extent(&self, d: usize) -> f64 {
        self.intervals[d].iter().map(|(a, b)| b - a).sum()
    }

    pub fn volume(&self) -> f64 {
        (0..self.intervals.len()).map(|d| self.extent(d)).product()
    }

    /// Boxes in the product, one per combination of selected bins.
    pub fn boxes(&self) -> usize {
        self.intervals.iter().map(Vec::len).product()
    }
}

/// Product of the selected bins' intervals.
pub fn set_to_region(set: &PredictionSet, disc: &[Discretization], dims: &[usize]) -> SetRegion {
    SetRegion {
        dims: dims.to_vec(),
        intervals: set
            .classes
            .iter()
            .zip(disc)
            .map(|(cls, dz)| {
                cls.iter()
                    .map(|&j| (dz.edges[j], dz.edges[j + 1]))
                    .collect()
            })
            .collect(),
    }
}

/// Classes with `1 - s_k <= q`; the argmax alone (flagged) if none qualifies.
pub fn threshold_set(probs: &[f64], q: f64) -> (Vec<usize>, bool) {
    let set: Vec<usize> = (0..probs.len())
        .filter(|&k| 1.0 - probs[k] <= q + SCORE_TOLERANCE)
        .collect();
    if set.is_empty() {
        (vec![argmax(probs)], true)
    } else {
        (set, false)
    }
}

fn descending(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn argmax(probs: &[f64]) -> usize {
    descending(probs)[0]
}

/// Smallest descending-probability prefix whose mass reaches `q` (sorted by class).
pub fn aps_set(probs: &[f64], q: f64) -> Vec<usize> {
    let mut set = Vec::new();
    let mut cum = 0.0;
    for k in descending(probs) {
        set.push(k);
        cum += probs[k];
        if cum >= q - SCORE_TOLERANCE {
            break;
        }
    }
    set.sort_unstable();
    set
}

/// Probability mass of classes ranked at or above `class`.
pub fn aps_score(probs: &[f64], class: usize) -> f64 {
    let mut cum = 0.0;
    for k in descending(probs) {
        cum += probs[k];
        if k == class {
            break;
        }
    }
    cum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspCalibration {
    pub alpha: f64,
    pub threshold: Vec<CalibrationRecord>,
    pub aps: Vec<CalibrationRecord>,
}

impl CspCalibration {
    /// Thresholds for `rule`; an unbounded correction admits every class.
    pub fn qhat(&self, rule: SetRule) -> Vec<f64> {
        let recs = match rule {
            SetRule::Threshold => &self.threshold,
            SetRule::Aps => &self.aps,
        };
        recs.iter()
            .map(|r| r.correction.unwrap_or(1.0).min(1.0))
            .collect()
    }

    /// Same scores re-thresholded at another `alpha`.
    pub fn at_alpha(&self, alpha: f64) -> Result<Self> {
        let redo = |recs: &[CalibrationRecord]| -> Result<Vec<CalibrationRecord>> {
            recs.iter()
                .map(|r| CalibrationRecord::csp(r.scores.clone(), alpha))
                .collect()
        };
        Ok(Self {
            alpha,
            threshold: redo(&self.threshold)?,
            aps: redo(&self.aps)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CspModel {
    pub dims: Vec<usize>,
    pub discretizations: Vec<Discretization>,
    pub net: Network,
    pub x_std: Standardizer,
    pub alpha: f64,
    pub calibration: Option<CspCalibration>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CspMeta {
    kind: String,
    alpha: f64,
    dims: Vec<usize>,
    discretizations: Vec<Discretization>,
    x_std: Standardizer,
    spec: NetworkSpec,
    calibration: Option<CspCalibration>,
}

fn trunk_spec(input: usize, hidden: usize, outputs: usize) -> NetworkSpec {
    NetworkSpec::new(input)
        .dense(hidden)
        .prelu()
        .dense(hidden)
        .prelu()
        .dense(outputs)
}

/// Discretizes the selected label columns on the training rows and trains the classifier.
pub fn csp_train(ds: &Dataset, split: &DataSplit, cfg: &CspConfig) -> Result<CspModel> {
    check_alpha(cfg.alpha)?;
    cfg.train.validate()?;
    if cfg.dims.is_empty() || cfg.dims.iter().any(|&d| d >= ds.y.cols()) {
        return Err(Error::Validation(format!(
            "invalid label columns {:?}",
            cfg.dims
        )));
    }
    let discretizations = cfg
        .dims
        .iter()
        .map(|&d| {
            Discretization::build(
                &split
                    .train
                    .iter()
                    .map(|&i| ds.y.get(i, d))
                    .collect::<Vec<_>>(),
                cfg.classes,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let x_raw = ds.x.select_rows(&split.train);
    let x_std = Standardizer::fit(&x_raw);
    let x = x_std.transform(&x_raw);
    let labels: Vec<Vec<usize>> = split
        .train
        .iter()
        .map(|&i| {
            cfg.dims
                .iter()
                .zip(&discretizations)
                .map(|(&d, dz)| dz.bin(ds.y.get(i, d)))
                .collect()
        })
        .collect();
    let k = cfg.classes;
    let heads = cfg.dims.len();
    let mut net = Network::new(
        trunk_spec(x.cols(), cfg.train.hidden, k * heads),
        cfg.train.seed,
    )?;
    let mut adam = AdamState::new(net.param_count());
    let mut order_rng = rng::stream(cfg.train.seed, streams::BATCHES);
    let mut drop_rng = rng::stream(cfg.train.seed, streams::DROPOUT);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let mut total = 0.0;
        for batch in batches(x.rows(), cfg.train.batch_size, &mut order_rng) {
            let xb = x.select_rows(&batch);
            let logits = net.forward(&xb, Mode::Train, &mut drop_rng)?;
            let mut grad = Matrix::zeros(logits.rows(), logits.cols());
            let mut batch_loss = 0.0;
            for h in 0..heads {
                let y: Vec<usize> = batch.iter().map(|&i| labels[i][h]).collect();
                let (l, g) = loss::softmax_cross_entropy(&y, &logits.columns(h * k, (h + 1) * k))?;
                batch_loss += l;
                for r in 0..g.rows() {
                    grad.row_mut(r)[h * k..(h + 1) * k].copy_from_slice(g.row(r));
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "csp loss {batch_loss} at epoch {epoch}"
                )));
            }
            total += batch_loss * batch.len() as f64;
            net.backward(&grad)?;
            let (p, g) = net.params_and_grads();
            adam_step(p, g, &mut adam, cfg.train.learning_rate)?;
        }
        history.push(total / x.rows() as f64);
    }
    Ok(CspModel {
        dims: cfg.dims.clone(),
        discretizations,
        net,
        x_std,
        alpha: cfg.alpha,
        calibration: None,
        loss_history: history,
    })
}

impl CspModel {
    pub fn classes(&self) -> usize {
        self.discretizations[0].classes()
    }

    /// Softmax per selected dimension, each `rows x K`.
    pub fn probabilities(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let logits = self.net.predict(&self.x_std.transform(x))?;
        let k = self.classes();
        Ok((0..self.dims.len())
            .map(|h| softmax_rows(&logits.columns(h * k, (h + 1) * k)))
            .collect())
    }

    /// True bin of each row of `y` per selected dimension.
    pub fn true_classes(&self, y: &Matrix) -> Vec<Vec<usize>> {
        (0..y.rows())
            .map(|r| {
                self.dims
                    .iter()
                    .zip(&self.discretizations)
                    .map(|(&d, dz)| dz.bin(y.get(r, d)))
                    .collect()
            })
            .collect()
    }

    pub fn calibrate(&mut self, ds: &Dataset, cal: &[usize]) -> Result<()> {
        if cal.len() < MIN_CALIBRATION {
            return Err(Error::Validation(format!(
                "calibration set has {} samples, need at least {MIN_CALIBRATION}",
                cal.len()
            )));
        }
        let probs = self.probabilities(&ds.x.select_rows(cal))?;
        let truth = self.true_classes(&ds.y.select_rows(cal));
        let mut threshold = Vec::new();
        let mut aps = Vec::new();
        for (h, p) in probs.iter().enumerate() {
            let s: Vec<f64> = (0..p.rows()).map(|r| 1.0 - p.get(r, truth[r][h])).collect();
            let c: Vec<f64> = (0..p.rows())
                .map(|r| aps_score(p.row(r), truth[r][h]))
                .collect();
            threshold.push(CalibrationRecord::csp(s, self.alpha)?);
            aps.push(CalibrationRecord::csp(c, self.alpha)?);
        }
        self.calibration = Some(CspCalibration {
            alpha: self.alpha,
            threshold,
            aps,
        });
        Ok(())
    }

    pub fn calibration(&self) -> Result<&CspCalibration> {
        self.calibration
            .as_ref()
            .ok_or_else(|| Error::State("model is not calibrated".into()))
    }

    /// Prediction sets under `cal` (the model's own calibration or a re-thresholded copy).
    pub fn predict_sets_with(
        &self,
        x: &Matrix,
        cal: &CspCalibration,
        rule: SetRule,
    ) -> Result<Vec<PredictionSet>> {
        let probs = self.probabilities(x)?;
        let q = cal.qhat(rule);
        Ok((0..x.rows())
            .map(|r| {
                let mut set = PredictionSet {
                    classes: Vec::new(),
                    fallback: Vec::new(),
                };
                for (h, p) in probs.iter().enumerate() {
                    let (cls, fb) = match rule {
                        SetRule::Threshold => threshold_set(p.row(r), q[h]),
                        SetRule::Aps => (aps_set(p.row(r), q[h]), false),
                    };
                    set.classes.push(cls);
                    set.fallback.push(fb);
                }
                set
            })
            .collect())
    }

    pub fn predict_sets(&self, x: &Matrix, rule: SetRule) -> Result<Vec<PredictionSet>> {
        self.predict_sets_with(x, self.calibration()?, rule)
    }

    pub fn region(&self, set: &PredictionSet) -> SetRegion {
        set_to_region(set, &self.discretizations, &self.dims)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CspMeta {
            kind: "csp".into(),
            alpha: self.alpha,
            dims: self.dims.clone(),
            discretizations: self.discretizations.clone(),
            x_std: self.x_std.clone(),
            spec: self.net.spec().clone(),
            calibration: self.calibration.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        self.net.write_sections("net.", &mut ck);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CspMeta = ck.meta_as()?;
        if meta.kind != "csp" {
            return Err(Error::Checkpoint(format!(
                "expected a csp checkpoint, found {}",
                meta.kind
            )));
        }
        Ok(Self {
            net: Network::read_sections(meta.spec, "net.", ck)?,
            dims: meta.dims,
            discretizations: meta.discretizations,
            x_std: meta.x_std,
            alpha: meta.alpha,
            calibration: meta.calibration,
            loss_history: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, SplitFractions};
    use rand::Rng as _;

    #[test]
    fn uniform_edges() {
        let mut r = rng::stream(0, 0);
        let v: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..1.0)).collect();
        let d = Discretization::build(&v, 4).unwrap();
        for (e, want) in d.edges.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((e - want).abs() < 0.02);
        }
        let mut counts = [0usize; 4];
        for &x in &v {
            counts[d.bin(x)] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 10_000);
    }

    #[test]
    fn denser_labels_get_narrower_bins() {
        let mut r = rng::stream(1, 0);
        let v: Vec<f64> = (0..4000)
            .map(|i| {
                if i % 4 == 0 {
                    r.random_range(5.0..10.0)
                } else {
                    r.random_range(0.0..1.0)
                }
            })
            .collect();
        let d = Discretization::build(&v, 8).unwrap();
        assert!(d.bin_width(1) < d.bin_width(7));
    }

    #[test]
    fn duplicate_edges_are_nudged() {
        let v = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0];
        let d = Discretization::build(&v, 3).unwrap();
        assert!(d.edges.windows(2).all(|w| w[1] > w[0]));
        assert!(Discretization::build(&[1.0, 1.0, 2.0], 3).is_err());
        assert!(Discretization::build(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn set_examples() {
        assert_eq!(threshold_set(&[0.7, 0.2, 0.1], 0.35), (vec![0], false));
        let (s, fb) = threshold_set(&[0.4, 0.05, 0.4, 0.15], 0.7);
        assert_eq!((s.clone(), fb), (vec![0, 2], false));
        let ps = PredictionSet {
            classes: vec![s],
            fallback: vec![false],
        };
        assert!(ps.is_disjoint(0));
        assert_eq!(threshold_set(&[0.5, 0.3, 0.2], 1.0).0, vec![0, 1, 2]);
        assert_eq!(threshold_set(&[0.5, 0.3, 0.2], 0.1), (vec![0], true));
        assert_eq!(aps_set(&[0.25; 4], 0.6).len(), 3);
        assert_eq!(aps_set(&[0.1, 0.6, 0.3], 0.0), vec![1]);
        assert!((aps_score(&[0.1, 0.6, 0.3], 0) - 1.0).abs() < 1e-15);
        assert!((aps_score(&[0.1, 0.6, 0.3], 2) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn region_volume_matches_enumeration() {
        let disc = vec![
            Discretization {
                edges: vec![0.0, 1.0, 1.5, 3.0, 4.0],
            },
            Discretization {
                edges: vec![-1.0, 0.0, 2.0, 2.5],
            },
        ];
        let set = PredictionSet {
            classes: vec![vec![0, 2], vec![1, 2]],
            fallback: vec![false, false],
        };
        let region = set_to_region(&set, &disc, &[0, 1]);
        let mut naive = 0.0;
        for &a in &set.classes[0] {
            for &b in &set.classes[1] {
                naive += disc[0].bin_width(a) * disc[1].bin_width(b);
            }
        }
        assert!((region.volume() - naive).abs() < 1e-12);
        assert_eq!(region.boxes(), 4);
        let full = PredictionSet {
            classes: vec![vec![0, 1, 2, 3], vec![0, 1, 2]],
            fallback: vec![false; 2],
        };
        assert_eq!(set_to_region(&full, &disc, &[0, 1]).volume(), 4.0 * 3.5);
    }

    fn toy() -> Dataset {
        let mut r = rng::stream(5, 0);
        let n = 400;
        let mut x = Matrix::zeros(n, 2);
        let mut y = Matrix::zeros(n, 6);
        for i in 0..n {
            let u: f64 = r.random_range(-1.0..1.0);
            x.set(i, 0, u);
            x.set(i, 1, r.random_range(-1.0..1.0));
            y.set(i, 0, u + 0.01 * r.random_range(-1.0..1.0));
        }
        Dataset::new(x, y, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn separable_toy_problem() {
        let ds = toy();
        let split = split_dataset(
            ds.len(),
            SplitFractions {
                train: 0.6,
                cal: 0.2,
                test: 0.2,
            },
            0,
        )
        .unwrap();
        let cfg = CspConfig {
            classes: 2,
            dims: vec![0],
            train: TrainConfig {
                hidden: 16,
                epochs: 60,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..CspConfig::default()
        };
        let m = csp_train(&ds, &split, &cfg).unwrap();
        let x = ds.x.select_rows(&split.train);
        let probs = m.probabilities(&x).unwrap();
        let truth = m.true_classes(&ds.y.select_rows(&split.train));
        let acc = (0..x.rows())
            .filter(|&r| argmax(probs[0].row(r)) == truth[r][0])
            .count() as f64
            / x.rows() as f64;
        assert!(acc > 0.95, "accuracy {acc}");
        let h = &m.loss_history;
        let smooth = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        assert!(smooth(&h[h.len() - 10..]) <= smooth(&h[..10]));
        let again = csp_train(&ds, &split, &cfg).unwrap();
        assert_eq!(m.net.params(), again.net.params());
    }

    #[test]
    fn calibration_and_nesting() {
        let ds = toy();
        let split = split_dataset(
            ds.len(),
            SplitFractions {
                train: 0.5,
                cal: 0.25,
                test: 0.25,
            },
            1,
        )
        .unwrap();
        let cfg = CspConfig {
            classes: 6,
            dims: vec![0],
            train: TrainConfig {
                hidden: 16,
                epochs: 20,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..CspConfig::default()
        };
        let mut m = csp_train(&ds, &split, &cfg).unwrap();
        m.calibrate(&ds, &split.cal).unwrap();
        let cal = m.calibration().unwrap().clone();
        let x = ds.x.select_rows(&split.test);
        let mut prev: Option<Vec<PredictionSet>> = None;
        let mut prev_q = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.2, 0.4] {
            let c = cal.at_alpha(alpha).unwrap();
            assert!(c.qhat(SetRule::Threshold)[0] <= prev_q);
            prev_q = c.qhat(SetRule::Threshold)[0];
            let sets = m.predict_sets_with(&x, &c, SetRule::Threshold).unwrap();
            if let Some(p) = &prev {
                assert!(p.iter().zip(&sets).all(|(a, b)| a.is_superset_of(b)));
            }
            prev = Some(sets);
        }
        let back = CspModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(
            back.predict_sets(&x, SetRule::Aps).unwrap(),
            m.predict_sets(&x, SetRule::Aps).unwrap()
        );
    }

    #[test]
    fn qhat_is_ninetieth_score_for_99() {
        let scores: Vec<f64> = (0..99).map(|i| ((i * 37) % 99) as f64 / 100.0).collect();
        let rec = CalibrationRecord::csp(scores.clone(), 0.1).unwrap();
        let mut sorted = scores;
        sorted.sort_by(f64::total_cmp);
        assert_eq!(rec.correction, Some(sorted[89]));
    }
}
