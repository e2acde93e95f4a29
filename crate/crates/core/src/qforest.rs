//! Quantile regression forest.
//!
//! Trees are grown like a regression random forest (bootstrap rows, random
//! feature subset per node, variance-reducing splits). Leaves keep the
//! indices of the training targets they received, and a prediction pools
//! those targets across trees, each tree contributing total weight one spread
//! evenly over its leaf. Quantiles of that weighted empirical distribution
//! are the conditional quantile estimates.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, streams};

/// Cumulative-weight slack so that level 1.0 (or a level hit exactly by a
/// sum of weights) is not missed to rounding.
const WEIGHT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of features tried per split; `None` means `sqrt(D) / D`.
    pub feature_fraction: Option<f64>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 5,
            feature_fraction: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn features_per_split(&self, dim: usize) -> usize {
        let m = match self.feature_fraction {
            Some(f) => (f * dim as f64).round() as usize,
            None => (dim as f64).sqrt().round() as usize,
        };
        m.clamp(1, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        targets: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
                Node::Leaf { targets } => return targets,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Training targets referenced by leaf indices.
    pub targets: Vec<f64>,
    pub feature_dim: usize,
}

struct Grower<'a> {
    /// Feature columns, so per-feature gathers stay within one contiguous slice.
    cols: &'a [Vec<f64>],
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    rng: rng::Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: Vec<u32>, depth: usize) -> usize {
        let at_depth_limit = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if at_depth_limit || idx.len() < 2 * self.cfg.min_leaf {
            return self.leaf(idx);
        }
        match self.best_split(&idx) {
            None => self.leaf(idx),
            Some((feature, threshold)) => {
                let col = &self.cols[feature];
                let (l, r): (Vec<u32>, Vec<u32>) =
                    idx.into_iter().partition(|&i| col[i as usize] <= threshold);
                let slot = self.nodes.len();
                self.nodes.push(Node::Leaf {
                    targets: Vec::new(),
                });
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[slot] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                slot
            }
        }
    }

    fn leaf(&mut self, targets: Vec<u32>) -> usize {
        self.nodes.push(Node::Leaf { targets });
        self.nodes.len() - 1
    }

    /// Split minimizing the summed squared error of the two children.
    fn best_split(&mut self, idx: &[u32]) -> Option<(usize, f64)> {
        let n = idx.len();
        let min_leaf = self.cfg.min_leaf;
        let features = sample(&mut self.rng, self.cols.len(), self.mtry);
        let total: f64 = idx.iter().map(|&i| self.y[i as usize]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.y[i as usize].powi(2)).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for feature in features.iter() {
            let col = &self.cols[feature];
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (col[i as usize], self.y[i as usize])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[n - 1].0 {
                continue;
            }
            let (mut s, mut sq) = (0.0, 0.0);
            for k in 0..n - 1 {
                s += pairs[k].1;
                sq += pairs[k].1 * pairs[k].1;
                let nl = k + 1;
                if nl < min_leaf || n - nl < min_leaf || pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let (sr, sqr) = (total - s, total_sq - sq);
                let sse = (sq - s * s / nl as f64) + (sqr - sr * sr / (n - nl) as f64);
                if best.is_none_or(|b| sse < b.0) {
                    best = Some((sse, feature, 0.5 * (pairs[k].0 + pairs[k + 1].0)));
                }
            }
        }
        // Splits that do not reduce the error are not worth a node.
        best.filter(|b| b.0 < parent_sse - 1e-12 * parent_sse.abs().max(1.0))
            .map(|(_, f, t)| (f, t))
    }
}

fn fit_tree(cols: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, tree_seed: u64) -> Tree {
    let n = y.len();
    let mut rng = rng::stream(tree_seed, streams::FOREST);
    let idx: Vec<u32> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n) as u32).collect()
    } else {
        (0..n as u32).collect()
    };
    let mut grower = Grower {
        cols,
        y,
        cfg,
        mtry: cfg.features_per_split(cols.len()),
        rng,
        nodes: Vec::new(),
    };
    grower.grow(idx, 0);
    Tree {
        nodes: grower.nodes,
    }
}

/// Fits a forest; trees are grown in parallel from per-tree derived seeds, so
/// the result does not depend on the schedule.
pub fn fit_forest(x: &Matrix, y: &[f64], cfg: &ForestConfig) -> Result<Forest> {
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::Validation(
            "forest needs n_trees >= 1 and min_leaf >= 1".into(),
        ));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} targets",
            x.rows(),
            y.len()
        )));
    }
    if y.len() < 2 * cfg.min_leaf {
        return Err(Error::Validation(format!(
            "{} samples is fewer than 2 * min_leaf = {}",
            y.len(),
            2 * cfg.min_leaf
        )));
    }
    if y.len() > u32::MAX as usize {
        return Err(Error::Validation("too many training samples".into()));
    }
    let cols: Vec<Vec<f64>> = (0..x.cols()).map(|c| x.column(c)).collect();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| fit_tree(&cols, y, cfg, rng::derive_seed(cfg.seed, t as u64)))
        .collect();
    Ok(Forest {
        trees,
        targets: y.to_vec(),
        feature_dim: x.cols(),
    })
}

/// Lowest value whose cumulative weight reaches `level`, for `(value, weight)`
/// pairs sorted by value and total weight one.
fn sorted_weighted_quantile(pool: &[(f64, f64)], level: f64) -> f64 {
    let mut cum = 0.0;
    for &(v, w) in pool {
        cum += w;
        if cum >= level - WEIGHT_EPS {
            return v;
        }
    }
    pool.last().map_or(f64::NAN, |p| p.0)
}

/// Weighted empirical quantile with the "lowest value with cumulative weight
/// >= level" convention. Weights need not be normalized.
pub fn weighted_quantile(values: &[f64], weights: &[f64], level: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut pool: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| (v, w / total))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted_weighted_quantile(&pool, level)
}

impl Forest {
    /// Pooled `(target, weight)` pairs reached by `x`, sorted by target.
    pub fn weighted_targets(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let per_tree = 1.0 / self.trees.len() as f64;
        let mut pool = Vec::new();
        for tree in &self.trees {
            let leaf = tree.leaf_for(x);
            let w = per_tree / leaf.len() as f64;
            pool.extend(leaf.iter().map(|&i| (self.targets[i as usize], w)));
        }
        pool.sort_by(|a, b| a.0.total_cmp(&b.0));
        pool
    }

    /// Conditional quantiles at each level; nondecreasing in level.
    pub fn predict_quantiles(&self, x: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(Error::State("empty forest".into()));
        }
        if x.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "{} features, forest expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "quantile level {l} outside (0, 1]"
            )));
        }
        let pool = self.weighted_targets(x);
        Ok(levels
            .iter()
            .map(|&l| sorted_weighted_quantile(&pool, l))
            .collect())
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Checkpoint {
        let mut kind = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        let mut leaf_offsets = Vec::new();
        let mut leaf_targets = Vec::new();
        let mut tree_sizes = Vec::new();
        for tree in &self.trees {
            tree_sizes.push(tree.nodes.len() as f64);
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        kind.push(0.0);
                        a.push(*feature as f64);
                        b.push(*threshold);
                        c.push((*left as f64) + (*right as f64) * 4294967296.0);
                        leaf_offsets.push(0.0);
                    }
                    Node::Leaf { targets } => {
                        kind.push(1.0);
                        a.push(0.0);
                        b.push(0.0);
                        c.push(targets.len() as f64);
                        leaf_offsets.push(leaf_targets.len() as f64);
                        leaf_targets.extend(targets.iter().map(|&t| t as f64));
                    }
                }
            }
        }
        let mut ck = Checkpoint::new(header);
        ck.insert("forest.feature_dim", vec![self.feature_dim as f64]);
        ck.insert("forest.tree_sizes", tree_sizes);
        ck.insert("forest.kind", kind);
        ck.insert("forest.feature", a);
        ck.insert("forest.threshold", b);
        ck.insert("forest.children", c);
        ck.insert("forest.leaf_offsets", leaf_offsets);
        ck.insert("forest.leaf_targets", leaf_targets);
        ck.insert("forest.targets", self.targets.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let feature_dim = ck.section("forest.feature_dim")?[0] as usize;
        let sizes = ck.section("forest.tree_sizes")?;
        let kind = ck.section("forest.kind")?;
        let feature = ck.section("forest.feature")?;
        let threshold = ck.section("forest.threshold")?;
        let children = ck.section("forest.children")?;
        let offsets = ck.section("forest.leaf_offsets")?;
        let leaf_targets = ck.section("forest.leaf_targets")?;
        let targets = ck.section("forest.targets")?.to_vec();
        let mut trees = Vec::with_capacity(sizes.len());
        let mut k = 0usize;
        for &size in sizes {
            let mut nodes = Vec::with_capacity(size as usize);
            for _ in 0..size as usize {
                let node = if kind[k] == 0.0 {
                    let packed = children[k];
                    let right = (packed / 4294967296.0).floor();
                    let left = packed - right * 4294967296.0;
                    Node::Split {
                        feature: feature[k] as usize,
                        threshold: threshold[k],
                        left: left as usize,
                        right: right as usize,
                    }
                } else {
                    let start = offsets[k] as usize;
                    let len = children[k] as usize;
                    let slice = leaf_targets
                        .get(start..start + len)
                        .ok_or_else(|| Error::Checkpoint("leaf range out of bounds".into()))?;
                    Node::Leaf {
                        targets: slice.iter().map(|&t| t as u32).collect(),
                    }
                };
                nodes.push(node);
                k += 1;
            }
            trees.push(Tree { nodes });
        }
        Ok(Self {
            trees,
            targets,
            feature_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn brute_force(values: &[f64], weights: &[f64], level: f64) -> f64 {
        let total: f64 = weights.iter().sum();
        let mut best = f64::INFINITY;
        for &v in values {
            let cum: f64 = values
                .iter()
                .zip(weights)
                .filter(|(x, _)| **x <= v)
                .map(|(_, w)| w / total)
                .sum();
            if cum >= level - 1e-9 && v < best {
                best = v;
            }
        }
        best
    }

    #[test]
    fn single_leaf_median() {
        let x = Matrix::from_vec(10, 1, (1..=10).map(f64::from).collect()).unwrap();
        let y: Vec<f64> = (1..=10).map(f64::from).collect();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: Some(0),
            bootstrap: false,
            min_leaf: 1,
            ..Default::default()
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        assert_eq!(f.trees[0].nodes.len(), 1);
        let q = f.predict_quantiles(&[3.0], &[0.5, 1.0]).unwrap();
        assert_eq!(q, vec![5.0, 10.0]);
    }

    #[test]
    fn depth_zero_leaf_holds_bootstrap_sample() {
        let x = Matrix::from_vec(20, 2, (0..40).map(f64::from).collect()).unwrap();
        let y: Vec<f64> = (0..20).map(f64::from).collect();
        let cfg = ForestConfig {
            n_trees: 3,
            max_depth: Some(0),
            ..Default::default()
        };
        let f = fit_forest(&x, &y, &cfg).unwrap();
        for t in &f.trees {
            match &t.nodes[..] {
                [Node::Leaf { targets }] => assert_eq!(targets.len(), 20),
                other => panic!("expected a single leaf, got {other:?}"),
            }
        }
    }

    #[test]
    fn constant_targets() {
        let x = Matrix::from_vec(30, 1, (0..30).map(f64::from).collect()).unwrap();
        let y = vec![2.5; 30];
        let f = fit_forest(
            &x,
            &y,
            &ForestConfig {
                n_trees: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            f.predict_quantiles(&[4.0], &[0.05, 0.5, 0.95]).unwrap(),
            vec![2.5; 3]
        );
    }

    #[test]
    fn constant_features_give_root_leaves() {
        let x = Matrix::zeros(40, 3);
        let y: Vec<f64> = (0..40).map(f64::from).collect();
        let f = fit_forest(
            &x,
            &y,
            &ForestConfig {
                n_trees: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn recovers_linear_median() {
        let n = 2000;
        let mut r = rng::stream(5, 0);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
        let y: Vec<f64> = xs.iter().map(|&x| x + noise.sample(&mut r)).collect();
        let x = Matrix::from_vec(n, 1, xs).unwrap();
        let f = fit_forest(
            &x,
            &y,
            &ForestConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        for k in 1..20 {
            let g = 0.2 * k as f64;
            let med = f.predict_quantiles(&[g], &[0.5]).unwrap()[0];
            assert!((med - g).abs() < 0.15, "x={g} median={med}");
            let q = f.predict_quantiles(&[g], &[0.05, 0.95]).unwrap();
            assert!(q[0] <= q[1]);
        }
    }

    #[test]
    fn refit_is_identical_and_checkpoint_roundtrips() {
        let mut r = rng::stream(1, 0);
        let x = Matrix::from_vec(200, 3, (0..600).map(|_| r.random::<f64>()).collect()).unwrap();
        let y: Vec<f64> = (0..200).map(|i| x.get(i, 0) * 2.0 + x.get(i, 2)).collect();
        let cfg = ForestConfig {
            n_trees: 7,
            seed: 9,
            ..Default::default()
        };
        let a = fit_forest(&x, &y, &cfg).unwrap();
        let b = fit_forest(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let ck = a.to_checkpoint(serde_json::json!({}));
        let bytes = ck.to_bytes().unwrap();
        let back = Forest::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn rejects_bad_input() {
        let x = Matrix::zeros(5, 1);
        assert!(fit_forest(&x, &[0.0; 5], &ForestConfig::default()).is_err());
        assert!(fit_forest(
            &x,
            &[0.0; 4],
            &ForestConfig {
                min_leaf: 1,
                ..Default::default()
            }
        )
        .is_err());
        assert!(fit_forest(
            &x,
            &[0.0; 5],
            &ForestConfig {
                n_trees: 0,
                min_leaf: 1,
                ..Default::default()
            }
        )
        .is_err());
        let f = Forest {
            trees: vec![],
            targets: vec![],
            feature_dim: 1,
        };
        assert!(f.predict_quantiles(&[0.0], &[0.5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn weighted_quantile_matches_brute_force(
            pairs in proptest::collection::vec((-5i32..5, 1u32..6), 1..40),
            level_pct in 1u32..=100,
        ) {
            let values: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.5).collect();
            let weights: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let level = level_pct as f64 / 100.0;
            proptest::prop_assert_eq!(weighted_quantile(&values, &weights, level), brute_force(&values, &weights, level));
        }
    }
}
