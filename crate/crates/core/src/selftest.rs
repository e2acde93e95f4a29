//! Built-in oracle suites: quantiles against brute-force counting, every
//! gradient against finite differences, and a small end-to-end coverage run.

use std::fmt;
use std::time::Instant;

use rand::Rng as _;

use crate::conformal::empirical_quantile;
use crate::data::{simulate_trajectory, split_dataset, SimConfig, SplitFractions};
use crate::diffnet::gradcheck::{latent_kl_check, layer_suite, loss_suite, GradCheck, TOLERANCE};
use crate::error::Result;
use crate::eval::band_coverage;
use crate::methods::cjp::{total_loss_gradcheck, CalMode, CjpConfig, IntervalMode};
use crate::methods::cqr::{cqr_fit, CqrConfig};
use crate::qforest::{fit_forest, weighted_quantile, ForestConfig};
use crate::rng;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {}/{} ({:.2}s) {}",
            self.suite, self.name, self.seconds, self.detail
        )
    }
}

fn timed(suite: &'static str, name: &str, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (passed, detail) = f();
    Check {
        suite,
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Smallest element `v` with `#{x <= v} * den >= num * n`, i.e. the
/// `ceil(level * n)`-th order statistic for `level = num / den`, found by
/// counting alone.
fn counting_quantile(values: &[f64], num: u64, den: u64) -> f64 {
    let n = values.len() as u64;
    if num > den {
        return f64::INFINITY;
    }
    values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&x| x <= v).count() as u64 * den >= num * n)
        .fold(f64::INFINITY, f64::min)
}

/// Every list of length 1..=7 over `{0, 1, 2}` and 8..=12 over `{0, 1}`,
/// at levels `k / 100` for `k = 1..=100` plus one level above one.
pub fn quantile_exhaustive() -> Check {
    timed("quantile", "empirical_exhaustive", || {
        let mut lists = 0usize;
        let mut mismatches = 0usize;
        let mut first = None;
        for (alphabet, lengths) in [(3u32, 1..=7u32), (2, 8..=12)] {
            for len in lengths {
                for code in 0..alphabet.pow(len) {
                    let mut c = code;
                    let list: Vec<f64> = (0..len)
                        .map(|_| {
                            let v = c % alphabet;
                            c /= alphabet;
                            v as f64
                        })
                        .collect();
                    lists += 1;
                    for k in 1..=101u64 {
                        let got = empirical_quantile(&list, k as f64 / 100.0).unwrap_or(f64::NAN);
                        let want = counting_quantile(&list, k, 100);
                        if got != want {
                            mismatches += 1;
                            first.get_or_insert_with(|| {
                                format!("{list:?} at {k}/100: {got} vs {want}")
                            });
                        }
                    }
                }
            }
        }
        let detail = match first {
            None => format!("{lists} lists x 101 levels"),
            Some(f) => format!("{mismatches} mismatches, first {f}"),
        };
        (mismatches == 0, detail)
    })
}

/// Smallest value whose weight share of `{x <= v}` reaches `level`, by
/// summing over the unsorted list for every candidate.
fn counting_weighted_quantile(values: &[f64], weights: &[f64], level: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    values
        .iter()
        .copied()
        .filter(|&v| {
            let below: f64 = values
                .iter()
                .zip(weights)
                .filter(|(x, _)| **x <= v)
                .map(|(_, w)| w)
                .sum();
            below / total >= level - 1e-12
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_list(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    // Half the trials draw from 40 values so ties are common.
    if r.random_bool(0.5) {
        (0..n).map(|_| r.random_range(0..40) as f64 / 4.0).collect()
    } else {
        (0..n).map(|_| r.random_range(-5.0..5.0)).collect()
    }
}

/// Randomized trials of `n`-element lists for both the plain and the
/// weighted quantile.
pub fn quantile_random(trials: usize, n: usize, seed: u64) -> Check {
    timed("quantile", "random_trials", || {
        let mut r = rng::stream(seed, 0x7175_616e);
        let mut bad = Vec::new();
        for trial in 0..trials {
            let values = random_list(&mut r, n);
            let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
            let level: f64 = r.random_range(0.001..1.0);
            let k = r.random_range(1..=100u64);
            let plain = (
                empirical_quantile(&values, k as f64 / 100.0).unwrap_or(f64::NAN),
                counting_quantile(&values, k, 100),
            );
            let weighted = (
                weighted_quantile(&values, &weights, level),
                counting_weighted_quantile(&values, &weights, level),
            );
            if plain.0 != plain.1 || weighted.0 != weighted.1 {
                bad.push(format!(
                    "trial {trial}: plain {plain:?} weighted {weighted:?}"
                ));
            }
        }
        let detail = match bad.first() {
            None => format!("{trials} trials of {n} elements"),
            Some(b) => format!("{} mismatches, first {b}", bad.len()),
        };
        (bad.is_empty(), detail)
    })
}

/// Forest conditional quantiles against the counting oracle on the pooled
/// leaf targets.
pub fn forest_quantiles(points: usize, seed: u64) -> Check {
    timed("quantile", "forest_leaf_pool", || {
        let run = || -> Result<Option<String>> {
            let mut r = rng::stream(seed, 0x666f_7273);
            let (n, d) = (300, 3);
            let xs: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
            let x = crate::matrix::Matrix::from_vec(n, d, xs)?;
            let y: Vec<f64> = (0..n)
                .map(|i| x.get(i, 0) + r.random_range(-0.5..0.5))
                .collect();
            let forest = fit_forest(
                &x,
                &y,
                &ForestConfig {
                    n_trees: 20,
                    seed,
                    ..ForestConfig::default()
                },
            )?;
            for _ in 0..points {
                let probe: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                let pool = forest.weighted_targets(&probe);
                let (v, w): (Vec<f64>, Vec<f64>) = pool.into_iter().unzip();
                let levels = [r.random_range(0.01..0.5), r.random_range(0.5..1.0)];
                let got = forest.predict_quantiles(&probe, &levels)?;
                for (l, g) in levels.iter().zip(&got) {
                    let want = counting_weighted_quantile(&v, &w, *l);
                    if *g != want {
                        return Ok(Some(format!("level {l}: {g} vs {want}")));
                    }
                }
            }
            Ok(None)
        };
        match run() {
            Ok(None) => (true, format!("{points} query points")),
            Ok(Some(m)) => (false, m),
            Err(e) => (false, e.to_string()),
        }
    })
}

fn from_gradcheck(g: GradCheck, seconds: f64) -> Check {
    Check {
        suite: "gradient",
        passed: g.passed(),
        detail: format!(
            "max relative error {:.2e} over {} points (limit {TOLERANCE:.0e})",
            g.max_rel_err, g.points
        ),
        name: g.name,
        seconds,
    }
}

/// Finite-difference checks of every loss, every layer, the latent KL
/// path and the joint-prediction composite loss in all mode combinations.
pub fn gradients(points: usize, seed: u64) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut raw = loss_suite(points, seed)?;
    raw.extend(layer_suite(points, seed)?);
    raw.push(latent_kl_check(points, seed)?);
    for interval_mode in [IntervalMode::Central, IntervalMode::PerPercentile] {
        for cal_mode in [CalMode::Interval, CalMode::PerBound] {
            let cfg = CjpConfig {
                interval_mode,
                cal_mode,
                ..CjpConfig::default()
            };
            raw.push(total_loss_gradcheck(&cfg, points, seed)?);
        }
    }
    let each = start.elapsed().as_secs_f64() / raw.len() as f64;
    Ok(raw.into_iter().map(|g| from_gradcheck(g, each)).collect())
}

/// CQR on a small simulated trajectory: mean per-dimension test coverage
/// within a loose window around `1 - alpha`.
pub fn coverage_smoke(seed: u64) -> Check {
    timed("coverage", "cqr_smoke", || {
        let run = || -> Result<Vec<f64>> {
            let sim = simulate_trajectory(&SimConfig {
                n: 1400,
                feature_dim: 16,
                seed,
                ..SimConfig::default()
            })?;
            let split = split_dataset(sim.dataset.len(), SplitFractions::default(), seed)?;
            let cfg = CqrConfig {
                alpha: 0.1,
                forest: ForestConfig {
                    n_trees: 30,
                    seed,
                    ..ForestConfig::default()
                },
            };
            let mut model = cqr_fit(&sim.dataset, &split, &cfg)?;
            model.calibrate(&sim.dataset, &split.cal)?;
            let band = model.predict(&sim.dataset.x.select_rows(&split.test))?;
            Ok(band_coverage(&band, &sim.dataset.y.select_rows(&split.test))?.per_dim)
        };
        match run() {
            Ok(cov) => {
                let mean = cov.iter().sum::<f64>() / cov.len() as f64;
                (
                    (0.85..=0.95).contains(&mean),
                    format!("mean coverage {mean:.3} at alpha 0.1, want [0.85, 0.95]"),
                )
            }
            Err(e) => (false, e.to_string()),
        }
    })
}

/// Suite sizes: `full` is what acceptance requires, `quick` is for smoke runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestOptions {
    pub random_trials: usize,
    pub gradient_points: usize,
    pub seed: u64,
}

impl SelftestOptions {
    pub fn full() -> Self {
        Self {
            random_trials: 10_000,
            gradient_points: 100,
            seed: 0,
        }
    }

    pub fn quick() -> Self {
        Self {
            random_trials: 500,
            gradient_points: 10,
            seed: 0,
        }
    }
}

/// Runs every suite; a suite that errors counts as one failed check.
pub fn run_all(opts: SelftestOptions) -> Vec<Check> {
    let mut out = vec![
        quantile_exhaustive(),
        quantile_random(opts.random_trials, 200, opts.seed),
        forest_quantiles(200, opts.seed),
    ];
    let start = Instant::now();
    match gradients(opts.gradient_points, opts.seed) {
        Ok(checks) => out.extend(checks),
        Err(e) => out.push(Check {
            suite: "gradient",
            name: "suite".into(),
            passed: false,
            detail: e.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        }),
    }
    out.push(coverage_smoke(opts.seed));
    out
}
