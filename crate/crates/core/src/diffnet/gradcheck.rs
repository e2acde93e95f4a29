//! Central finite-difference checks for every layer and loss.

use rand::Rng as _;

use super::loss::{self, BoundLoss};
use super::{Mode, Network, NetworkSpec};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Sample points closer than this to an indicator or activation kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a - n| / (|a| + |n|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Runs `point` until it yields `points` checks, keeping the worst error.
/// `point` returns `None` for draws too close to a kink.
pub fn run_check(
    name: &str,
    points: usize,
    seed: u64,
    mut point: impl FnMut(&mut Rng) -> Result<Option<f64>>,
) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, rng::derive_seed(0x6772_6164, name.len() as u64));
    let mut done = 0;
    let mut worst = 0.0f64;
    let mut attempts = 0;
    while done < points {
        attempts += 1;
        if attempts > points * 50 {
            return Err(crate::Error::State(format!(
                "{name}: could not find {points} kink-free points"
            )));
        }
        if let Some(e) = point(&mut rng)? {
            worst = worst.max(e);
            done += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        points,
        max_rel_err: worst,
    })
}

fn random(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

fn far_from(a: &Matrix, b: &Matrix) -> bool {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| (x - y).abs() > KINK_MARGIN)
}

/// Checks a two-bound loss w.r.t. both bounds, with `y` fixed.
fn bound_point(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    eval: &dyn Fn(&Matrix, &Matrix, &Matrix) -> Result<BoundLoss>,
) -> Result<Option<f64>> {
    let y = random(rng, rows, cols, -1.0, 1.0);
    let lo = random(rng, rows, cols, -1.5, 0.3);
    let width = random(rng, rows, cols, 0.01, 1.5);
    let mut hi = lo.clone();
    hi.as_mut_slice()
        .iter_mut()
        .zip(width.as_slice())
        .for_each(|(h, w)| *h += w);
    if !far_from(&y, &lo) || !far_from(&y, &hi) || !far_from(&lo, &hi) {
        return Ok(None);
    }
    let n = rows * cols;
    let g = eval(&y, &lo, &hi)?;
    let x: Vec<f64> = lo.as_slice().iter().chain(hi.as_slice()).copied().collect();
    let analytic: Vec<f64> = g
        .d_lower
        .as_slice()
        .iter()
        .chain(g.d_upper.as_slice())
        .copied()
        .collect();
    let numeric = numeric_gradient(
        &mut |v| {
            let l = Matrix::from_vec(rows, cols, v[..n].to_vec()).expect("shape");
            let h = Matrix::from_vec(rows, cols, v[n..].to_vec()).expect("shape");
            eval(&y, &l, &h).map(|b| b.value).unwrap_or(f64::NAN)
        },
        &x,
        STEP,
    );
    Ok(Some(relative_error(&analytic, &numeric)))
}

/// Finite-difference checks for every loss.
pub fn loss_suite(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let (rows, cols) = (5, 3);
    let mut out = Vec::new();
    out.push(run_check("mse", points, seed, |rng| {
        let y = random(rng, rows, cols, -1.0, 1.0);
        let p = random(rng, rows, cols, -1.0, 1.0);
        let (_, g) = loss::mse_loss(&y, &p)?;
        let num = numeric_gradient(
            &mut |v| {
                loss::mse_loss(&y, &Matrix::from_vec(rows, cols, v.to_vec()).unwrap())
                    .unwrap()
                    .0
            },
            p.as_slice(),
            STEP,
        );
        Ok(Some(relative_error(g.as_slice(), &num)))
    })?);
    out.push(run_check("kl", points, seed, |rng| {
        let mu = random(rng, rows, cols, -1.5, 1.5);
        let lv = random(rng, rows, cols, -2.0, 2.0);
        let (_, dm, dl) = loss::kl_loss(&mu, &lv)?;
        let n = rows * cols;
        let x: Vec<f64> = mu.as_slice().iter().chain(lv.as_slice()).copied().collect();
        let num = numeric_gradient(
            &mut |v| {
                let m = Matrix::from_vec(rows, cols, v[..n].to_vec()).unwrap();
                let l = Matrix::from_vec(rows, cols, v[n..].to_vec()).unwrap();
                loss::kl_loss(&m, &l).unwrap().0
            },
            &x,
            STEP,
        );
        let analytic: Vec<f64> = dm.as_slice().iter().chain(dl.as_slice()).copied().collect();
        Ok(Some(relative_error(&analytic, &num)))
    })?);
    out.push(run_check("pinball", points, seed, |rng| {
        let y = random(rng, rows, cols, -1.0, 1.0);
        let q = random(rng, rows, cols, -1.0, 1.0);
        let alpha = rng.random_range(0.05..0.95);
        if !far_from(&y, &q) {
            return Ok(None);
        }
        let (_, g) = loss::pinball_loss(&y, &q, alpha)?;
        let num = numeric_gradient(
            &mut |v| {
                loss::pinball_loss(
                    &y,
                    &Matrix::from_vec(rows, cols, v.to_vec()).unwrap(),
                    alpha,
                )
                .unwrap()
                .0
            },
            q.as_slice(),
            STEP,
        );
        Ok(Some(relative_error(g.as_slice(), &num)))
    })?);
    out.push(run_check("interval_score", points, seed, |rng| {
        let alpha = rng.random_range(0.02..0.5);
        bound_point(rng, rows, cols, &|y, l, h| {
            loss::interval_score_loss(y, l, h, alpha)
        })
    })?);
    out.push(run_check("cal_obj", points, seed, |rng| {
        let p = rng.random_range(0.5..0.99);
        let cov: Vec<f64> = (0..cols)
            .map(|_| if rng.random_bool(0.5) { 0.2 } else { 1.0 })
            .collect();
        bound_point(rng, rows, cols, &|y, l, h| loss::cal_obj(y, l, h, p, &cov))
    })?);
    out.push(run_check("cal_obj_per_bound", points, seed, |rng| {
        // Levels strictly between the attainable batch fractions k/rows.
        let (a, b) = (rng.random_range(0.05..0.15), rng.random_range(0.85..0.95));
        bound_point(rng, rows, cols, &|y, l, h| {
            loss::cal_obj_per_bound(y, l, h, a, b)
        })
    })?);
    out.push(run_check("sharp_obj", points, seed, |rng| {
        let p = if rng.random_bool(0.5) { 0.3 } else { 0.9 };
        bound_point(rng, rows, cols, &|_, l, h| loss::sharp_obj(l, h, p))
    })?);
    out.push(run_check("comcal", points, seed, |rng| {
        let p = rng.random_range(0.5..0.99);
        let lambda = rng.random_range(0.0..=1.0);
        let cov: Vec<f64> = (0..cols)
            .map(|_| if rng.random_bool(0.5) { 0.2 } else { 1.0 })
            .collect();
        bound_point(rng, rows, cols, &|y, l, h| {
            loss::comcal(
                &loss::cal_obj(y, l, h, p, &cov)?,
                &loss::sharp_obj(l, h, p)?,
                lambda,
            )
        })
    })?);
    out.push(run_check("cross_entropy", points, seed, |rng| {
        let k = 4;
        let probs = random(rng, rows, k, 0.05, 1.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let (_, g) = loss::cross_entropy_loss(&labels, &probs)?;
        let num = numeric_gradient(
            &mut |v| {
                loss::cross_entropy_loss(&labels, &Matrix::from_vec(rows, k, v.to_vec()).unwrap())
                    .unwrap()
                    .0
            },
            probs.as_slice(),
            STEP,
        );
        Ok(Some(relative_error(g.as_slice(), &num)))
    })?);
    out.push(run_check("softmax_cross_entropy", points, seed, |rng| {
        let k = 5;
        let logits = random(rng, rows, k, -2.0, 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let (_, g) = loss::softmax_cross_entropy(&labels, &logits)?;
        let num = numeric_gradient(
            &mut |v| {
                loss::softmax_cross_entropy(
                    &labels,
                    &Matrix::from_vec(rows, k, v.to_vec()).unwrap(),
                )
                .unwrap()
                .0
            },
            logits.as_slice(),
            STEP,
        );
        Ok(Some(relative_error(g.as_slice(), &num)))
    })?);
    Ok(out)
}

/// Checks parameter and input gradients of `spec` under a fixed random
/// projection loss `sum(out * w)`, in train mode with a fixed seed.
pub fn network_check(name: &str, spec: NetworkSpec, points: usize, seed: u64) -> Result<GradCheck> {
    let out_dim = spec.validate()?;
    let in_dim = spec.input_dim;
    run_check(name, points, seed, |rng| {
        let rows = 3;
        let mut net = Network::new(spec.clone(), rng.random())?;
        let x = random(rng, rows, in_dim, -1.0, 1.0);
        let w = random(rng, rows, out_dim, -1.0, 1.0);
        let fseed: u64 = rng.random();
        net.forward_seeded(&x, Mode::Train, fseed)?;
        if net.prelu_margin().is_some_and(|m| m < KINK_MARGIN) {
            return Ok(None);
        }
        let dx = net.backward(&w)?;
        let analytic: Vec<f64> = net.grads().iter().chain(dx.as_slice()).copied().collect();
        let p0 = net.params().to_vec();
        let np = p0.len();
        let mut probe = net.clone();
        let x0: Vec<f64> = p0.iter().chain(x.as_slice()).copied().collect();
        let numeric = numeric_gradient(
            &mut |v| {
                probe.params_mut().copy_from_slice(&v[..np]);
                let xi = Matrix::from_vec(rows, in_dim, v[np..].to_vec()).unwrap();
                let out = probe.forward_seeded(&xi, Mode::Train, fseed).unwrap();
                out.as_slice()
                    .iter()
                    .zip(w.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x0,
            STEP,
        );
        Ok(Some(relative_error(&analytic, &numeric)))
    })
}

/// Finite-difference checks for every layer type and a mixed network.
pub fn layer_suite(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        network_check("dense", NetworkSpec::new(4).dense(3), points, seed)?,
        network_check("prelu", NetworkSpec::new(4).dense(5).prelu(), points, seed)?,
        network_check(
            "dropout",
            NetworkSpec::new(4).dense(6).dropout(0.4),
            points,
            seed,
        )?,
        network_check(
            "softmax",
            NetworkSpec::new(4).dense(5).softmax(),
            points,
            seed,
        )?,
        network_check(
            "gaussian_latent",
            NetworkSpec::new(4).gaussian_latent(3),
            points,
            seed,
        )?,
        network_check(
            "network",
            NetworkSpec::new(4)
                .dense(6)
                .prelu()
                .dropout(0.2)
                .gaussian_latent(2)
                .dense(5)
                .prelu()
                .dense(3),
            points,
            seed,
        )?,
    ])
}

/// Latent KL gradient routed through [`Network::set_latent_grad`].
pub fn latent_kl_check(points: usize, seed: u64) -> Result<GradCheck> {
    let spec = NetworkSpec::new(3)
        .dense(5)
        .prelu()
        .gaussian_latent(2)
        .dense(2);
    run_check("kl_through_network", points, seed, |rng| {
        let rows = 4;
        let mut net = Network::new(spec.clone(), rng.random())?;
        let x = random(rng, rows, 3, -1.0, 1.0);
        let w = random(rng, rows, 2, -1.0, 1.0);
        let fseed: u64 = rng.random();
        let objective = |net: &mut Network| -> Result<(f64, Matrix, Matrix, Matrix)> {
            let out = net.forward_seeded(&x, Mode::Train, fseed)?;
            let (mu, lv) = net.latent_stats().expect("latent layer");
            let (kl, dm, dl) = loss::kl_loss(mu, lv)?;
            let proj: f64 = out
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            Ok((proj + kl, dm, dl, out))
        };
        let (_, dm, dl, _) = objective(&mut net)?;
        if net.prelu_margin().is_some_and(|m| m < KINK_MARGIN) {
            return Ok(None);
        }
        net.set_latent_grad(dm, dl);
        net.backward(&w)?;
        let analytic = net.grads().to_vec();
        let mut probe = net.clone();
        let numeric = numeric_gradient(
            &mut |v| {
                probe.params_mut().copy_from_slice(v);
                objective(&mut probe).unwrap().0
            },
            net.params(),
            STEP,
        );
        Ok(Some(relative_error(&analytic, &numeric)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass() {
        for c in loss_suite(100, 1).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn all_layers_pass() {
        for c in layer_suite(100, 2).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
        let c = latent_kl_check(50, 3).unwrap();
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }
}
