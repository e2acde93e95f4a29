//! Statistical checks of the heteroskedastic simulator and the report format.

use cvo::data::{simulate_trajectory, SimConfig};
use cvo::eval::{compare_methods, ComparisonTable, MethodReport};

/// Feature noise in the darkest decile of frames has variance close to
/// `(sigma0 (1 + beta))^2`. The noise is recovered exactly by subtracting a
/// noiseless run of the same scene.
#[test]
fn top_decile_noise_variance() {
    let cfg = SimConfig {
        n: 100_000,
        feature_dim: 4,
        seed: 5,
        ..SimConfig::default()
    };
    let noisy = simulate_trajectory(&cfg).unwrap();
    let clean = simulate_trajectory(&SimConfig {
        sigma0: 0.0,
        ..cfg.clone()
    })
    .unwrap();

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.sort_by(|&a, &b| noisy.noise_scale[b].total_cmp(&noisy.noise_scale[a]));
    let top = &order[..cfg.n / 10];

    let diffs: Vec<f64> = top
        .iter()
        .flat_map(|&i| {
            let (a, b) = (noisy.dataset.x.row(i), clean.dataset.x.row(i));
            a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>()
        })
        .collect();
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let expected = (cfg.sigma0 * (1.0 + cfg.beta)).powi(2);
    assert!(
        (var / expected - 1.0).abs() < 0.1,
        "variance {var} vs {expected}"
    );
}

#[test]
fn noise_scale_spans_clean_to_dark() {
    let cfg = SimConfig::default();
    let sim = simulate_trajectory(&cfg).unwrap();
    let lo = sim
        .noise_scale
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = sim.noise_scale.iter().cloned().fold(0.0, f64::max);
    assert!((lo - cfg.sigma0).abs() < 1e-12);
    assert!((hi - cfg.sigma0 * (1.0 + cfg.beta)).abs() < 1e-12);
}

fn report(method: &str, volume: f64, length: f64) -> MethodReport {
    MethodReport {
        method: method.into(),
        alpha: 0.1,
        n_test: 10,
        dims: (0..6).collect(),
        coverage: vec![0.9; 6],
        joint_coverage: 0.6,
        mean_length: vec![length; 6],
        interval_score: Some(1.0),
        volume,
        volume_std_error: 0.0,
        unbounded_dims: if volume.is_finite() { 0 } else { 6 },
        fallback_sets: 0,
        timings: None,
    }
}

#[test]
fn unbounded_values_survive_json_and_csv() {
    let table = compare_methods(vec![
        report("cqr", f64::INFINITY, f64::INFINITY),
        report("cjp", 0.25, 0.5),
    ])
    .unwrap();
    let json = table.to_json().unwrap();
    assert!(json.contains("null"));
    for back in [
        ComparisonTable::from_json(&json).unwrap(),
        ComparisonTable::from_csv(&table.to_csv().unwrap()).unwrap(),
    ] {
        assert_eq!(back.methods[0].volume, f64::INFINITY);
        assert!(back.methods[0]
            .mean_length
            .iter()
            .all(|v| *v == f64::INFINITY));
        assert_eq!(back.methods[1].volume, 0.25);
    }
}
