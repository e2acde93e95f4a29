use std::fs;
use std::path::Path;
use std::process::Command;

use cvo_cli::{dispatch, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};

/// Runs the CLI in-process, returning `(exit code, stdout, stderr)`.
fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("cvo").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// A configuration small enough to train every method in well under a second.
fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "name": "tiny",
        "seed": 7,
        "data": { "source": "simulate", "n": 280, "feature_dim": 8 },
        "cqr": { "forest": { "n_trees": 10 } },
        "csp": { "classes": 5, "train": { "hidden": 16, "epochs": 3 } },
        "mcqr": { "grid_points": 8, "predictor": { "hidden": 16, "epochs": 3 }, "cvae": { "hidden": 16, "epochs": 3 } },
        "cjp": { "train": { "hidden": 16, "epochs": 3 } },
        "volume_samples": 50,
        "timing_reps": 1,
        "plot_regions": 3
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let (code, _, err) = run(&["train", "--bogus"]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn help_exits_0() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in [
        "simulate",
        "train",
        "calibrate",
        "evaluate",
        "report",
        "compare",
        "selftest",
    ] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn bad_configuration_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"seeed": 1}"#).unwrap();
    let (code, _, err) = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_VALIDATION, "{err}");
    assert!(err.contains("seeed"));

    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let (code, _, _) = run(&[
        "train",
        "--config",
        &cfg,
        "--output",
        out.to_str().unwrap(),
        "--set",
        "cqr.alpha=2",
    ]);
    assert_eq!(code, EXIT_VALIDATION);
    let (code, _, _) = run(&["train", "--config", &cfg, "--methods", "cqr,nope"]);
    assert_eq!(code, EXIT_VALIDATION);
    let (code, _, _) = run(&[
        "train",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn evaluating_without_a_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let (code, _, err) = run(&[
        "evaluate",
        "--config",
        &cfg,
        "--output",
        out.to_str().unwrap(),
        "--methods",
        "cqr",
    ]);
    assert_eq!(code, EXIT_RUNTIME, "{err}");
    assert!(err.contains("train"), "{err}");
}

#[test]
fn simulate_writes_data_and_config_copy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sim");
    let (code, stdout, err) = run(&[
        "simulate",
        "--config",
        &cfg,
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in [
        "data/poses.txt",
        "data/features.csv",
        "data/split.json",
        "config.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing; stdout {stdout}");
    }
    let poses = fs::read_to_string(out.join("data/poses.txt")).unwrap();
    assert_eq!(poses.lines().filter(|l| !l.starts_with('#')).count(), 280);
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("data/split.json")).unwrap()).unwrap();
    assert_eq!(split["cal"].as_array().unwrap().len(), 40);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["data"]["seed"], 7);
}

#[test]
fn staged_commands_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("staged");
    let o = out.to_str().unwrap();
    for cmd in ["train", "calibrate", "evaluate"] {
        let (code, _, err) = run(&[cmd, "--config", &cfg, "--output", o, "--methods", "cqr,cjp"]);
        assert_eq!(code, EXIT_OK, "{cmd}: {err}");
    }
    let (code, stdout, err) = run(&[
        "report",
        "--config",
        &cfg,
        "--output",
        o,
        "--methods",
        "cqr,cjp",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("coverage_x"));
    for f in [
        "comparison.csv",
        "comparison.json",
        "comparison.txt",
        "models/cqr.ckpt",
        "reports/cjp.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn compare_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, stdout, err) = run(&[
            "compare",
            "--config",
            &cfg,
            "--output",
            out.to_str().unwrap(),
            "--methods",
            "cqr,csp,mcqr,cjp",
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(stdout.contains("mcqr"));
    }
    let mut compared = 0;
    for sub in ["", "reports", "plots"] {
        for entry in fs::read_dir(a.join(sub)).unwrap() {
            let path = entry.unwrap().path();
            let ext = path.extension().and_then(|e| e.to_str());
            let name = path.file_name().unwrap();
            if matches!(ext, Some("json") | Some("svg"))
                && name != "config.json"
                && name != "timings.json"
            {
                assert_eq!(
                    fs::read(&path).unwrap(),
                    fs::read(b.join(sub).join(name)).unwrap(),
                    "{}",
                    path.display()
                );
                compared += 1;
            }
        }
    }
    assert!(compared >= 1 + 4 + 25, "only {compared} artifacts compared");
}

#[test]
fn selftest_quick_passes() {
    let (code, out, _) = run(&["selftest", "--quick"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("0 failed"));
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_cvo");
    let status = Command::new(exe).arg("--nope").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));
    let ok = Command::new(exe).arg("--version").output().unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
}
