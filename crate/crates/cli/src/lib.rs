//! `cvo`: command-line pipelines over one JSON run configuration.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration (including
//! unknown flags), 2 when a pipeline fails at run time.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cvo::pipeline::{self, parse_methods, MethodId, Run, RunConfig};
use cvo::selftest::{self, SelftestOptions};
use cvo::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cvo",
    version,
    about = "Conformal uncertainty bands for 6-DOF pose regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory; write the pose file, feature CSV and split manifest.
    Simulate(RunArgs),
    /// Fit the selected methods and save uncalibrated checkpoints.
    Train(RunArgs),
    /// Calibrate saved checkpoints on the calibration split.
    Calibrate(RunArgs),
    /// Write per-method reports and plots from calibrated checkpoints.
    Evaluate(RunArgs),
    /// Build the comparison table from saved reports.
    Report(RunArgs),
    /// Train, calibrate, evaluate and compare in one go.
    Compare(RunArgs),
    /// Run the quantile, gradient and coverage oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of cqr,csp,mcqr,cjp (default: the config's list).
    #[arg(short, long)]
    methods: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set cqr.alpha=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Smaller trial counts, for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

impl RunArgs {
    /// Loads the configuration, applies the flag overrides and prepares the output directory.
    fn prepare(&self) -> cvo::Result<(Run, Vec<MethodId>)> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = Some(out.clone());
        }
        let methods = match &self.methods {
            Some(list) => parse_methods(list)?,
            None => cfg.methods.clone(),
        };
        Ok((Run::prepare(cfg)?, methods))
    }
}

fn list_paths(out: &mut dyn Write, paths: &[PathBuf]) -> std::io::Result<()> {
    for p in paths {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

fn run_pipeline(cmd: &Command, out: &mut dyn Write) -> cvo::Result<i32> {
    if let Command::Selftest(args) = cmd {
        let opts = SelftestOptions {
            seed: args.seed,
            ..if args.quick {
                SelftestOptions::quick()
            } else {
                SelftestOptions::full()
            }
        };
        let checks = selftest::run_all(opts);
        for c in &checks {
            writeln!(out, "{c}")?;
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        writeln!(out, "{} checks, {failed} failed", checks.len())?;
        return Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME });
    }
    let args = match cmd {
        Command::Simulate(a)
        | Command::Train(a)
        | Command::Calibrate(a)
        | Command::Evaluate(a)
        | Command::Report(a)
        | Command::Compare(a) => a,
        Command::Selftest(_) => unreachable!("handled above"),
    };
    let (run, methods) = args.prepare()?;
    match cmd {
        Command::Simulate(_) => list_paths(out, &pipeline::simulate(&run)?)?,
        Command::Train(_) => list_paths(out, &pipeline::train(&run, &methods)?)?,
        Command::Calibrate(_) => list_paths(out, &pipeline::calibrate(&run, &methods)?)?,
        Command::Evaluate(_) => {
            for r in pipeline::evaluate(&run, &methods)? {
                let mean = r.coverage.iter().sum::<f64>() / r.coverage.len().max(1) as f64;
                writeln!(
                    out,
                    "{}: mean coverage {mean:.4}, joint {:.4}",
                    r.method, r.joint_coverage
                )?;
            }
        }
        Command::Report(_) => write!(out, "{}", pipeline::report(&run, &methods)?.render_text())?,
        Command::Compare(_) => write!(out, "{}", pipeline::compare(&run, &methods)?.render_text())?,
        Command::Selftest(_) => unreachable!("handled above"),
    }
    writeln!(out, "artifacts in {}", run.paths.root.display())?;
    Ok(EXIT_OK)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_VALIDATION
                }
            };
        }
    };
    match run_pipeline(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
