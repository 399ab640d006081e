//! `fraclab <experiment> --config <path> --out <dir> [--seed <u64>] [--parallel]`
//!
//! Exit status: 0 all checks pass, 1 a check failed, 2 config error (nothing
//! written), 3 numerical failure (results.json records the error).

mod config;
mod experiments;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use fraclab_core::checks::{Check, Comparison};
use serde_json::{json, Value};

use config::ExperimentConfig;
use experiments::{Experiment, RunError, Setup};

#[derive(Parser, Debug)]
#[command(name = "fraclab", version, about = "Numerical experiments for fractional elliptic operators")]
struct Cli {
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run independent checks concurrently (the suite's criteria).
    #[arg(long)]
    parallel: bool,
}

fn check_json(c: &Check) -> Value {
    let comparison = match c.comparison {
        Comparison::AtMost => "<=",
        Comparison::AtLeast => ">=",
        Comparison::Report => "report",
    };
    json!({
        "name": c.name,
        "value": c.value,
        "tolerance": if c.tolerance.is_finite() { json!(c.tolerance) } else { Value::Null },
        "comparison": comparison,
        "passed": c.passed,
    })
}

fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    std::fs::write(path, text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let setup = ExperimentConfig::load(&cli.config)
        .and_then(|cfg| Setup::new(cli.experiment, &cfg, cli.seed).map(|s| (cfg, s)));
    let (config, setup) = match setup {
        Ok(v) => v,
        Err(e) => {
            eprintln!("fraclab: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("fraclab: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(3);
    }
    let outcome = setup.run(&cli.out, cli.parallel);
    let mut results = json!({
        "experiment": cli.experiment.name(),
        "seed": setup.seed(),
        "config": config,
    });
    let mut volatile = Vec::new();
    let code = match outcome {
        Ok(o) => {
            let (vol, checks): (Vec<_>, Vec<_>) = o.checks.iter().partition(|c| c.volatile);
            volatile = vol.iter().map(|c| check_json(c)).collect();
            let passed = o.checks.iter().all(|c| c.passed);
            results["status"] = json!(if passed { "pass" } else { "fail" });
            results["checks"] = Value::Array(checks.iter().map(|c| check_json(c)).collect());
            results["metrics"] = json!(o.metrics);
            results["artifacts"] = json!(o.artifacts);
            for c in o.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {}: {} (tolerance {})", c.name, c.value, c.tolerance);
            }
            if passed { 0 } else { 1 }
        }
        Err(RunError::Config(e)) => {
            // late config problems (e.g. refined grid invalid) still count as config errors
            eprintln!("fraclab: {e}");
            results["status"] = json!("config_error");
            results["error"] = json!(e.to_string());
            2
        }
        Err(e) => {
            eprintln!("fraclab: {e}");
            results["status"] = json!("numerical_failure");
            results["error"] = json!(e.to_string());
            3
        }
    };
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let metadata = json!({
        "timestamp_unix": timestamp,
        "version": env!("CARGO_PKG_VERSION"),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "parallel": cli.parallel,
        "volatile_checks": volatile,
    });
    let written = write_json(&cli.out.join("results.json"), &results)
        .and_then(|_| write_json(&cli.out.join("metadata.json"), &metadata));
    if let Err(e) = written {
        eprintln!("fraclab: cannot write results: {e}");
        return ExitCode::from(3);
    }
    ExitCode::from(code)
}
