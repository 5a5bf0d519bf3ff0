use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use safectx::harness::{
    logistic_coverage, run_algorithm1, run_classify, run_logistic_bounds, run_mmd_demo,
    run_sensitivity, ExperimentConfig, RunMetrics, Scenario,
};
use safectx::io::{write_json, write_records};
use safectx::Error;
use serde::Serialize;

/// Safe exploration under uncertain contexts: experiment runner.
#[derive(Debug, Parser)]
#[command(name = "safectx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decision loop (full-loop, pure-safeopt or always-identify) over every seed.
    RunLoop(IoArgs),
    /// Classifier threshold sweep on the five-height channel.
    Sensitivity(IoArgs),
    /// Bound table and coverage on the synthetic logistic problem.
    LogisticBounds(IoArgs),
    /// Calibration of the identification test on the pendulum contexts.
    MmdDemo(IoArgs),
    /// Fit the classifier on a dataset CSV and evaluate the configured queries.
    Classify(IoArgs),
}

#[derive(Debug, Args)]
struct IoArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct LoopSummary {
    scenario: Scenario,
    seeds: usize,
    seeds_with_failures: usize,
    total_failures: usize,
    total_episodes: usize,
    total_identification_episodes: usize,
    total_training_time_s: f64,
    runs: Vec<RunMetrics>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        Error::Config(_) | Error::Input(_) | Error::DimensionMismatch { .. } | Error::Json(_) => 2,
        _ => 1,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn run(cli: Cli) -> Result<(), Error> {
    let (args, command) = match &cli.command {
        Command::RunLoop(a) => (a, "run-loop"),
        Command::Sensitivity(a) => (a, "sensitivity"),
        Command::LogisticBounds(a) => (a, "logistic-bounds"),
        Command::MmdDemo(a) => (a, "mmd-demo"),
        Command::Classify(a) => (a, "classify"),
    };
    let cfg = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out)?;
    let out = &args.out;
    info!("{command}: writing to {}", out.display());

    match cli.command {
        Command::RunLoop(_) => {
            if !cfg.scenario.is_loop() {
                return Err(Error::Config(format!(
                    "run-loop needs a loop scenario, config has {:?}",
                    cfg.scenario
                )));
            }
            let mut runs = Vec::new();
            let mut episodes = Vec::new();
            let mut bounds = Vec::new();
            for &seed in &cfg.seeds {
                let o = run_algorithm1(&cfg, seed)?;
                info!(
                    "seed {seed}: {} failures, {} identifications",
                    o.metrics.failures, o.metrics.identification_episodes
                );
                runs.push(o.metrics);
                episodes.extend(o.episodes);
                bounds.extend(o.bounds);
            }
            let summary = LoopSummary {
                scenario: cfg.scenario,
                seeds: runs.len(),
                seeds_with_failures: runs.iter().filter(|m| m.failures > 0).count(),
                total_failures: runs.iter().map(|m| m.failures).sum(),
                total_episodes: runs.iter().map(|m| m.episodes).sum(),
                total_identification_episodes: runs.iter().map(|m| m.identification_episodes).sum(),
                total_training_time_s: runs.iter().map(|m| m.training_time_s).sum(),
                runs,
            };
            write_json(&out.join("metrics.json"), &summary)?;
            write_records(&out.join("episodes.csv"), &episodes)?;
            write_records(&out.join("bounds.csv"), &bounds)?;
        }
        Command::Sensitivity(_) => {
            let seed = first_seed(&cfg);
            let s = run_sensitivity(&cfg, seed)?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "seed": seed, "rows": &s.rows }),
            )?;
            write_records(&out.join("sensitivity.csv"), &s.rows)?;
            write_records(&out.join("confusion.csv"), &s.confusion)?;
        }
        Command::LogisticBounds(_) => {
            let seed = first_seed(&cfg);
            let rows = run_logistic_bounds(&cfg, seed)?;
            let coverage = logistic_coverage(&cfg, seed)?;
            let min = coverage.iter().copied().fold(f64::INFINITY, f64::min);
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({
                    "seed": seed,
                    "resamples": cfg.logistic.resamples,
                    "delta_class": cfg.logistic.delta_class,
                    "min_coverage": min,
                    "coverage": coverage,
                }),
            )?;
            write_records(&out.join("bounds.csv"), &rows)?;
        }
        Command::MmdDemo(_) => {
            let seed = first_seed(&cfg);
            let d = run_mmd_demo(&cfg, seed)?;
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "seed": seed, "summary": &d.summary, "pairs": &d.pairs }),
            )?;
            write_records(&out.join("tests.csv"), &d.tests)?;
            write_records(&out.join("pairs.csv"), &d.pairs)?;
        }
        Command::Classify(_) => {
            let base = args.config.parent().unwrap_or(Path::new("."));
            let rows = run_classify(&cfg, base).map_err(|e| match e {
                Error::Io(_) | Error::Csv(_) => Error::Input(format!("dataset: {e}")),
                e => e,
            })?;
            let confident = rows.iter().filter(|r| r.confident).count();
            write_json(
                &out.join("metrics.json"),
                &serde_json::json!({ "queries": rows.len(), "confident": confident }),
            )?;
            write_records(&out.join("bounds.csv"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Factorization { jitter: 1e-6 }), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Input("x".into())), 2);
        assert_eq!(
            exit_code(&Error::DimensionMismatch {
                expected: 1,
                got: 2
            }),
            2
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("disk"))), 1);
    }
}
