//! Experiment runner: dataset generation, functional training with
//! consistency verification, timing simulation sweeps, and CSV emission.
//!
//! Exit codes are stable contracts: 0 success, 1 verification failure,
//! 2 config error, 3 I/O error.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{debug, info};

use nestpipe_core::dbp::{self, TrainMode};
use nestpipe_core::oracle::{compare_trajectories, run_oracle, ConsistencyReport};
use nestpipe_core::timing::{simulate_mode, ModeMetrics, PayloadProfile};
use nestpipe_core::types::Sample;
use nestpipe_core::workload::{gen_dataset, read_dataset, write_dataset};

use config::{parse_sweep, ConfigLoadError, ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "nestpipe",
    about = "Deterministic engine for decentralized sparse-embedding training with nested pipelining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML with `[workload]`, `[train]`, `[cost]`, `[run]`).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,

    /// Override the run mode (sync-baseline | dbp-only | fwp-only | nestpipe | unsafe-six-stage).
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Override both workload and train seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Also run the synchronous oracle and compare trajectories.
    #[arg(long, global = true)]
    verify: bool,

    /// Force exact-order gradient summation (bitwise oracle equality).
    #[arg(long = "exact-order", global = true)]
    exact_order: bool,

    /// Worker-count sweep, e.g. --sweep workers=128,256,512.
    #[arg(long, global = true)]
    sweep: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset file.
    Gen,
    /// Run functional training in the selected mode, with optional verification.
    Train,
    /// Sweep the timing model over worker counts and modes.
    Simulate,
    /// Side-by-side consistency and performance summary of all modes.
    Compare,
}

enum CliError {
    Config(String),
    Io(String),
    Verify(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Verify(m) => m,
        }
    }
}

impl From<ConfigLoadError> for CliError {
    fn from(e: ConfigLoadError) -> Self {
        match e {
            ConfigLoadError::Io(m) => CliError::Io(m),
            ConfigLoadError::Invalid(m) => CliError::Config(m),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("NESTPIPE_LOG")).init();
    let cli = Cli::parse();

    let overrides = Overrides {
        mode: cli.mode.clone(),
        seed: cli.seed,
        out_dir: cli.out.clone(),
        verify: cli.verify,
        exact_order: cli.exact_order,
        sweep_workers: match cli.sweep.as_deref().map(parse_sweep) {
            None => None,
            Some(Ok(sweep)) => Some(sweep),
            Some(Err(msg)) => {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
        },
    };

    let result = ExperimentConfig::load(&cli.config, &overrides)
        .map_err(CliError::from)
        .and_then(|cfg| match cli.command {
            Command::Gen => cmd_gen(&cfg),
            Command::Train => cmd_train(&cfg),
            Command::Simulate => cmd_simulate(&cfg),
            Command::Compare => cmd_compare(&cfg),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn io_error(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.run.out_dir)
        .map_err(|e| io_error(&format!("creating {}", cfg.run.out_dir.display()), e))
}

fn cmd_gen(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let samples = gen_dataset(&cfg.workload).map_err(|e| CliError::Config(e.to_string()))?;
    let path = cfg.dataset_path();
    write_dataset(&path, &samples).map_err(|e| io_error("writing dataset", e))?;

    let mut counts: std::collections::HashMap<u64, u64> = Default::default();
    for s in &samples {
        for k in &s.keys {
            *counts.entry(k.0).or_default() += 1;
        }
    }
    let mut head: Vec<(u64, u64)> = counts.into_iter().collect();
    head.sort_by_key(|&(id, count)| (std::cmp::Reverse(count), id));
    head.truncate(8);
    println!("wrote {} samples to {}", samples.len(), path.display());
    println!(
        "key-frequency head: {}",
        head.iter()
            .map(|(id, c)| format!("{id}:{c}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Sample>, CliError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Io(format!(
            "dataset {} not found (run `nestpipe gen` first)",
            path.display()
        )));
    }
    read_dataset(&path).map_err(|e| io_error("reading dataset", e))
}

/// Verification tolerance: exact-order runs must be bitwise, fast runs are
/// held to the drift bound.
fn verify_tolerance(exact_order: bool) -> f64 {
    if exact_order {
        0.0
    } else {
        1e-5
    }
}

fn run_verified(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    data: &[Sample],
) -> Result<(dbp::RunOutput, Option<ConsistencyReport>), CliError> {
    let engine_cfg = mode.apply(&cfg.train);
    let out = dbp::run(data, &engine_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    if !cfg.run.verify {
        return Ok((out, None));
    }
    let reference = run_oracle(data, &engine_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let tolerance = verify_tolerance(engine_cfg.exact_order_mode);
    let report = compare_trajectories(&reference, &out.trajectory, tolerance)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((out, Some(report)))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let mode = cfg.mode();
    let engine_cfg = mode.apply(&cfg.train);
    info!(
        "training mode={} steps={} workers={}",
        mode.as_str(),
        engine_cfg.steps,
        engine_cfg.num_workers
    );

    let (out, report) = run_verified(cfg, mode, &data)?;
    for stats in &out.step_stats {
        debug!("step {} mean_loss {:.6}", stats.step, stats.mean_loss);
    }

    // Per-step timing from the measured payloads.
    let rows: Vec<(u64, ModeMetrics)> = out
        .step_stats
        .iter()
        .map(|stats| {
            let profile = PayloadProfile::from_step_stats(stats, &engine_cfg);
            let (metrics, _) = simulate_mode(
                mode,
                &profile,
                &cfg.cost,
                engine_cfg.num_workers,
                engine_cfg.pipeline_depth,
            );
            (stats.step, metrics)
        })
        .collect();
    let metrics_path = cfg.run.out_dir.join("metrics.csv");
    nestpipe_core::timing::write_metrics_csv(&rows, &metrics_path)
        .map_err(|e| io_error("writing metrics", e))?;
    let stage_path = cfg.run.out_dir.join("stages.csv");
    dbp::write_stage_csv(&out.stage_log, &stage_path)
        .map_err(|e| io_error("writing stage log", e))?;
    if let Some(stats) = out.step_stats.last() {
        let dag_path = cfg.run.out_dir.join("schedule_dag.json");
        stats
            .dag
            .write_json(&dag_path)
            .map_err(|e| io_error("writing schedule", e))?;
    }

    println!(
        "trained {} steps in mode {}; final mean loss {:.6}",
        out.steps_processed,
        mode.as_str(),
        out.step_stats.last().map_or(f64::NAN, |s| s.mean_loss)
    );
    println!("metrics: {}", metrics_path.display());

    if let Some(report) = report {
        let report_path = cfg.run.out_dir.join("consistency_report.txt");
        report
            .write_text(&report_path)
            .map_err(|e| io_error("writing report", e))?;
        println!(
            "verify: max_abs_dense={:e} max_abs_emb={:e} first_divergent_step={} tau={}",
            report.max_abs_dense_diff,
            report.max_abs_embedding_diff,
            report
                .first_divergent_step
                .map_or("none".into(), |s| s.to_string()),
            report
                .estimated_staleness_lag
                .map_or("none".into(), |t| t.to_string()),
        );
        println!("report: {}", report_path.display());
        if let Some(step) = report.first_divergent_step {
            return Err(CliError::Verify(format!(
                "trajectory diverged from the synchronous oracle at step {step} (max abs diff {:e})",
                report.max_abs_diff()
            )));
        }
    }
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let profile = PayloadProfile::parametric(&cfg.train, cfg.workload.keys_per_sample);
    let sweep = &cfg.run.sweep_workers;
    let modes = [
        TrainMode::SyncBaseline,
        TrainMode::DbpOnly,
        TrainMode::FwpOnly,
        TrainMode::NestPipe,
    ];

    let mut rows = Vec::with_capacity(modes.len() * sweep.len());
    for mode in modes {
        for &workers in sweep {
            let (metrics, _) =
                simulate_mode(mode, &profile, &cfg.cost, workers, cfg.train.pipeline_depth);
            debug!(
                "{} W={} latency={:.2}ms exposed_ratio={:.3} utilization={:.3}",
                metrics.mode.as_str(),
                metrics.workers,
                metrics.step_latency_ms,
                metrics.exposed_ratio,
                metrics.utilization
            );
            rows.push((0u64, metrics));
        }
    }
    let metrics_path = cfg.run.out_dir.join("sweep_metrics.csv");
    nestpipe_core::timing::write_metrics_csv(&rows, &metrics_path)
        .map_err(|e| io_error("writing metrics", e))?;

    let largest = *sweep.iter().max().expect("validated non-empty");
    let (_, timeline) = simulate_mode(
        cfg.mode(),
        &profile,
        &cfg.cost,
        largest,
        cfg.train.pipeline_depth,
    );
    let timeline_path = cfg.run.out_dir.join("timeline.csv");
    timeline
        .write_csv(&timeline_path)
        .map_err(|e| io_error("writing timeline", e))?;

    println!("{} rows -> {}", rows.len(), metrics_path.display());
    println!(
        "timeline ({} @ W={largest}) -> {}",
        cfg.run.mode,
        timeline_path.display()
    );
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let verify_cfg = ExperimentConfig {
        run: config::RunSection {
            verify: true,
            ..cfg.run.clone()
        },
        ..cfg.clone()
    };

    println!(
        "{:<18} {:>15} {:>12} {:>16} {:>13}",
        "mode", "step_latency", "lookup_ms", "comm_exposed_ms", "oracle_equal"
    );
    for mode in TrainMode::ALL {
        let (out, report) = run_verified(&verify_cfg, mode, &data)?;
        let engine_cfg = mode.apply(&cfg.train);
        let metrics = out
            .step_stats
            .last()
            .map(|stats| {
                let profile = PayloadProfile::from_step_stats(stats, &engine_cfg);
                simulate_mode(
                    mode,
                    &profile,
                    &cfg.cost,
                    engine_cfg.num_workers,
                    engine_cfg.pipeline_depth,
                )
                .0
            })
            .ok_or_else(|| CliError::Config("no steps processed; dataset too small".into()))?;
        let oracle_equal = report
            .as_ref()
            .map(|r| {
                if r.first_divergent_step.is_none() {
                    "yes"
                } else {
                    "no"
                }
            })
            .unwrap_or("-");
        println!(
            "{:<18} {:>13.2}ms {:>12.3} {:>16.3} {:>13}",
            mode.as_str(),
            metrics.step_latency_ms,
            metrics.lookup_ms,
            metrics.comm_exposed_ms,
            oracle_equal
        );
    }
    Ok(())
}
