//! Command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use commands::Run;
use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "smoothtaylor",
    version,
    about = "Gradient attribution maps and their evaluation"
)]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-input and per-sample work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write an attribution map and saliency image per (input, method).
    Attribute,
    /// Score attributions with the perturbation game and multi-scale TV.
    Evaluate,
    /// Search the SmoothTaylor noise scale per input.
    Adaptive,
    /// Compare model gradients with finite differences.
    Gradcheck,
    /// Collect existing results into report.md.
    Report,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand and returns the process exit code: 0 on success, 1
/// when a gradient check fails.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(cli)?;
    if let Some(n) = cfg.workers {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let run = Run::load(cfg)?;
    match cli.command {
        Command::Attribute => {
            let n = commands::cmd_attribute(&run)?;
            println!("wrote {n} attribution maps to {}", run.cfg.output_dir.display());
        }
        Command::Evaluate => {
            let rows = commands::cmd_evaluate(&run)?;
            print!("{}", commands::table_csv(&rows));
        }
        Command::Adaptive => {
            for r in commands::cmd_adaptive(&run)? {
                println!(
                    "{}: sigma {} -> {}, auc {} -> {}",
                    r.image_id, r.initial_sigma, r.best_sigma, r.initial_auc, r.best_auc
                );
            }
        }
        Command::Gradcheck => {
            let report = commands::cmd_gradcheck(&run)?;
            for (kind, err, ok) in report.by_kind() {
                println!("{kind:<10} max rel err {err:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            println!(
                "end-to-end max rel err {:.3e}, {:.2}% of {} coordinates within tolerance ({} skipped at kinks)",
                report.model_max_rel_err,
                100.0 * report.model_pass_fraction,
                report.model_checked,
                report.model_skipped
            );
            if report.passed {
                println!("PASS");
            } else {
                let names: Vec<String> = report
                    .failing_layers()
                    .iter()
                    .map(|l| format!("{} (layer {})", l.kind, l.index))
                    .collect();
                println!(
                    "FAIL: {}",
                    if names.is_empty() {
                        "end-to-end gradient".into()
                    } else {
                        names.join(", ")
                    }
                );
                return Ok(1);
            }
        }
        Command::Report => {
            commands::cmd_report(&run)?;
            println!("wrote {}", run.cfg.output_dir.join("report.md").display());
        }
    }
    Ok(0)
}
