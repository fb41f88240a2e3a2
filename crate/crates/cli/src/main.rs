//! Command-line harness for the federated continual-learning simulator.
//!
//! Exit codes: 0 success, 1 contract/config violation, 2 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prism_core::config::ExperimentConfig;
use prism_core::experiment;
use prism_core::tasks;
use prism_core::verify;

#[derive(Parser)]
#[command(
    name = "prism",
    about = "Federated continual-learning simulator with per-expert gradient-subspace protection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file and emit its artifacts.
    Run {
        /// Path to the key-value config file; an empty file means defaults.
        config: PathBuf,
        /// Output directory for report.json and the CSV artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also export each task's samples as CSV pairs.
        #[arg(long)]
        export_tasks: bool,
    },
    /// Run the oracle verification suite and emit a pass/fail table.
    Verify {
        /// Optional config file (only the seed is used).
        config: Option<PathBuf>,
        /// Where to write the verification table.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Measure the interference landscape and per-layer budget only.
    Diagnose {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one experiment per value of a swept parameter.
    Sweep {
        config: PathBuf,
        /// One of: beta, n_clients, s_0, k_bar, opposition.
        #[arg(long)]
        axis: String,
        /// Comma-separated values of the swept parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Number of seeds per value (base seed, base + 1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn dispatch() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            export_tasks,
        } => {
            let cfg = ExperimentConfig::parse_file(&config)?;
            let report = experiment::run_experiment(&cfg)?;
            experiment::write_outputs(&report, &out)?;
            if export_tasks {
                let sequence = tasks::generate_sequence(
                    cfg.n_tasks,
                    cfg.d,
                    cfg.classes,
                    cfg.samples_per_task,
                    cfg.opposition,
                    cfg.seed,
                )?;
                for (spec, batch) in &sequence {
                    tasks::write_batch_csv(batch, &out, spec.task_id)?;
                }
            }
            for warning in &report.gamma_warnings {
                eprintln!("warning: {warning}");
            }
            println!(
                "method={} seed={} AA={:.4} BWT={} FWT={} (outputs in {})",
                cfg.method.as_str(),
                cfg.seed,
                report.metrics.aa,
                report
                    .metrics
                    .bwt
                    .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
                report
                    .metrics
                    .fwt
                    .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { config, out } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::parse_file(&path)?,
                None => ExperimentConfig::default(),
            };
            let outcomes = verify::run_all(cfg.seed);
            std::fs::create_dir_all(&out)?;
            verify::write_csv(&out.join("verification.csv"), &outcomes)?;
            println!("{:<28} {:<6} detail", "check", "status");
            for o in &outcomes {
                println!(
                    "{:<28} {:<6} {}",
                    o.name,
                    if o.passed { "pass" } else { "FAIL" },
                    o.detail
                );
            }
            if verify::all_passed(&outcomes) {
                println!("all {} checks passed", outcomes.len());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Diagnose { config, out } => {
            let cfg = ExperimentConfig::parse_file(&config)?;
            let (landscape, allocation) = experiment::diagnose(&cfg)?;
            std::fs::create_dir_all(&out)?;
            prism_core::scheduler::write_gamma_csv(
                &out.join("gamma.csv"),
                &cfg.adapted_layers,
                &landscape,
                &allocation,
            )?;
            for warning in &landscape.warnings {
                eprintln!("warning: {warning}");
            }
            for (pos, &layer) in cfg.adapted_layers.iter().enumerate() {
                println!(
                    "layer {layer}: gamma = {:.4}, k_l = {}",
                    landscape.gamma[pos], allocation.k_l[pos]
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => {
            let cfg = ExperimentConfig::parse_file(&config)?;
            let rows = experiment::sweep(&cfg, &axis, &values, seeds, Some(&out))?;
            for row in &rows {
                println!(
                    "{}={} seed={} AA={:.4} BWT={} FWT={}",
                    row.axis,
                    row.value,
                    row.seed,
                    row.aa,
                    row.bwt
                        .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
                    row.fwt
                        .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
