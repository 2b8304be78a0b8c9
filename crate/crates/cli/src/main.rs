//! `smoefed`: run federated SMoE+LoRA experiments, count FLOPs, export heatmaps
//! and merge run reports.
//!
//! Settings resolve in this order, highest first: command-line flags, the
//! config file, built-in defaults.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use smoe_fed::exec::Execution;
use smoe_fed::experiment::{export_heatmap, merge_reports, read_metrics, run_experiment, ExperimentConfig, RunOptions};
use smoe_fed::flops::{compare_budgets, ArchSpec};
use smoe_fed::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "smoefed", version, about = "Resource-adaptive federated fine-tuning simulator for SMoE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config (every sweep grid point).
    Run {
        config: PathBuf,
        /// Output root; runs land in `<out>/<experiment.name>[/<grid label>]`.
        #[arg(long, env = "SMOEFED_OUT", default_value = "runs")]
        out: PathBuf,
        /// Continue from the newest checkpoint of each run.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed rounds.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Worker threads for client training.
        #[arg(long)]
        jobs: Option<usize>,
        /// Override `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `experiment.rounds`.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override `training.lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Train clients one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// FLOPs and parameter table for an architecture spec.
    Flops {
        archspec: PathBuf,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Client × expert activation frequencies of one round, as CSV.
    Heatmap {
        run: PathBuf,
        #[arg(long)]
        round: usize,
        /// Write to a file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Merge the final-round metrics of several runs into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            resume,
            stop_after,
            jobs,
            seed,
            rounds,
            lr,
            sequential,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.experiment.seed = seed;
            }
            if let Some(rounds) = rounds {
                cfg.experiment.rounds = rounds;
            }
            if let Some(lr) = lr {
                cfg.training.lr = lr;
            }
            if sequential {
                cfg.experiment.execution = Execution::Sequential;
            }
            cfg.validate()?;
            info!("running {} into {}", config.display(), out.display());
            let artifacts = run_experiment(
                &cfg,
                &out,
                &RunOptions {
                    resume,
                    stop_after,
                    jobs,
                },
            )?;
            let mut text = String::new();
            for run in &artifacts.runs {
                text.push_str(&format!(
                    "{}: {} rounds, {} diverged client updates\n",
                    run.dir.display(),
                    run.final_round,
                    run.diverged_clients
                ));
                for row in read_metrics(&run.metrics_csv)?.iter().filter(|r| r.round == run.final_round) {
                    let score = row
                        .val_accuracy
                        .map_or(format!("val_loss {:.4}", row.val_loss), |a| {
                            format!("val_loss {:.4}  val_acc {a:.4}", row.val_loss)
                        });
                    text.push_str(&format!("  {} (k={}, r={}): {score}\n", row.budget, row.k, row.rank));
                }
            }
            write_stdout(&text)
        }
        Command::Flops { archspec, csv } => {
            let spec = ArchSpec::load(&archspec)?;
            let table = compare_budgets(&spec.budget_specs()?)?;
            if csv {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                write_stdout(&String::from_utf8_lossy(&buf))
            } else {
                write_stdout(&format!("{} (seq_len {}, batch {})\n{}", spec.name, spec.seq_len, spec.batch, table.to_text()))
            }
        }
        Command::Heatmap { run, round, output } => {
            let csv = export_heatmap(&run, round)?;
            match output {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e }),
                None => write_stdout(&csv),
            }
        }
        Command::Report { runs, csv } => {
            let table = merge_reports(&runs)?;
            if csv {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                write_stdout(&String::from_utf8_lossy(&buf))
            } else {
                write_stdout(&table.to_text())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
