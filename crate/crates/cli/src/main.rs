//! Experiment driver for spikecvx.
//!
//! Every subcommand takes `--config <file.toml>`; runs land in
//! content-addressed directories under the config's output dir, so
//! repeating a command with the same config is a no-op that reuses the
//! finished artifacts.
//!
//! Exit codes: 0 ok, 2 config error, 3 certification failure.

use clap::{Args, Parser, Subcommand};
use spikecvx::config::{default_ood_lengths, ExperimentConfig};
use spikecvx::harness::{self, CellParams, RunSummary};
use spikecvx::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "spikecvx",
    version,
    about = "train parallel spiking networks by convex reformulation, with exact optimality certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// experiment config (TOML)
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the dataset cache and report the splits
    GenData(ConfigArg),
    /// Train one variant in its content-addressed run directory
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// override the config's training variant
        #[arg(long, value_parser = ["sg", "cvx", "sg-cvx", "sg-sg", "cvx-sg"])]
        variant: Option<String>,
    },
    /// Reload a persisted solution and recompute its duality gap from scratch
    Certify(ConfigArg),
    /// Evaluate a run on the test split, optionally on longer sequences
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// teacher-forced or autoregressive rollout
        #[arg(long, value_parser = ["tf", "ar"])]
        mode: Option<String>,
        /// digit counts for length generalization, comma separated
        #[arg(long, value_delimiter = ',')]
        ood_lengths: Option<Vec<usize>>,
    },
    /// Run the config's grid and pick the best cell by validation accuracy
    Sweep(ConfigArg),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                Error::CertificationFailure { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let config = ExperimentConfig::load(&c.config)?;
            let (train, val, test) = harness::prepare_splits(&config)?;
            println!("task {}", harness::task_label(&config));
            println!(
                "splits: train {} / val {} / test {}  (T = {}, d_in = {}, d_out = {})",
                train.n_samples(),
                val.n_samples(),
                test.n_samples(),
                train.t_len(),
                train.d_in(),
                train.d_out()
            );
            println!("cache under {}", harness::data_root(&config).display());
        }
        Command::Train { cfg, variant } => {
            let mut config = ExperimentConfig::load(&cfg.config)?;
            if let Some(v) = variant {
                config.variant = v;
                config.validate()?;
            }
            let cell = CellParams::from_config(&config);
            let summary = harness::ensure_run(&config, cell, &config.variant)?;
            print_summary(&summary);
        }
        Command::Certify(c) => {
            let config = ExperimentConfig::load(&c.config)?;
            let outcome = harness::certify_run(&config, CellParams::from_config(&config))?;
            println!("run {}", outcome.run_id);
            println!("stored gap     {:.6e}", outcome.stored_gap);
            println!("recomputed gap {:.6e}", outcome.recomputed_gap);
            println!(
                "difference     {:.3e} (reproduction tolerance {:.0e})",
                outcome.difference,
                harness::GAP_REPRODUCTION_TOL
            );
            if !outcome.passed() {
                return Err(Error::CertificationFailure {
                    gap: outcome.recomputed_gap,
                    tol: outcome.tol,
                });
            }
            println!("certified: gap within tolerance {:.0e}", outcome.tol);
        }
        Command::Eval {
            cfg,
            mode,
            ood_lengths,
        } => {
            let mut config = ExperimentConfig::load(&cfg.config)?;
            if let Some(m) = mode {
                config.eval.mode = m;
                config.validate()?;
            }
            let lengths = match ood_lengths {
                Some(ls) => ls,
                None if !config.eval.ood_lengths.is_empty() => config.eval.ood_lengths.clone(),
                None if config.task.kind == "addition" => default_ood_lengths(config.task.base),
                None => Vec::new(),
            };
            let (summary, rows) = harness::evaluate_run(&config, &lengths)?;
            println!("run {} ({}, mode {})", summary.run_id, summary.variant, config.eval.mode);
            for row in &rows {
                let o = &row.outcome;
                let mut line = format!(
                    "{:<8} token {:.4}  joint {:.4}  seq {:.4}  error-free {:.4}",
                    row.split, o.token_acc, o.joint_token_acc, o.seq_acc, o.error_free_frac
                );
                if let Some(c) = o.carry_acc {
                    line.push_str(&format!("  carry {c:.4}"));
                }
                if let Some(f) = o.first_error_mean {
                    line.push_str(&format!("  first-err t {f:.2}"));
                }
                println!("{line}");
            }
        }
        Command::Sweep(c) => {
            let config = ExperimentConfig::load(&c.config)?;
            let outcome = harness::run_sweep(&config)?;
            if outcome.reused {
                println!("sweep {} reused", outcome.sweep_id);
            }
            println!("variant {}, {} cells", outcome.variant, outcome.cells.len());
            for cell in &outcome.cells {
                println!(
                    "  beta {:<10} lr {:<8} val {:.4}  test {:.4}  run {}",
                    cell.cell.reg_beta,
                    cell.cell.lr,
                    cell.val_token_acc,
                    cell.test_token_acc,
                    cell.run_id
                );
            }
            println!(
                "best: beta {} lr {} (val {:.4}, run {})",
                outcome.best.cell.reg_beta,
                outcome.best.cell.lr,
                outcome.best.val_token_acc,
                outcome.best.run_id
            );
            println!(
                "tables under {}",
                harness::sweep_paths(&config, &outcome.sweep_id).display()
            );
        }
    }
    Ok(())
}

fn print_summary(summary: &RunSummary) {
    println!(
        "run {} ({} on {}){}",
        summary.run_id,
        summary.variant,
        summary.task,
        if summary.reused { " reused" } else { "" }
    );
    if let (Some(p), Some(d), Some(g)) = (summary.primal, summary.dual, summary.gap) {
        println!("primal {p:.6e}  dual {d:.6e}  gap {g:.3e}");
    }
    if let (Some(s), Some(n)) = (summary.support, summary.n_columns) {
        println!("support {s} of {n} dictionary columns");
    }
    if let (Some(tr), Some(va)) = (summary.final_train_loss, summary.final_val_loss) {
        println!("final losses: train {tr:.6}  val {va:.6}");
    }
    println!(
        "val token acc {:.4}  test token acc {:.4}  ({:.2}s)",
        summary.val.token_acc, summary.test.token_acc, summary.wall_seconds
    );
}
