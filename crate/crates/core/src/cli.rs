//! Command-line front end. Exit codes: 0 success, 1 contract, config or I/O
//! error, 2 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};

use crate::diagnostics::{run_suite, TOLERANCE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, export_checkpoint};
use crate::training::{run_training, DatasetSpec, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tricontrast", version, about = "Self-supervised training with neighbour, centroid and redundancy objectives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config; writes metrics.csv, checkpoint.bin and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "tricontrast-run")]
        out: PathBuf,
        /// Print a progress line every this many steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Probe a checkpoint and write report.json next to it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON dataset spec; defaults to the checkpoint's training dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// One of: neighbour, centroid, redundancy, total, attention, encoder, batchnorm, train_step.
        #[arg(long)]
        module: Option<String>,
    },
    /// Write projector embeddings of the training set as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.len() <= 1 {
        eprintln!("{}", Cli::command().render_help());
        return 1;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out, log_every } => {
            let cfg = TrainConfig::load(&config)?;
            let start = Instant::now();
            let outcome = run_training(&cfg, &out, &mut |m| {
                if log_every > 0 && (m.step + 1) % log_every == 0 {
                    eprintln!(
                        "step {:>6}  loss {:.5}  queue {:>5}  nn-top1 {}  std {:.4}",
                        m.step + 1,
                        m.l_total,
                        m.queue_fill,
                        m.nn_retrieval_top1.map_or("-".into(), |v| format!("{v:.3}")),
                        m.embedding_std
                    );
                }
            })?;
            eprintln!(
                "trained {} steps in {:.1}s; wrote {}, {}, {}",
                cfg.steps,
                start.elapsed().as_secs_f64(),
                outcome.metrics_path.display(),
                outcome.checkpoint_path.display(),
                outcome.report_path.display()
            );
            println!("{}", serde_json::to_string_pretty(&outcome.report).expect("report serializes"));
            Ok(0)
        }
        Command::Eval { checkpoint, dataset } => {
            let spec = dataset.as_deref().map(DatasetSpec::load).transpose()?;
            let (report, path) = evaluate_checkpoint(&checkpoint, spec.as_ref())?;
            eprintln!("wrote {}", path.display());
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(0)
        }
        Command::Gradcheck { module } => {
            let start = Instant::now();
            let results = run_suite(module.as_deref())?;
            let mut all = true;
            for r in &results {
                println!(
                    "{:<24} max_rel_error {:.3e}  {}",
                    r.name,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
                all &= r.passed;
            }
            eprintln!("tolerance {TOLERANCE:e}, {:.1}s", start.elapsed().as_secs_f64());
            Ok(if all { 0 } else { 2 })
        }
        Command::Export { checkpoint, out } => {
            let rows = export_checkpoint(&checkpoint, &out)?;
            eprintln!("wrote {rows} rows to {}", out.display());
            Ok(0)
        }
    }
}
