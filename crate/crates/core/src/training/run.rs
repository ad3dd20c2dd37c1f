use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::data::{synthesize_dataset, Split};
use super::model::to_checkpoint;
use super::step::{StepMetrics, Trainer, METRICS_HEADER};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_report, ProbeReport};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";

/// What a finished run left behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<StepMetrics>,
    pub report: ProbeReport,
    pub trainer: Trainer,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
}

/// Seeded end-to-end run: metrics CSV (one row per step), final checkpoint
/// and probe report, all under `out_dir`.
pub fn run_training(cfg: &TrainConfig, out_dir: &Path, progress: &mut dyn FnMut(&StepMetrics)) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = synthesize_dataset(&cfg.dataset, Split::Train)?;
    let test = synthesize_dataset(&cfg.dataset, Split::Test)?;
    let mut trainer = Trainer::new(cfg)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(csv, "{METRICS_HEADER}").map_err(io)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.train_step(&train)?;
        writeln!(csv, "{}", m.csv_row()).map_err(io)?;
        progress(&m);
        metrics.push(m);
    }
    csv.flush().map_err(io)?;
    drop(csv);

    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    to_checkpoint(&trainer.model, &trainer.queue, cfg, trainer.step).save(&checkpoint_path)?;
    let report = evaluate(&trainer.model, &trainer.queue, cfg, &train, &test)?;
    let report_path = out_dir.join(REPORT_FILE);
    write_report(&report, &report_path)?;
    Ok(RunOutcome {
        metrics,
        report,
        trainer,
        metrics_path,
        checkpoint_path,
        report_path,
    })
}
