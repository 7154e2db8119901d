//! `npmatch train`: runs the semi-supervised trainer and writes
//! `metrics.csv`, `report.json` and `checkpoint.json`.

use std::fs;
use std::path::PathBuf;

use npmatch::checkpoint::Checkpoint;
use npmatch::np::BankRecord;
use npmatch::ssl::{train, BankId, IterationMetrics, TrainObserver};
use serde::{Deserialize, Serialize};

use crate::{Result, RunConfigFile};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub iterations: u64,
    pub split: SplitSummary,
    pub test_accuracy: f64,
    pub mean_confidence: f64,
    pub mean_uncertainty: f64,
    /// Pseudo-labels admitted over the whole run.
    pub pseudo_labels: u64,
    pub final_metrics: Option<IterationMetrics>,
    pub config: RunConfigFile,
}

/// Prints each logged metrics row to stderr and counts pseudo-labels.
#[derive(Debug, Default)]
pub struct Progress {
    pub quiet: bool,
    pub pseudo_labels: u64,
}

impl TrainObserver for Progress {
    fn on_bank_push(&mut self, bank: BankId, records: &[BankRecord], _evicted: usize) {
        if bank == BankId::Pseudo {
            self.pseudo_labels += records.len() as u64;
        }
    }

    fn on_metrics(&mut self, m: &IterationMetrics) {
        if !self.quiet {
            eprintln!(
                "iter {:>6}  lr {:.5}  loss {:.4}  selected {:>4}  test acc {:.4}",
                m.iteration, m.lr, m.loss.total, m.selected, m.test_accuracy
            );
        }
    }
}

/// Trains with `cfg` and writes the three artifacts into `cfg.out_dir`.
/// Nothing is written unless training succeeds.
pub fn run(cfg: &RunConfigFile, quiet: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let data = cfg.data_config().generate(cfg.seed)?;
    let mut progress = Progress {
        quiet,
        pseudo_labels: 0,
    };
    let outcome = train(cfg.train_config(), &data, &mut progress)?;

    let mut metrics = Vec::new();
    IterationMetrics::write_csv(outcome.history(), &mut metrics)?;
    let report = TrainReport {
        seed: cfg.seed,
        iterations: outcome.trainer.iteration(),
        split: SplitSummary {
            labeled: data.labeled().len(),
            unlabeled: data.unlabeled().len(),
            test: data.test().len(),
            num_classes: data.data.num_classes,
        },
        test_accuracy: outcome.eval.accuracy,
        mean_confidence: outcome.eval.mean_confidence,
        mean_uncertainty: outcome.eval.mean_uncertainty,
        pseudo_labels: progress.pseudo_labels,
        final_metrics: outcome.history().last().cloned(),
        config: cfg.clone(),
    };
    let checkpoint = Checkpoint::from_trainer(&outcome.trainer, Some(outcome.eval.accuracy));

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), metrics)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(report)
}

pub fn artifact_paths(cfg: &RunConfigFile) -> [PathBuf; 3] {
    [METRICS_FILE, REPORT_FILE, CHECKPOINT_FILE].map(|f| cfg.out_dir.join(f))
}
