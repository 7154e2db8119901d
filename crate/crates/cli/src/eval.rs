//! `npmatch eval`: reloads a checkpoint and scores its teacher on the test
//! split regenerated from a run configuration.

use std::path::Path;

use npmatch::checkpoint::Checkpoint;
use npmatch::ssl::evaluate;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result, RunConfigFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub iteration: u64,
    pub test_points: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub mean_uncertainty: f64,
    /// Accuracy stored in the checkpoint when it was written.
    pub recorded_accuracy: Option<f64>,
}

/// The dataset comes from `cfg` (kind, size, split settings and seed); the
/// evaluation itself uses the configuration stored in the checkpoint.
pub fn run(checkpoint: &Path, cfg: &RunConfigFile) -> Result<EvalOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = cfg.data_config().generate(cfg.seed)?;
    if data.data.dim() != ck.dims.input_dim || data.data.num_classes != ck.dims.num_classes {
        return Err(CliError::Mismatch(format!(
            "dataset has {} inputs and {} classes, checkpoint expects {} and {}",
            data.data.dim(),
            data.data.num_classes,
            ck.dims.input_dim,
            ck.dims.num_classes
        )));
    }
    let teacher = ck.teacher()?;
    let report = evaluate(&teacher, &data, &ck.banks(), &ck.config)?;
    Ok(EvalOutput {
        iteration: ck.iteration,
        test_points: data.test().len(),
        accuracy: report.accuracy,
        mean_confidence: report.mean_confidence,
        mean_uncertainty: report.mean_uncertainty,
        recorded_accuracy: ck.test_accuracy,
    })
}
