//! JSON checkpoints of a training run: student and teacher parameters, both
//! memory banks and the configuration that produced them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::np::{MemoryBank, NpDims, NpModel};
use crate::ssl::{BankId, Trainer, TrainConfig};

pub const FORMAT: &str = "npmatch-checkpoint";
pub const VERSION: u32 = 1;

/// One parameter tensor; `data` is column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
    pub dims: NpDims,
    pub student: Vec<Tensor>,
    pub teacher: Vec<Tensor>,
    pub labeled_bank: MemoryBank,
    pub pseudo_bank: MemoryBank,
    /// Teacher test accuracy at the time the checkpoint was taken.
    pub test_accuracy: Option<f64>,
}

pub fn tensors<P: ParamSet>(params: &P) -> Vec<Tensor> {
    params
        .tensor_names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| Tensor {
            name,
            rows: t.nrows(),
            cols: t.ncols(),
            data: t.as_slice().to_vec(),
        })
        .collect()
}

/// Rebuilds a model of shape `dims` from named tensors. Every tensor must be
/// present exactly once with the expected shape and finite entries.
pub fn model_from_tensors(dims: NpDims, tensors: &[Tensor]) -> Result<NpModel> {
    let mut model = NpModel::zeros(dims);
    let names = model.tensor_names();
    if tensors.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let t = tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if (t.rows, t.cols) != slot.shape() || t.data.len() != t.rows * t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {}x{} with {} values, expected {:?}",
                t.rows,
                t.cols,
                t.data.len(),
                slot.shape()
            )));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite values")));
        }
        *slot = DMatrix::from_column_slice(t.rows, t.cols, &t.data);
    }
    Ok(model)
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer<'_>, test_accuracy: Option<f64>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            iteration: trainer.iteration(),
            config: trainer.config().clone(),
            dims: trainer.student().dims(),
            student: tensors(trainer.student()),
            teacher: tensors(trainer.teacher()),
            labeled_bank: trainer.bank(BankId::Labeled).clone(),
            pseudo_bank: trainer.bank(BankId::Pseudo).clone(),
            test_accuracy,
        }
    }

    pub fn student(&self) -> Result<NpModel> {
        model_from_tensors(self.dims, &self.student)
    }

    pub fn teacher(&self) -> Result<NpModel> {
        model_from_tensors(self.dims, &self.teacher)
    }

    pub fn banks(&self) -> [&MemoryBank; 2] {
        [&self.labeled_bank, &self.pseudo_bank]
    }

    /// Checks the header, tensor shapes and bank widths.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.student()?;
        self.teacher()?;
        for bank in self.banks() {
            if bank.feature_dim() != self.dims.feature_dim || bank.num_classes() != self.dims.num_classes {
                return Err(Error::Checkpoint("memory bank width does not match the model".into()));
            }
            if bank.len() > bank.capacity() {
                return Err(Error::Checkpoint("memory bank exceeds its capacity".into()));
            }
        }
        self.config.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
