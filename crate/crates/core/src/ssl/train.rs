use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LabeledBatch, LossInputs, LossTerms, PseudoLabeled};
use super::{select_pseudo_labels, skew_from_uncertainty, PseudoLabelBatch, TrainConfig};
use crate::data::{augment, select_rows, SplitDataset, Strength};
use crate::error::{Error, Result};
use crate::gaussian::SkewParameter;
use crate::nn::{EmaShadow, OptimizerState, ParamSet};
use crate::np::{BankRecord, Context, MemoryBank, NpModel};
use crate::rng::{derive_seed, rng_for};

const TAG_INIT: u64 = 100;
const TAG_BANK: u64 = 101;
const TAG_STEP: u64 = 102;
const TAG_EVAL: u64 = 103;

pub const METRICS_HEADER: [&str; 12] = [
    "iteration",
    "lr",
    "loss_total",
    "loss_recon",
    "loss_kl",
    "loss_unlabeled",
    "loss_js",
    "alpha_u",
    "selected",
    "selection_rate",
    "mean_uncertainty",
    "test_accuracy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankId {
    /// Teacher features of labeled samples with their labels.
    Labeled,
    /// Teacher features of pseudo-labeled samples with their pseudo-labels.
    Pseudo,
}

/// Hooks called by the training loop.
pub trait TrainObserver {
    fn on_bank_push(&mut self, _bank: BankId, _records: &[BankRecord], _evicted: usize) {}
    fn on_metrics(&mut self, _metrics: &IterationMetrics) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    /// Number of completed optimizer steps.
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossTerms,
    /// Skew of the JS term; absent when no unlabeled batch is drawn.
    pub alpha_u: Option<f64>,
    pub selected: usize,
    pub selection_rate: f64,
    pub mean_uncertainty: Option<f64>,
    pub test_accuracy: f64,
}

impl IterationMetrics {
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.iteration.to_string(),
            self.lr.to_string(),
            self.loss.total.to_string(),
            self.loss.recon.to_string(),
            self.loss.kl.to_string(),
            self.loss.unlabeled.to_string(),
            self.loss.js.to_string(),
            opt(self.alpha_u),
            self.selected.to_string(),
            self.selection_rate.to_string(),
            opt(self.mean_uncertainty),
            self.test_accuracy.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(rows: &[IterationMetrics], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        for r in rows {
            w.write_record(r.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub mean_uncertainty: f64,
    pub samples: usize,
}

/// Accuracy of `model` on the test split, using the clean labeled points
/// and the banks as context.
pub fn evaluate(
    model: &NpModel,
    data: &SplitDataset,
    banks: &[&MemoryBank],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let test = data.test();
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let labeled = data.labeled();
    let ctx = Context::with_banks(
        model.encode(&data.data.rows(labeled))?,
        model.one_hot(&data.data.labels_at(labeled))?,
        banks,
    )?;
    let points = data.data.rows(test);
    let keys: Vec<u64> = points.row_iter().map(|r| point_key(r.iter())).collect();
    let seed = derive_seed(cfg.seed, &[TAG_EVAL]);
    let preds = model.predict(&points, &keys, &ctx, cfg.samples, seed, cfg.uncertainty)?;
    let n = test.len() as f64;
    let correct = preds
        .iter()
        .zip(test)
        .filter(|(p, &i)| p.label() == data.data.labels[i])
        .count();
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_confidence: preds.iter().map(|p| p.confidence).sum::<f64>() / n,
        mean_uncertainty: preds.iter().map(|p| p.uncertainty).sum::<f64>() / n,
        samples: test.len(),
    })
}

/// Noise key derived from a point's coordinates, so a test point's
/// prediction does not depend on where it sits in the dataset.
fn point_key<'a>(coords: impl Iterator<Item = &'a f64>) -> u64 {
    let bits: Vec<u64> = coords.map(|v| v.to_bits()).collect();
    derive_seed(0, &bits)
}

/// Training state: student, EMA teacher, optimizer and the two banks.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d SplitDataset,
    student: NpModel,
    teacher: EmaShadow<NpModel>,
    opt: OptimizerState<NpModel>,
    banks: [MemoryBank; 2],
    history: Vec<IterationMetrics>,
}

/// Per-step draws from the unlabeled split.
struct UnlabeledStep {
    weak: DMatrix<f64>,
    strong: DMatrix<f64>,
    selection: PseudoLabelBatch,
    mean_uncertainty: f64,
    alpha_u: SkewParameter,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d SplitDataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.uses_unlabeled() && data.unlabeled().is_empty() {
            return Err(Error::Empty("unlabeled split"));
        }
        let dims = cfg.dims(data.data.dim(), data.data.num_classes);
        let student = NpModel::new(dims, derive_seed(cfg.seed, &[TAG_INIT]))?;
        let teacher = EmaShadow::new(&student, cfg.ema_momentum);
        let opt = OptimizerState::new(&student, cfg.sgd());
        let bank = |k| {
            MemoryBank::init(
                cfg.bank_capacity,
                dims.feature_dim,
                dims.num_classes,
                derive_seed(cfg.seed, &[TAG_BANK, k]),
            )
        };
        let banks = [bank(0)?, bank(1)?];
        Ok(Trainer {
            cfg,
            data,
            student,
            teacher,
            opt,
            banks,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn student(&self) -> &NpModel {
        &self.student
    }

    pub fn teacher(&self) -> &NpModel {
        self.teacher.shadow()
    }

    pub fn bank(&self, id: BankId) -> &MemoryBank {
        match id {
            BankId::Labeled => &self.banks[0],
            BankId::Pseudo => &self.banks[1],
        }
    }

    pub fn banks(&self) -> [&MemoryBank; 2] {
        [&self.banks[0], &self.banks[1]]
    }

    pub fn iteration(&self) -> u64 {
        self.opt.iteration()
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.cfg.t_max
    }

    pub fn history(&self) -> &[IterationMetrics] {
        &self.history
    }

    /// Evaluates the EMA teacher on the test split.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(self.teacher(), self.data, &self.banks(), &self.cfg)
    }

    fn unlabeled_step(&self, x_l: &DMatrix<f64>, y_l: &[usize], seed: u64, r: &mut crate::rng::Rng) -> Result<UnlabeledStep> {
        let cfg = &self.cfg;
        let pool = self.data.unlabeled();
        let nu = cfg.unlabeled_batch_size();
        let idx: Vec<usize> = (0..nu).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let keys: Vec<u64> = (0..nu as u64).collect();
        let raw = self.data.data.rows(&idx);
        let weak = augment(&raw, &keys, Strength::Weak, &cfg.augment, derive_seed(seed, &[2]))?;
        let strong = augment(&raw, &keys, Strength::Strong, &cfg.augment, derive_seed(seed, &[3]))?;

        let teacher = self.teacher();
        let ctx = Context::with_banks(teacher.encode(x_l)?, teacher.one_hot(y_l)?, &self.banks())?;
        let preds = teacher.predict(&weak, &keys, &ctx, cfg.samples, derive_seed(seed, &[4]), cfg.uncertainty)?;
        let mean_uncertainty = preds.iter().map(|p| p.uncertainty).sum::<f64>() / nu as f64;
        let alpha_u = skew_from_uncertainty(mean_uncertainty, cfg.uncertainty, self.data.data.num_classes)?;
        let selection = if cfg.uses_pseudo_labels() {
            select_pseudo_labels(&preds, cfg.tau_c, cfg.tau_u)
        } else {
            PseudoLabelBatch::default()
        };
        Ok(UnlabeledStep {
            weak,
            strong,
            selection,
            mean_uncertainty,
            alpha_u,
        })
    }

    /// One iteration: draw batches, pseudo-label with the teacher, take an
    /// SGD step on the student, update the teacher, push to the banks.
    /// Returns metrics on logging iterations.
    pub fn step(&mut self, obs: &mut dyn TrainObserver) -> Result<Option<IterationMetrics>> {
        let t = self.iteration();
        if self.is_done() {
            return Err(Error::ScheduleExhausted { t, t_max: self.cfg.t_max });
        }
        let cfg = self.cfg.clone();
        let seed = derive_seed(cfg.seed, &[TAG_STEP, t]);
        let mut r = rng_for(seed, &[0]);

        let b = cfg.batch_size;
        let pool = self.data.labeled();
        let idx: Vec<usize> = (0..b).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let (context, target) = perm.split_at(b / 2);
        let keys: Vec<u64> = (0..b as u64).collect();
        let x_l = augment(&self.data.data.rows(&idx), &keys, Strength::Weak, &cfg.augment, derive_seed(seed, &[1]))?;
        let y_l = self.data.data.labels_at(&idx);

        let unl = if cfg.uses_unlabeled() {
            Some(self.unlabeled_step(&x_l, &y_l, seed, &mut r)?)
        } else {
            None
        };
        let pseudo = unl.as_ref().map(|u| PseudoLabeled {
            x: select_rows(&u.strong, &u.selection.indices),
            labels: u.selection.labels.clone(),
            keys: u.selection.indices.iter().map(|&i| i as u64).collect(),
            batch_size: cfg.unlabeled_batch_size(),
        });
        let batch = LabeledBatch {
            x: x_l,
            labels: y_l,
            context: context.to_vec(),
            target: target.to_vec(),
        };
        let banks = self.banks();
        let inputs = LossInputs {
            labeled: &batch,
            pseudo: pseudo.as_ref(),
            banks: &banks,
            alpha_u: unl.as_ref().map_or(SkewParameter::half(), |u| u.alpha_u),
            supervised_scale: 1.0,
            samples: cfg.samples,
            lambda_u: cfg.lambda_u,
            beta: cfg.beta,
            noise_seed: derive_seed(seed, &[5]),
        };
        let (terms, mut grads) = total_loss(&self.student, &inputs)?;
        if !terms.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                iteration: t,
                details: format!(
                    "loss terms {terms:?}; selected {}; alpha_u {:?}",
                    unl.as_ref().map_or(0, |u| u.selection.len()),
                    unl.as_ref().map(|u| u.alpha_u.value()),
                ),
            });
        }
        if cfg.grad_clip > 0.0 {
            clip_norm(&mut grads, cfg.grad_clip);
        }
        let lr = self.opt.step(&mut self.student, &grads)?;
        self.teacher.update(&self.student)?;

        let teacher = self.teacher.shadow();
        let labeled = records(&teacher.encode(&batch.x)?, &teacher.one_hot(&batch.labels)?);
        let evicted = self.banks[0].push(labeled.clone())?;
        obs.on_bank_push(BankId::Labeled, &labeled, evicted);
        if let Some(u) = unl.as_ref().filter(|u| !u.selection.is_empty()) {
            let teacher = self.teacher.shadow();
            let feats = teacher.encode(&select_rows(&u.weak, &u.selection.indices))?;
            let pseudo = records(&feats, &teacher.one_hot(&u.selection.labels)?);
            let evicted = self.banks[1].push(pseudo.clone())?;
            obs.on_bank_push(BankId::Pseudo, &pseudo, evicted);
        }

        let done = t + 1;
        if !done.is_multiple_of(cfg.log_every) && done != cfg.t_max {
            return Ok(None);
        }
        let selected = unl.as_ref().map_or(0, |u| u.selection.len());
        let metrics = IterationMetrics {
            iteration: done,
            lr,
            loss: terms,
            alpha_u: unl.as_ref().map(|u| u.alpha_u.value()),
            selected,
            selection_rate: if unl.is_some() {
                selected as f64 / cfg.unlabeled_batch_size() as f64
            } else {
                0.0
            },
            mean_uncertainty: unl.as_ref().map(|u| u.mean_uncertainty),
            test_accuracy: self.evaluate()?.accuracy,
        };
        obs.on_metrics(&metrics);
        self.history.push(metrics.clone());
        Ok(Some(metrics))
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .map(|t| t.norm_squared())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            *t *= s;
        }
    }
    norm
}

fn records(features: &DMatrix<f64>, probs: &DMatrix<f64>) -> Vec<BankRecord> {
    (0..features.nrows())
        .map(|i| BankRecord {
            feature: features.row(i).iter().copied().collect(),
            probs: probs.row(i).iter().copied().collect(),
        })
        .collect()
}

pub struct TrainOutcome<'d> {
    pub trainer: Trainer<'d>,
    pub eval: EvalReport,
}

impl TrainOutcome<'_> {
    pub fn history(&self) -> &[IterationMetrics] {
        self.trainer.history()
    }
}

/// Runs `cfg.t_max` iterations and evaluates the final teacher.
pub fn train<'d>(cfg: TrainConfig, data: &'d SplitDataset, obs: &mut dyn TrainObserver) -> Result<TrainOutcome<'d>> {
    let mut trainer = Trainer::new(cfg, data)?;
    while !trainer.is_done() {
        trainer.step(obs)?;
    }
    let eval = trainer.evaluate()?;
    Ok(TrainOutcome { trainer, eval })
}
