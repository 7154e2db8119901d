//! Semi-supervised training of the NP predictor: pseudo-label gating on
//! confidence and uncertainty, the ELBO-based supervised loss, the unlabeled
//! cross-entropy, the skew-geometric JS regularizer, and the training loop.

mod loss;
mod train;

pub use loss::{elbo_loss, elbo_objective, total_loss, ElboTerms, LabeledBatch, LossInputs, LossTerms, PseudoLabeled};
pub use train::{
    evaluate, train, BankId, EvalReport, IterationMetrics, TrainObserver, TrainOutcome, Trainer,
    METRICS_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::gaussian::SkewParameter;
use crate::nn::SgdConfig;
use crate::np::{NpDims, NpPrediction, UncertaintyKind};

/// Bounds of the skew parameter derived from batch uncertainty.
pub const SKEW_FLOOR: f64 = 0.01;
pub const SKEW_CEILING: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Confidence threshold: a pseudo-label needs `confidence >= tau_c`.
    pub tau_c: f64,
    /// Uncertainty threshold: a pseudo-label needs `uncertainty < tau_u`.
    /// Compared against raw (unnormalized) entropy or variance.
    pub tau_u: f64,
    pub lambda_u: f64,
    pub beta: f64,
    /// Latent samples per target.
    pub samples: usize,
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled batch size is `mu_ratio * batch_size`.
    pub mu_ratio: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: u64,
    pub ema_momentum: f64,
    /// Gradients with a global L2 norm above this are rescaled to it;
    /// zero disables clipping.
    pub grad_clip: f64,
    pub bank_capacity: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub uncertainty: UncertaintyKind,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Metrics are recorded every `log_every` iterations and after the last.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau_c: 0.95,
            tau_u: 0.4,
            lambda_u: 1.0,
            beta: 0.01,
            samples: 10,
            batch_size: 16,
            mu_ratio: 7,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_max: 5000,
            ema_momentum: 0.999,
            grad_clip: 5.0,
            bank_capacity: 256,
            feature_dim: 32,
            latent_dim: 32,
            hidden: 32,
            uncertainty: UncertaintyKind::Entropy,
            augment: AugmentConfig::default(),
            seed: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, reason))
            }
        };
        check(self.tau_c > 0.0 && self.tau_c <= 1.0, "tau_c", "must lie in (0, 1]")?;
        check(self.tau_u > 0.0 && !self.tau_u.is_nan(), "tau_u", "must be positive")?;
        check(self.lambda_u >= 0.0 && self.lambda_u.is_finite(), "lambda_u", "must be non-negative")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be non-negative")?;
        check(self.samples >= 1, "samples", "must be at least 1")?;
        check(
            self.uncertainty != UncertaintyKind::Variance || self.samples >= 2,
            "samples",
            "variance uncertainty needs at least 2 samples",
        )?;
        check(self.batch_size >= 2, "batch_size", "must be at least 2")?;
        check(self.mu_ratio >= 1, "mu_ratio", "must be at least 1")?;
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be non-negative",
        )?;
        check(self.t_max >= 1, "t_max", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.ema_momentum), "ema_momentum", "must lie in [0, 1]")?;
        check(self.grad_clip >= 0.0 && self.grad_clip.is_finite(), "grad_clip", "must be non-negative")?;
        check(self.bank_capacity >= 1, "bank_capacity", "must be at least 1")?;
        check(self.feature_dim >= 1, "feature_dim", "must be at least 1")?;
        check(self.latent_dim >= 1, "latent_dim", "must be at least 1")?;
        check(self.hidden >= 1, "hidden", "must be at least 1")?;
        check(self.log_every >= 1, "log_every", "must be at least 1")?;
        self.augment.validate()
    }

    pub fn dims(&self, input_dim: usize, num_classes: usize) -> NpDims {
        NpDims {
            input_dim,
            feature_dim: self.feature_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            num_classes,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            t_max: self.t_max,
        }
    }

    pub fn unlabeled_batch_size(&self) -> usize {
        self.mu_ratio * self.batch_size
    }

    /// The pseudo-labeling path only runs when its loss has weight.
    pub fn uses_pseudo_labels(&self) -> bool {
        self.lambda_u > 0.0
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.lambda_u > 0.0 || self.beta > 0.0
    }
}

/// Unlabeled samples admitted as pseudo-labeled training targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    /// Positions in the prediction list.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps the predictions with `confidence >= tau_c` and
/// `uncertainty < tau_u`, labeled by the arg-max of their mean probabilities.
pub fn select_pseudo_labels(preds: &[NpPrediction], tau_c: f64, tau_u: f64) -> PseudoLabelBatch {
    let mut out = PseudoLabelBatch::default();
    for (i, p) in preds.iter().enumerate() {
        if p.confidence >= tau_c && p.uncertainty < tau_u {
            out.indices.push(i);
            out.labels.push(p.label());
            out.confidence.push(p.confidence);
            out.uncertainty.push(p.uncertainty);
        }
    }
    out
}

/// Maps a batch's mean uncertainty to the JS skew: the uncertainty is
/// normalized by the measure's ceiling (`ln C` for entropy, 0.25 for
/// variance) and clamped to `[0.01, 0.99]`.
pub fn skew_from_uncertainty(u: f64, kind: UncertaintyKind, num_classes: usize) -> Result<SkewParameter> {
    if !(u >= 0.0 && u.is_finite()) {
        return Err(Error::InvalidParameter(format!("uncertainty must be non-negative, got {u}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidParameter("skew needs at least two classes".into()));
    }
    SkewParameter::new((u / kind.ceiling(num_classes)).clamp(SKEW_FLOOR, SKEW_CEILING))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn pred(confidence: f64, uncertainty: f64) -> NpPrediction {
        NpPrediction {
            probs: DMatrix::from_row_slice(1, 2, &[1.0 - confidence, confidence]),
            mean_probs: vec![1.0 - confidence, confidence],
            uncertainty,
            confidence,
        }
    }

    #[test]
    fn gates() {
        let c = TrainConfig::default();
        let preds = [pred(0.97, 0.2), pred(0.90, 0.2), pred(0.97, 0.6), pred(0.95, 0.4)];
        let sel = select_pseudo_labels(&preds, c.tau_c, c.tau_u);
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.labels, vec![1]);
        assert!(select_pseudo_labels(&[], 0.5, 0.5).is_empty());
    }

    #[test]
    fn skew_mapping() {
        let ln2 = 2f64.ln();
        let e = UncertaintyKind::Entropy;
        assert_eq!(skew_from_uncertainty(0.0, e, 2).unwrap().value(), 0.01);
        assert_eq!(skew_from_uncertainty(ln2, e, 2).unwrap().value(), 0.99);
        assert_eq!(skew_from_uncertainty(0.5 * ln2, e, 2).unwrap().value(), 0.5);
        let v = UncertaintyKind::Variance;
        assert_eq!(skew_from_uncertainty(0.125, v, 3).unwrap().value(), 0.5);
        assert!(skew_from_uncertainty(-0.1, e, 2).is_err());
    }

    #[test]
    fn config_validation_names_key() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau_c: 1.5,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "tau_c"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = TrainConfig {
            uncertainty: UncertaintyKind::Variance,
            samples: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        for bad in [
            TrainConfig { mu_ratio: 0, ..TrainConfig::default() },
            TrainConfig { beta: -1.0, ..TrainConfig::default() },
            TrainConfig { lambda_u: -1.0, ..TrainConfig::default() },
            TrainConfig { tau_u: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
