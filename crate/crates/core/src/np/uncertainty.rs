use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for accepting a vector as a probability distribution.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Per-class variance of a distribution that puts half its rows on each of
/// two one-hot vectors; the largest value the variance measure can take.
pub const VARIANCE_CEILING: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    /// Entropy of the sample-averaged class probabilities.
    #[default]
    Entropy,
    /// Mean per-class variance across the sampled predictions.
    Variance,
}

impl UncertaintyKind {
    /// Upper bound of the measure for `num_classes` classes.
    pub fn ceiling(self, num_classes: usize) -> f64 {
        match self {
            UncertaintyKind::Entropy => (num_classes as f64).ln(),
            UncertaintyKind::Variance => VARIANCE_CEILING,
        }
    }

    pub fn measure(self, probs: &DMatrix<f64>, mean_probs: &[f64]) -> Result<f64> {
        match self {
            UncertaintyKind::Entropy => uncertainty_entropy(mean_probs),
            UncertaintyKind::Variance => uncertainty_variance(probs),
        }
    }
}

/// `-sum p ln p`, with `0 ln 0 = 0`.
pub fn uncertainty_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || p.iter().any(|&x| x < -SIMPLEX_TOLERANCE || x.is_nan()) {
        return Err(Error::InvalidParameter(format!(
            "entropy input is not a probability vector (sum {sum})"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Mean over classes of the population variance of each class column.
pub fn uncertainty_variance(probs: &DMatrix<f64>) -> Result<f64> {
    let t = probs.nrows();
    if t < 2 {
        return Err(Error::InvalidParameter(format!(
            "variance uncertainty needs at least 2 samples, got {t}"
        )));
    }
    let c = probs.ncols();
    let total: f64 = probs
        .column_iter()
        .map(|col| {
            // Shifted by the first row: identical rows give exactly zero.
            let shift = col[0];
            let (s, s2) = col.iter().fold((0.0, 0.0), |(s, s2), x| {
                let d = x - shift;
                (s + d, s2 + d * d)
            });
            let mean = s / t as f64;
            (s2 / t as f64 - mean * mean).max(0.0)
        })
        .sum();
    Ok(total / c as f64)
}
