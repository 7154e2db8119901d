//! The run configuration file: a flat TOML document holding every training,
//! dataset and output setting. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use npmatch::data::{AugmentConfig, DataConfig, DatasetKind};
use npmatch::np::UncertaintyKind;
use npmatch::ssl::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const DEFAULT_OUT_DIR: &str = "npmatch-run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// Seeds dataset generation, initialization and every training stream.
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub classes: usize,
    pub spread: f64,
    pub labels_per_class: usize,
    pub test_fraction: f64,

    pub tau_c: f64,
    pub tau_u: f64,
    pub lambda_u: f64,
    pub beta: f64,
    pub samples: usize,
    pub batch_size: usize,
    pub mu_ratio: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: u64,
    pub ema_momentum: f64,
    pub grad_clip: f64,
    pub bank_capacity: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub uncertainty: UncertaintyKind,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout: f64,
    pub log_every: u64,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile::from_parts(&TrainConfig::default(), &DataConfig::default(), PathBuf::from(DEFAULT_OUT_DIR))
    }
}

impl RunConfigFile {
    pub fn from_parts(t: &TrainConfig, d: &DataConfig, out_dir: PathBuf) -> Self {
        RunConfigFile {
            seed: t.seed,
            out_dir,
            dataset: d.kind,
            n: d.n,
            noise: d.noise,
            classes: d.classes,
            spread: d.spread,
            labels_per_class: d.labels_per_class,
            test_fraction: d.test_fraction,
            tau_c: t.tau_c,
            tau_u: t.tau_u,
            lambda_u: t.lambda_u,
            beta: t.beta,
            samples: t.samples,
            batch_size: t.batch_size,
            mu_ratio: t.mu_ratio,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            t_max: t.t_max,
            ema_momentum: t.ema_momentum,
            grad_clip: t.grad_clip,
            bank_capacity: t.bank_capacity,
            feature_dim: t.feature_dim,
            latent_dim: t.latent_dim,
            hidden: t.hidden,
            uncertainty: t.uncertainty,
            weak_sigma: t.augment.weak_sigma,
            strong_sigma: t.augment.strong_sigma,
            strong_dropout: t.augment.strong_dropout,
            log_every: t.log_every,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            tau_c: self.tau_c,
            tau_u: self.tau_u,
            lambda_u: self.lambda_u,
            beta: self.beta,
            samples: self.samples,
            batch_size: self.batch_size,
            mu_ratio: self.mu_ratio,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            t_max: self.t_max,
            ema_momentum: self.ema_momentum,
            grad_clip: self.grad_clip,
            bank_capacity: self.bank_capacity,
            feature_dim: self.feature_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            uncertainty: self.uncertainty,
            augment: AugmentConfig {
                weak_sigma: self.weak_sigma,
                strong_sigma: self.strong_sigma,
                strong_dropout: self.strong_dropout,
            },
            seed: self.seed,
            log_every: self.log_every,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            kind: self.dataset,
            n: self.n,
            noise: self.noise,
            classes: self.classes,
            spread: self.spread,
            labels_per_class: self.labels_per_class,
            test_fraction: self.test_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let bad = |key: &'static str, reason: &str| -> Result<()> {
            Err(CliError::Config(format!("`{key}` {reason}")))
        };
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be non-negative");
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad("spread", "must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must lie in [0, 1)");
        }
        if self.labels_per_class == 0 {
            return bad("labels_per_class", "must be at least 1");
        }
        Ok(())
    }

    /// Parses a TOML document without validating values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Resolves the effective configuration: built-in defaults, then the
    /// file (if any), then `key=value` overrides in order. The result is
    /// validated.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| CliError::ReadConfig {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let (key, value) = parse_override(ov)?;
            table.insert(key, value);
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to
/// a bare string (so `dataset=blobs` works without quotes).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Override(s.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || raw.is_empty() {
        return Err(CliError::Override(s.to_string()));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfigFile::default();
        assert_eq!(RunConfigFile::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.data_config(), DataConfig::default());
        assert_eq!(RunConfigFile::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfigFile::from_toml("tau_cc = 0.9").unwrap_err().to_string();
        assert!(err.contains("tau_cc"), "{err}");
    }

    #[test]
    fn overrides_parse_typed_values() {
        assert_eq!(parse_override("t_max=10").unwrap().1, toml::Value::Integer(10));
        assert_eq!(parse_override("beta = 0.5").unwrap().1, toml::Value::Float(0.5));
        assert_eq!(parse_override("dataset=blobs").unwrap().1, toml::Value::String("blobs".into()));
        assert!(parse_override("t_max").is_err());
        assert!(parse_override("=3").is_err());
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = RunConfigFile::resolve(None, &["tau_c=2.0".into()]).unwrap_err().to_string();
        assert!(err.contains("tau_c"), "{err}");
        let err = RunConfigFile::resolve(None, &["test_fraction=1.0".into()]).unwrap_err().to_string();
        assert!(err.contains("test_fraction"), "{err}");
    }
}
