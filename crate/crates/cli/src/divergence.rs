//! `npmatch check-divergence`: closed-form skew-geometric JS divergences
//! against their Monte-Carlo estimates on random Gaussian pairs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use npmatch::gaussian::{
    js_geometric, js_geometric_dual, mc_divergence, DivergenceKind, Gaussian, SkewParameter,
};
use npmatch::rng::{derive_seed, rng_for};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Instances fail when the closed form is further than this many standard
/// errors from the estimate.
pub const MAX_Z: f64 = 3.0;

/// Absolute slack for estimates whose standard error vanishes (the dual
/// integrand is constant under the geometric mean).
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheck {
    pub max_dim: usize,
    pub trials: usize,
    pub samples: usize,
    pub seed: u64,
    /// Adds a relative error to the closed forms; a negative control.
    pub inject_error: bool,
}

impl Default for DivergenceCheck {
    fn default() -> Self {
        DivergenceCheck {
            max_dim: 4,
            trials: 50,
            samples: 1_000_000,
            seed: 0,
            inject_error: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Js,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub trial: usize,
    pub dim: usize,
    pub alpha: f64,
    pub form: Form,
    pub closed: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub rows: Vec<DivergenceRow>,
}

impl DivergenceReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("trial  dim  alpha   form   closed        estimate      std_err     z      ok\n");
        for r in &self.rows {
            let form = match r.form {
                Form::Js => "js",
                Form::Dual => "dual",
            };
            writeln!(
                s,
                "{:>5}  {:>3}  {:.3}  {:<5}  {:<12.6e}  {:<12.6e}  {:<10.3e}  {:>5.2}  {}",
                r.trial,
                r.dim,
                r.alpha,
                form,
                r.closed,
                r.estimate,
                r.std_error,
                r.z,
                if r.pass { "yes" } else { "NO" }
            )
            .expect("writing to a string");
        }
        s
    }
}

/// A random pair with full covariances `A A^T / d + 0.3 I`.
pub fn random_pair(dim: usize, seed: u64) -> Result<(Gaussian, Gaussian)> {
    let mut r = rng_for(seed, &[0]);
    let mut draw = || -> Result<Gaussian> {
        let mean = DVector::from_fn(dim, |_, _| r.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(dim, dim, |_, _| r.random_range(-1.0..1.0));
        let cov = &a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.3;
        Ok(Gaussian::full(mean, cov)?)
    };
    Ok((draw()?, draw()?))
}

pub fn run(check: &DivergenceCheck) -> Result<DivergenceReport> {
    if check.max_dim == 0 {
        return Err(CliError::Config("`dims` must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(2 * check.trials);
    for trial in 0..check.trials {
        let seed = derive_seed(check.seed, &[trial as u64]);
        let mut r = rng_for(seed, &[1]);
        let dim = r.random_range(1..=check.max_dim);
        let alpha = SkewParameter::new(r.random_range(0.05..0.95))?;
        let (g1, g2) = random_pair(dim, seed)?;
        for (k, form) in [Form::Js, Form::Dual].into_iter().enumerate() {
            let (mut closed, kind) = match form {
                Form::Js => (js_geometric(&g1, &g2, alpha)?, DivergenceKind::Js),
                Form::Dual => (js_geometric_dual(&g1, &g2, alpha)?, DivergenceKind::JsDual),
            };
            if check.inject_error {
                closed = closed * 1.05 + 0.01;
            }
            let est = mc_divergence(&g1, &g2, alpha, kind, check.samples, derive_seed(seed, &[2, k as u64]))?;
            let diff = (est.value - closed).abs();
            rows.push(DivergenceRow {
                trial,
                dim,
                alpha: alpha.value(),
                form,
                closed,
                estimate: est.value,
                std_error: est.std_error,
                z: if diff <= ROUNDING_SLACK { 0.0 } else { est.z_score(closed) },
                pass: diff <= MAX_Z * est.std_error + ROUNDING_SLACK,
            });
        }
    }
    Ok(DivergenceReport { rows })
}
