//! Multivariate Gaussian algebra: densities, weighted geometric means, KL and
//! the skew-geometric Jensen-Shannon divergences, with Monte-Carlo estimators
//! that serve as independent oracles for the closed forms.
//!
//! Every determinant, inverse and quadratic form goes through a Cholesky
//! factor (or the trivial factor of a diagonal covariance). A factorization
//! failure is reported, never patched with jitter.

mod divergence;
pub mod grad;
mod mc;

pub use divergence::{
    js_geometric, js_geometric_dual, js_geometric_dual_via_kl, js_geometric_via_kl, kl,
    DIVERGENCE_ROUNDOFF,
};
pub use mc::{mc_divergence, DivergenceKind, McEstimate, MIN_MC_SAMPLES};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Absolute tolerance for accepting a full covariance as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(DVector<f64>),
    /// Symmetric positive definite matrix.
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn to_full(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Covariance::Diagonal(_))
    }
}

/// Mixing weight `alpha` in `[0, 1]` of a two-component geometric mean.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SkewParameter(f64);

impl SkewParameter {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(SkewParameter(alpha))
        } else {
            Err(Error::InvalidParameter(format!(
                "skew parameter {alpha} outside [0, 1]"
            )))
        }
    }

    pub fn half() -> Self {
        SkewParameter(0.5)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 - alpha`.
    pub fn complement(self) -> Self {
        SkewParameter(1.0 - self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: Covariance,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: Covariance) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::Empty("gaussian dimension"));
        }
        if cov.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "gaussian covariance",
                expected: dim,
                found: cov.dim(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        let cov = match cov {
            Covariance::Diagonal(v) => {
                if let Some(bad) = v.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
                    return Err(Error::InvalidParameter(format!(
                        "diagonal variance must be positive and finite, got {bad}"
                    )));
                }
                Covariance::Diagonal(v)
            }
            Covariance::Full(m) => {
                if m.ncols() != dim {
                    return Err(Error::ShapeMismatch {
                        context: "gaussian covariance",
                        expected: (dim, dim),
                        found: m.shape(),
                    });
                }
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("gaussian covariance"));
                }
                let asym = (&m - m.transpose()).amax();
                if asym > SYMMETRY_TOLERANCE {
                    return Err(Error::NotSymmetric {
                        context: "gaussian covariance",
                        asymmetry: asym,
                    });
                }
                let sym = symmetrize(m);
                if Cholesky::new(sym.clone()).is_none() {
                    return Err(Error::NotPositiveDefinite {
                        context: "gaussian covariance",
                    });
                }
                Covariance::Full(sym)
            }
        };
        Ok(Gaussian { mean, cov })
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        Self::new(mean, Covariance::Diagonal(variances))
    }

    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(mean, Covariance::Full(cov))
    }

    /// Convenience for the 1-D case.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::diagonal(DVector::from_element(1, mean), DVector::from_element(1, variance))
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::diagonal(DVector::zeros(dim), DVector::from_element(dim, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    /// Same distribution with a full covariance representation.
    pub fn to_full(&self) -> Gaussian {
        Gaussian {
            mean: self.mean.clone(),
            cov: Covariance::Full(self.cov.to_full()),
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        Ok(self.factor()?.log_det())
    }

    pub(crate) fn factor(&self) -> Result<Factor> {
        Factor::new(&self.cov, "gaussian covariance")
    }

    /// Precomputes the factorization for repeated density evaluation.
    pub fn density(&self) -> Result<LogDensity> {
        let factor = self.factor()?;
        let log_norm = -0.5 * (self.dim() as f64 * LN_2PI + factor.log_det());
        Ok(LogDensity {
            mean: self.mean.as_slice().to_vec(),
            factor,
            log_norm,
        })
    }

    pub(crate) fn sampler(&self) -> Result<Sampler> {
        let scale = match &self.cov {
            Covariance::Diagonal(v) => SamplerScale::Diagonal(v.map(f64::sqrt)),
            Covariance::Full(_) => match self.factor()? {
                Factor::Chol(c) => SamplerScale::Lower(c.l()),
                Factor::Diag(_) => unreachable!("full covariance yields a Cholesky factor"),
            },
        };
        Ok(Sampler {
            mean: self.mean.clone(),
            scale,
        })
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

pub(crate) fn dim_check(g1: &Gaussian, g2: &Gaussian, context: &'static str) -> Result<()> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch {
            context,
            expected: g1.dim(),
            found: g2.dim(),
        });
    }
    Ok(())
}

/// Cholesky factor of a covariance (or of a precision, depending on use).
pub(crate) enum Factor {
    Diag(DVector<f64>),
    Chol(Cholesky<f64, Dyn>),
}

impl Factor {
    pub(crate) fn new(cov: &Covariance, context: &'static str) -> Result<Self> {
        match cov {
            Covariance::Diagonal(v) => Ok(Factor::Diag(v.clone())),
            Covariance::Full(m) => Cholesky::new(m.clone())
                .map(Factor::Chol)
                .ok_or(Error::NotPositiveDefinite { context }),
        }
    }

    pub(crate) fn from_matrix(m: DMatrix<f64>, context: &'static str) -> Result<Self> {
        Cholesky::new(symmetrize(m))
            .map(Factor::Chol)
            .ok_or(Error::NotPositiveDefinite { context })
    }

    pub(crate) fn log_det(&self) -> f64 {
        match self {
            Factor::Diag(v) => v.iter().map(|x| x.ln()).sum(),
            Factor::Chol(c) => 2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
        }
    }

    /// `A^{-1} b`.
    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Diag(v) => b.component_div(v),
            Factor::Chol(c) => c.solve(b),
        }
    }

    /// `b^T A^{-1} b`.
    pub(crate) fn quad(&self, b: &DVector<f64>) -> f64 {
        b.dot(&self.solve(b))
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        match self {
            Factor::Diag(v) => DMatrix::from_diagonal(&v.map(|x| 1.0 / x)),
            Factor::Chol(c) => symmetrize(c.inverse()),
        }
    }

    /// `tr(A^{-1} B)`.
    pub(crate) fn trace_solve(&self, b: &Covariance) -> f64 {
        match (self, b) {
            (Factor::Diag(v), Covariance::Diagonal(w)) => {
                v.iter().zip(w.iter()).map(|(a, b)| b / a).sum()
            }
            (Factor::Diag(v), Covariance::Full(m)) => {
                v.iter().zip(m.diagonal().iter()).map(|(a, b)| b / a).sum()
            }
            (Factor::Chol(c), _) => c.solve(&b.to_full()).trace(),
        }
    }
}

/// Prepared log-density evaluator for hot loops.
pub struct LogDensity {
    mean: Vec<f64>,
    factor: Factor,
    log_norm: f64,
}

impl LogDensity {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `x.len()` must equal `self.dim()`; use [`log_pdf`] for a checked call.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.mean.len());
        let quad = match &self.factor {
            Factor::Diag(v) => x
                .iter()
                .zip(&self.mean)
                .zip(v.iter())
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum::<f64>(),
            Factor::Chol(c) => {
                // Forward substitution L y = x - mu; quad = |y|^2.
                let l = c.l_dirty();
                let d = self.mean.len();
                let mut y = [0.0f64; 16];
                let mut heap;
                let y: &mut [f64] = if d <= 16 {
                    &mut y[..d]
                } else {
                    heap = vec![0.0; d];
                    &mut heap
                };
                let mut acc = 0.0;
                for i in 0..d {
                    let mut s = x[i] - self.mean[i];
                    for j in 0..i {
                        s -= l[(i, j)] * y[j];
                    }
                    y[i] = s / l[(i, i)];
                    acc += y[i] * y[i];
                }
                acc
            }
        };
        self.log_norm - 0.5 * quad
    }
}

/// Log of the normalized density of `g` at `x`.
pub fn log_pdf(g: &Gaussian, x: &DVector<f64>) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "log_pdf point",
            expected: g.dim(),
            found: x.len(),
        });
    }
    Ok(g.density()?.eval(x.as_slice()))
}

enum SamplerScale {
    Diagonal(DVector<f64>),
    Lower(DMatrix<f64>),
}

pub(crate) struct Sampler {
    mean: DVector<f64>,
    scale: SamplerScale,
}

impl Sampler {
    pub(crate) fn draw_into<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.mean.len();
        let mut eps = [0.0f64; 16];
        let mut heap;
        let eps: &mut [f64] = if d <= 16 {
            &mut eps[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        match &self.scale {
            SamplerScale::Diagonal(s) => {
                for i in 0..d {
                    out[i] = self.mean[i] + s[i] * eps[i];
                }
            }
            SamplerScale::Lower(l) => {
                for i in 0..d {
                    let mut acc = self.mean[i];
                    for j in 0..=i {
                        acc += l[(i, j)] * eps[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }
}

/// `n` draws from `g`, one per row. Deterministic in `seed`.
pub fn sample(g: &Gaussian, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let sampler = g.sampler()?;
    let mut rng = rng::rng(seed);
    let d = g.dim();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        sampler.draw_into(&mut rng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Intermediate quantities of the weighted geometric mean `N1^(1-a) N2^a`.
pub(crate) struct GeometricParts {
    pub(crate) mean: DVector<f64>,
    /// Covariance of the geometric mean.
    pub(crate) cov: Covariance,
    /// Its inverse, `(1-a) S1^{-1} + a S2^{-1}`.
    pub(crate) precision: Covariance,
    pub(crate) log_det: f64,
}

pub(crate) fn geometric_parts(
    g1: &Gaussian,
    g2: &Gaussian,
    a: SkewParameter,
) -> Result<GeometricParts> {
    dim_check(g1, g2, "geometric_mean")?;
    let w2 = a.value();
    let w1 = 1.0 - w2;
    match (&g1.cov, &g2.cov) {
        (Covariance::Diagonal(v1), Covariance::Diagonal(v2)) => {
            let d = g1.dim();
            let mut prec = DVector::zeros(d);
            let mut var = DVector::zeros(d);
            let mut mean = DVector::zeros(d);
            for i in 0..d {
                let p = w1 / v1[i] + w2 / v2[i];
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::NotPositiveDefinite {
                        context: "geometric mean precision",
                    });
                }
                prec[i] = p;
                var[i] = 1.0 / p;
                mean[i] = var[i] * (w1 * g1.mean[i] / v1[i] + w2 * g2.mean[i] / v2[i]);
            }
            let log_det = var.iter().map(|x| x.ln()).sum();
            Ok(GeometricParts {
                mean,
                cov: Covariance::Diagonal(var),
                precision: Covariance::Diagonal(prec),
                log_det,
            })
        }
        _ => {
            let p1 = g1.factor()?.inverse();
            let p2 = g2.factor()?.inverse();
            let precision = symmetrize(&p1 * w1 + &p2 * w2);
            let pf = Factor::from_matrix(precision.clone(), "geometric mean precision")?;
            let cov = pf.inverse();
            let rhs = &p1 * g1.mean() * w1 + &p2 * g2.mean() * w2;
            let mean = pf.solve(&rhs);
            let log_det = -pf.log_det();
            Ok(GeometricParts {
                mean,
                cov: Covariance::Full(cov),
                precision: Covariance::Full(precision),
                log_det,
            })
        }
    }
}

/// Normalized weighted geometric mean of two Gaussians,
/// `N(mu_a, S_a)` with `S_a = ((1-a) S1^{-1} + a S2^{-1})^{-1}` and
/// `mu_a = S_a ((1-a) S1^{-1} mu1 + a S2^{-1} mu2)`.
///
/// Two diagonal inputs give a diagonal result; any other combination is
/// computed in full form. The endpoints return the corresponding input
/// unchanged.
pub fn geometric_mean(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<Gaussian> {
    dim_check(g1, g2, "geometric_mean")?;
    if a.value() == 0.0 {
        return Ok(g1.clone());
    }
    if a.value() == 1.0 {
        return Ok(g2.clone());
    }
    let parts = geometric_parts(g1, g2, a)?;
    Gaussian::new(parts.mean, parts.cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::rng(seed);
        let a = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal) * 0.6);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.4
    }

    #[test]
    fn standard_normal_mode() {
        let g = Gaussian::scalar(0.0, 1.0).unwrap();
        let lp = log_pdf(&g, &DVector::from_element(1, 0.0)).unwrap();
        assert!(close(lp, -0.5 * (2.0 * std::f64::consts::PI).ln(), 1e-15));
        assert!(close(lp, -0.9189, 1e-4));
    }

    #[test]
    fn log_pdf_at_mean_is_normalizer() {
        let cov = spd(3, 11);
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let g = Gaussian::full(mean.clone(), cov.clone()).unwrap();
        let expected = -1.5 * LN_2PI - 0.5 * cov.determinant().ln();
        assert!(close(log_pdf(&g, &mean).unwrap(), expected, 1e-12));
    }

    #[test]
    fn log_pdf_rejects_wrong_dimension() {
        let g = Gaussian::standard(2).unwrap();
        let err = log_pdf(&g, &DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn construction_validates() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            Gaussian::full(DVector::zeros(2), asym),
            Err(Error::NotSymmetric { .. })
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Gaussian::full(DVector::zeros(2), indefinite),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(Gaussian::scalar(0.0, 0.0).is_err());
        assert!(Gaussian::scalar(f64::NAN, 1.0).is_err());
        assert!(SkewParameter::new(1.01).is_err());
        assert!(SkewParameter::new(-0.0).is_ok());
    }

    #[test]
    fn geometric_mean_endpoints_and_idempotence() {
        let g1 = Gaussian::full(DVector::from_vec(vec![1.0, 2.0]), spd(2, 1)).unwrap();
        let g2 = Gaussian::diagonal(DVector::from_vec(vec![-1.0, 0.5]), DVector::from_vec(vec![2.0, 0.3]))
            .unwrap();
        assert_eq!(geometric_mean(&g1, &g2, SkewParameter::new(0.0).unwrap()).unwrap(), g1);
        assert_eq!(geometric_mean(&g1, &g2, SkewParameter::new(1.0).unwrap()).unwrap(), g2);

        let m = geometric_mean(&g1, &g1, SkewParameter::new(0.37).unwrap()).unwrap();
        assert!((m.mean() - g1.mean()).amax() < 1e-12);
        assert!((m.cov().to_full() - g1.cov().to_full()).amax() < 1e-12);
    }

    #[test]
    fn geometric_mean_scalar_case() {
        // Precision-weighting by hand: 1 / (0.5 * 1 + 0.5 * 0.25) = 1.6,
        // mean = 1.6 * (0.5 * 0 / 1 + 0.5 * 2 / 4) = 0.4.
        let hand_var = 1.0 / (0.5 * 1.0 + 0.5 * 0.25);
        let hand_mean = hand_var * (0.5 * 0.0 / 1.0 + 0.5 * 2.0 / 4.0);
        assert!(close(hand_var, 1.6, 1e-15) && close(hand_mean, 0.4, 1e-15));

        let g1 = Gaussian::scalar(0.0, 1.0).unwrap();
        let g2 = Gaussian::scalar(2.0, 4.0).unwrap();
        let m = geometric_mean(&g1, &g2, SkewParameter::half()).unwrap();
        assert!(m.cov().is_diagonal());
        assert!(close(m.mean()[0], hand_mean, 1e-15));
        assert!(close(m.cov().to_full()[(0, 0)], hand_var, 1e-15));
    }

    #[test]
    fn mixed_representation_promotes_to_full() {
        let g1 = Gaussian::full(DVector::zeros(2), spd(2, 5)).unwrap();
        let g2 = Gaussian::standard(2).unwrap();
        let m = geometric_mean(&g1, &g2, SkewParameter::half()).unwrap();
        assert!(!m.cov().is_diagonal());

        // Diagonal pair computed in full form must agree with the fast path.
        let d1 = Gaussian::diagonal(DVector::from_vec(vec![0.2, 1.0]), DVector::from_vec(vec![0.5, 3.0]))
            .unwrap();
        let fast = geometric_mean(&d1, &g2, SkewParameter::new(0.3).unwrap()).unwrap();
        let slow =
            geometric_mean(&d1.to_full(), &g2.to_full(), SkewParameter::new(0.3).unwrap()).unwrap();
        assert!((fast.mean() - slow.mean()).amax() < 1e-14);
        assert!((fast.cov().to_full() - slow.cov().to_full()).amax() < 1e-14);
    }

    #[test]
    fn sampling_is_deterministic_and_concentrates() {
        let g = Gaussian::full(DVector::from_vec(vec![1.0, -1.0]), spd(2, 9)).unwrap();
        assert_eq!(sample(&g, 50, 3).unwrap(), sample(&g, 50, 3).unwrap());
        assert_ne!(sample(&g, 50, 3).unwrap(), sample(&g, 50, 4).unwrap());

        let tight = Gaussian::scalar(3.0, 1e-12).unwrap();
        let s = sample(&tight, 1000, 1).unwrap();
        assert!(s.iter().all(|x| (x - 3.0).abs() < 1e-5));
        assert!(sample(&tight, 0, 1).is_err());
    }

    #[test]
    fn sample_mean_law_of_large_numbers() {
        let g = Gaussian::standard(2).unwrap();
        let s = sample(&g, 1_000_000, 42).unwrap();
        for j in 0..2 {
            let m = s.column(j).mean();
            assert!(m.abs() < 5e-3, "coordinate {j} mean {m}");
        }
    }

    #[test]
    fn full_covariance_samples_match_covariance() {
        let cov = spd(3, 21);
        let g = Gaussian::full(DVector::zeros(3), cov.clone()).unwrap();
        let n = 200_000;
        let s = sample(&g, n, 8).unwrap();
        let emp = s.transpose() * &s / n as f64;
        assert!((emp - cov).amax() < 0.05);
    }
}
