use nalgebra::DVector;

use super::{dim_check, geometric_parts, Covariance, Gaussian, SkewParameter};
use crate::error::{Error, Result};

/// Divergences in `(-DIVERGENCE_ROUNDOFF, 0)` are treated as round-off and
/// reported as zero; anything lower is an error.
pub const DIVERGENCE_ROUNDOFF: f64 = 1e-12;

pub(crate) fn clamp_divergence(v: f64) -> Result<f64> {
    if v.is_nan() {
        Err(Error::NonFinite("divergence"))
    } else if v >= 0.0 {
        Ok(v)
    } else if v > -DIVERGENCE_ROUNDOFF {
        Ok(0.0)
    } else {
        Err(Error::NegativeDivergence(v))
    }
}

/// `v^T M v` for a covariance-shaped matrix `M` (used with precisions).
fn quad_with(m: &Covariance, v: &DVector<f64>) -> f64 {
    match m {
        Covariance::Diagonal(d) => v.iter().zip(d.iter()).map(|(x, p)| x * x * p).sum(),
        Covariance::Full(m) => v.dot(&(m * v)),
    }
}

/// KL(g1 || g2) in closed form.
pub fn kl(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    dim_check(g1, g2, "kl")?;
    if g1 == g2 {
        return Ok(0.0);
    }
    let d = g1.dim() as f64;
    let raw = match (g1.cov(), g2.cov()) {
        (Covariance::Diagonal(v1), Covariance::Diagonal(v2)) => {
            let mut acc = 0.0;
            for i in 0..g1.dim() {
                let dm = g2.mean()[i] - g1.mean()[i];
                acc += v2[i].ln() - v1[i].ln() - 1.0 + v1[i] / v2[i] + dm * dm / v2[i];
            }
            0.5 * acc
        }
        _ => {
            let f2 = g2.factor()?;
            let ld1 = g1.factor()?.log_det();
            let delta = g2.mean() - g1.mean();
            0.5 * (f2.log_det() - ld1 - d + f2.trace_solve(g1.cov()) + f2.quad(&delta))
        }
    };
    clamp_divergence(raw)
}

/// Skew-geometric Jensen-Shannon divergence
/// `(1-a) KL(N1 || N_a) + a KL(N2 || N_a)`, evaluated through its expanded
/// closed form in terms of the geometric mean `N_a`.
pub fn js_geometric(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<f64> {
    dim_check(g1, g2, "js_geometric")?;
    if g1 == g2 {
        return Ok(0.0);
    }
    let w2 = a.value();
    let w1 = 1.0 - w2;
    let d = g1.dim() as f64;
    let parts = geometric_parts(g1, g2, a)?;
    let ld1 = g1.log_det()?;
    let ld2 = g2.log_det()?;

    // tr(S_a^{-1} ((1-a) S1 + a S2))
    let trace = match (&parts.precision, g1.cov(), g2.cov()) {
        (Covariance::Diagonal(p), Covariance::Diagonal(v1), Covariance::Diagonal(v2)) => p
            .iter()
            .zip(v1.iter().zip(v2.iter()))
            .map(|(p, (v1, v2))| p * (w1 * v1 + w2 * v2))
            .sum(),
        (precision, c1, c2) => {
            let blend = c1.to_full() * w1 + c2.to_full() * w2;
            precision.to_full().component_mul(&blend).sum()
        }
    };
    let d1 = &parts.mean - g1.mean();
    let d2 = &parts.mean - g2.mean();
    let raw = 0.5
        * (parts.log_det - w1 * ld1 - w2 * ld2 - d
            + trace
            + w1 * quad_with(&parts.precision, &d1)
            + w2 * quad_with(&parts.precision, &d2));
    clamp_divergence(raw)
}

/// Dual skew-geometric Jensen-Shannon divergence
/// `(1-a) KL(N_a || N1) + a KL(N_a || N2)`, evaluated through its reduced
/// closed form
/// `1/2 (log(|S1|^(1-a) |S2|^a / |S_a|) + (1-a) mu1' S1^-1 mu1 + a mu2' S2^-1 mu2 - mu_a' S_a^-1 mu_a)`.
pub fn js_geometric_dual(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<f64> {
    dim_check(g1, g2, "js_geometric_dual")?;
    if g1 == g2 {
        return Ok(0.0);
    }
    let w2 = a.value();
    let w1 = 1.0 - w2;
    let parts = geometric_parts(g1, g2, a)?;
    let f1 = g1.factor()?;
    let f2 = g2.factor()?;
    let raw = 0.5
        * (w1 * f1.log_det() + w2 * f2.log_det() - parts.log_det
            + w1 * f1.quad(g1.mean())
            + w2 * f2.quad(g2.mean())
            - quad_with(&parts.precision, &parts.mean));
    clamp_divergence(raw)
}

fn geometric_gaussian(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<Gaussian> {
    let parts = geometric_parts(g1, g2, a)?;
    Gaussian::new(parts.mean, parts.cov)
}

/// [`js_geometric`] assembled from two KL evaluations. Cross-check path.
pub fn js_geometric_via_kl(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<f64> {
    let ga = geometric_gaussian(g1, g2, a)?;
    Ok((1.0 - a.value()) * kl(g1, &ga)? + a.value() * kl(g2, &ga)?)
}

/// [`js_geometric_dual`] assembled from two KL evaluations. Cross-check path.
pub fn js_geometric_dual_via_kl(g1: &Gaussian, g2: &Gaussian, a: SkewParameter) -> Result<f64> {
    let ga = geometric_gaussian(g1, g2, a)?;
    Ok((1.0 - a.value()) * kl(&ga, g1)? + a.value() * kl(&ga, g2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn skew(a: f64) -> SkewParameter {
        SkewParameter::new(a).unwrap()
    }

    #[test]
    fn clamp_band() {
        assert_eq!(clamp_divergence(-5e-13).unwrap(), 0.0);
        assert_eq!(clamp_divergence(0.25).unwrap(), 0.25);
        assert!(matches!(
            clamp_divergence(-1e-9),
            Err(Error::NegativeDivergence(_))
        ));
        assert!(clamp_divergence(f64::NAN).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        let n01 = Gaussian::scalar(0.0, 1.0).unwrap();
        assert_eq!(kl(&n01, &n01).unwrap(), 0.0);
        let n11 = Gaussian::scalar(1.0, 1.0).unwrap();
        assert!((kl(&n01, &n11).unwrap() - 0.5).abs() < 1e-15);
        // 0.5 * (ln 4 - 1 + 1/4) = 0.318147...
        let n04 = Gaussian::scalar(0.0, 4.0).unwrap();
        let hand = 0.5 * (4f64.ln() - 1.0 + 0.25);
        assert!((kl(&n01, &n04).unwrap() - hand).abs() < 1e-15);
        assert!((hand - 0.318_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn kl_full_matches_diagonal_path() {
        let g1 = Gaussian::diagonal(
            DVector::from_vec(vec![0.1, -0.4, 2.0]),
            DVector::from_vec(vec![0.7, 1.3, 2.2]),
        )
        .unwrap();
        let g2 = Gaussian::diagonal(
            DVector::from_vec(vec![1.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.5, 0.2, 0.9]),
        )
        .unwrap();
        let fast = kl(&g1, &g2).unwrap();
        let slow = kl(&g1.to_full(), &g2.to_full()).unwrap();
        let mixed = kl(&g1, &g2.to_full()).unwrap();
        assert!((fast - slow).abs() < 1e-13);
        assert!((fast - mixed).abs() < 1e-13);
    }

    #[test]
    fn js_hand_case_both_forms() {
        // N_a = N(1, 1); KL(N(0,1) || N(1,1)) = KL(N(2,1) || N(1,1)) = 0.5, and the
        // reverse directions coincide.
        let g1 = Gaussian::scalar(0.0, 1.0).unwrap();
        let g2 = Gaussian::scalar(2.0, 1.0).unwrap();
        let a = SkewParameter::half();
        assert!((js_geometric(&g1, &g2, a).unwrap() - 0.5).abs() < 1e-10);
        assert!((js_geometric_dual(&g1, &g2, a).unwrap() - 0.5).abs() < 1e-10);
        assert!((js_geometric_via_kl(&g1, &g2, a).unwrap() - 0.5).abs() < 1e-10);
        assert!((js_geometric_dual_via_kl(&g1, &g2, a).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn js_endpoints_and_identity_vanish() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g1 = Gaussian::full(DVector::from_vec(vec![1.0, -2.0]), cov).unwrap();
        let g2 = Gaussian::diagonal(DVector::from_vec(vec![0.0, 0.5]), DVector::from_vec(vec![1.0, 3.0]))
            .unwrap();
        for a in [0.0, 1.0] {
            assert!(js_geometric(&g1, &g2, skew(a)).unwrap() < 1e-12);
            assert!(js_geometric_dual(&g1, &g2, skew(a)).unwrap() < 1e-12);
        }
        for a in [0.0, 0.2, 0.5, 0.9, 1.0] {
            assert!(js_geometric(&g1, &g1, skew(a)).unwrap() < 1e-12);
            assert!(js_geometric_dual(&g2, &g2, skew(a)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g1 = Gaussian::standard(2).unwrap();
        let g2 = Gaussian::standard(3).unwrap();
        assert!(matches!(kl(&g1, &g2), Err(Error::DimensionMismatch { .. })));
        assert!(js_geometric(&g1, &g2, SkewParameter::half()).is_err());
        assert!(js_geometric_dual(&g1, &g2, SkewParameter::half()).is_err());
    }
}
