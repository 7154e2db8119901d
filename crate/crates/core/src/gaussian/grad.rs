//! Divergences between diagonal Gaussians together with their gradients with
//! respect to both means and both variance vectors. These feed the training
//! losses, where the latent posteriors are diagonal.

use super::divergence::clamp_divergence;
use super::SkewParameter;
use crate::error::{Error, Result};

/// Gradient with respect to one diagonal Gaussian's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGrad {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGrad {
    fn zeros(d: usize) -> Self {
        DiagGrad {
            mean: vec![0.0; d],
            var: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    pub first: DiagGrad,
    pub second: DiagGrad,
}

fn check(mean1: &[f64], var1: &[f64], mean2: &[f64], var2: &[f64]) -> Result<usize> {
    let d = mean1.len();
    for (len, context) in [
        (var1.len(), "first variance"),
        (mean2.len(), "second mean"),
        (var2.len(), "second variance"),
    ] {
        if len != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                found: len,
            });
        }
    }
    if var1.iter().chain(var2).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("variances must be positive".into()));
    }
    Ok(d)
}

/// Applies the round-off clamp; a clamped value has zero gradient.
fn finish(raw: f64, mut g: PairGrad) -> Result<PairGrad> {
    g.value = clamp_divergence(raw)?;
    if raw < 0.0 {
        let d = g.first.mean.len();
        g.first = DiagGrad::zeros(d);
        g.second = DiagGrad::zeros(d);
    }
    Ok(g)
}

/// KL(N(mean1, var1) || N(mean2, var2)) and its gradient.
pub fn kl_diag(mean1: &[f64], var1: &[f64], mean2: &[f64], var2: &[f64]) -> Result<PairGrad> {
    let d = check(mean1, var1, mean2, var2)?;
    let mut out = PairGrad {
        value: 0.0,
        first: DiagGrad::zeros(d),
        second: DiagGrad::zeros(d),
    };
    let mut raw = 0.0;
    for i in 0..d {
        let (m1, v1, m2, v2) = (mean1[i], var1[i], mean2[i], var2[i]);
        let dm = m2 - m1;
        raw += 0.5 * (v2.ln() - v1.ln() - 1.0 + v1 / v2 + dm * dm / v2);
        out.first.mean[i] = -dm / v2;
        out.second.mean[i] = dm / v2;
        out.first.var[i] = 0.5 * (1.0 / v2 - 1.0 / v1);
        out.second.var[i] = 0.5 * (1.0 / v2 - v1 / (v2 * v2) - dm * dm / (v2 * v2));
    }
    finish(raw, out)
}

/// Skew-geometric JS divergence between two diagonal Gaussians and its gradient.
pub fn js_geometric_diag(
    mean1: &[f64],
    var1: &[f64],
    mean2: &[f64],
    var2: &[f64],
    a: SkewParameter,
) -> Result<PairGrad> {
    let d = check(mean1, var1, mean2, var2)?;
    let b = a.value();
    let a = 1.0 - b;
    let mut out = PairGrad {
        value: 0.0,
        first: DiagGrad::zeros(d),
        second: DiagGrad::zeros(d),
    };
    let mut raw = 0.0;
    for i in 0..d {
        let (m1, v1, m2, v2) = (mean1[i], var1[i], mean2[i], var2[i]);
        let (p1, p2) = (1.0 / v1, 1.0 / v2);
        let pa = a * p1 + b * p2;
        let ma = (a * p1 * m1 + b * p2 * m2) / pa;
        let (e1, e2) = (ma - m1, ma - m2);
        let spread = a * e1 * e1 + b * e2 * e2;
        raw += 0.5
            * (-pa.ln() - a * v1.ln() - b * v2.ln() - 1.0 + pa * (a * v1 + b * v2) + pa * spread);

        // Chain rule through the geometric-mean parameters (ma, pa).
        let g_ma = pa * (a * e1 + b * e2);
        let g_pa = 0.5 * (-1.0 / pa + a * v1 + b * v2 + spread);
        out.first.mean[i] = -pa * a * e1 + g_ma * a * p1 / pa;
        out.second.mean[i] = -pa * b * e2 + g_ma * b * p2 / pa;
        let g_p1 = g_pa * a + g_ma * a * (m1 - ma) / pa;
        let g_p2 = g_pa * b + g_ma * b * (m2 - ma) / pa;
        out.first.var[i] = 0.5 * a * (pa - p1) - g_p1 * p1 * p1;
        out.second.var[i] = 0.5 * b * (pa - p2) - g_p2 * p2 * p2;
    }
    finish(raw, out)
}
