use super::{geometric_mean, Gaussian, LogDensity, Sampler, SkewParameter};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    /// KL(N1 || N2), sampled under N1.
    Kl,
    /// Skew-geometric JS, sampled under N1 and N2.
    Js,
    /// Dual skew-geometric JS, sampled under the geometric mean.
    JsDual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    /// Standard error of `value`.
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// `|value - reference|` in units of the standard error.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.value - reference).abs();
        if self.std_error == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / self.std_error
        }
    }
}

#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Mean and variance of the mean.
    fn finish(&self) -> (f64, f64) {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        (self.mean, var / self.n as f64)
    }
}

/// Mean of `f(x)` for `n` draws `x ~ sampler`.
fn expectation(
    sampler: &Sampler,
    n: usize,
    seed: u64,
    dim: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, f64) {
    let mut rng = rng::rng(seed);
    let mut x = vec![0.0; dim];
    let mut acc = Welford::default();
    for _ in 0..n {
        sampler.draw_into(&mut rng, &mut x);
        acc.push(f(&x));
    }
    acc.finish()
}

/// Monte-Carlo estimate of a divergence from log-density differences.
///
/// `a` is ignored for [`DivergenceKind::Kl`]. For [`DivergenceKind::Js`],
/// `n` samples are drawn from each component with non-zero weight.
pub fn mc_divergence(
    g1: &Gaussian,
    g2: &Gaussian,
    a: SkewParameter,
    kind: DivergenceKind,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    super::dim_check(g1, g2, "mc_divergence")?;
    if n < MIN_MC_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "monte-carlo divergence needs at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    let dim = g1.dim();
    let d1 = g1.density()?;
    let d2 = g2.density()?;
    let w2 = a.value();
    let w1 = 1.0 - w2;

    let (value, var) = match kind {
        DivergenceKind::Kl => {
            expectation(&g1.sampler()?, n, seed, dim, |x| d1.eval(x) - d2.eval(x))
        }
        DivergenceKind::Js => {
            let ga = geometric_mean(g1, g2, a)?;
            let da = ga.density()?;
            let mut value = 0.0;
            let mut var = 0.0;
            let sides: [(&Gaussian, &LogDensity, f64, u64); 2] =
                [(g1, &d1, w1, 1), (g2, &d2, w2, 2)];
            for (g, d, w, tag) in sides {
                if w == 0.0 {
                    continue;
                }
                let seed = rng::derive_seed(seed, &[tag]);
                let (m, v) = expectation(&g.sampler()?, n, seed, dim, |x| d.eval(x) - da.eval(x));
                value += w * m;
                var += w * w * v;
            }
            (value, var)
        }
        DivergenceKind::JsDual => {
            let ga = geometric_mean(g1, g2, a)?;
            let da = ga.density()?;
            expectation(&ga.sampler()?, n, seed, dim, |x| {
                let la = da.eval(x);
                let mut v = 0.0;
                if w1 != 0.0 {
                    v += w1 * (la - d1.eval(x));
                }
                if w2 != 0.0 {
                    v += w2 * (la - d2.eval(x));
                }
                v
            })
        }
    };
    Ok(McEstimate {
        value,
        std_error: var.sqrt(),
        samples: n,
    })
}
