//! Neural-Process predictor.
//!
//! Inputs are mapped to features by an encoder MLP. A set of context records
//! (feature plus class distribution) is mean-aggregated and mapped by the
//! latent head to a diagonal Gaussian over the latent `z`. For each target,
//! `T` latents are drawn with the reparameterization `z = mu + sigma * eps`,
//! and the decoder maps `[feature, z]` to class logits.
//!
//! Every differentiable stage exposes a cached forward and a backward so the
//! training losses can assemble exact gradients.

mod bank;
mod uncertainty;

pub use bank::{BankRecord, MemoryBank, DEFAULT_BANK_CAPACITY};
pub use uncertainty::{
    uncertainty_entropy, uncertainty_variance, UncertaintyKind, SIMPLEX_TOLERANCE, VARIANCE_CEILING,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::nn::{add_row, column_sums, relu_backward, Dense, Mlp, MlpCache, ParamSet};
use crate::rng;

/// Bound applied to the latent head's log-variance output before `exp`.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NpDims {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Default for NpDims {
    fn default() -> Self {
        NpDims {
            input_dim: 2,
            feature_dim: 32,
            latent_dim: 32,
            hidden: 32,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpModel {
    pub encoder: Mlp,
    pub latent_head: Mlp,
    pub decoder: Mlp,
}

impl ParamSet for NpModel {
    fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut v = self.encoder.tensors();
        v.extend(self.latent_head.tensors());
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.latent_head.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, net) in [
            ("encoder", &self.encoder),
            ("latent_head", &self.latent_head),
            ("decoder", &self.decoder),
        ] {
            names.extend(net.tensor_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        names
    }
}

/// Diagonal Gaussian over the latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    gaussian: Gaussian,
    log_var: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let var: Vec<f64> = log_var.iter().map(|l| l.exp()).collect();
        let gaussian = Gaussian::diagonal(DVector::from_vec(mean), DVector::from_vec(var))?;
        Ok(LatentPosterior { gaussian, log_var })
    }

    pub fn gaussian(&self) -> &Gaussian {
        &self.gaussian
    }

    pub fn dim(&self) -> usize {
        self.log_var.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.gaussian.mean().as_slice()
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }
}

/// Context records: features with their class distributions. Rows that
/// came from the current batch ("live" rows) come first so their gradients
/// can be routed back to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    features: DMatrix<f64>,
    probs: DMatrix<f64>,
    live_rows: usize,
}

impl Context {
    pub fn new(features: DMatrix<f64>, probs: DMatrix<f64>) -> Result<Self> {
        Self::with_banks(features, probs, &[])
    }

    /// Live rows followed by every record of each bank, in bank order.
    pub fn with_banks(
        features: DMatrix<f64>,
        probs: DMatrix<f64>,
        banks: &[&MemoryBank],
    ) -> Result<Self> {
        if features.nrows() != probs.nrows() {
            return Err(Error::ShapeMismatch {
                context: "context rows",
                expected: (features.nrows(), probs.ncols()),
                found: probs.shape(),
            });
        }
        let (f, c) = (features.ncols(), probs.ncols());
        for b in banks {
            if b.feature_dim() != f || b.num_classes() != c {
                return Err(Error::DimensionMismatch {
                    context: "bank record width",
                    expected: f + c,
                    found: b.feature_dim() + b.num_classes(),
                });
            }
        }
        let live_rows = features.nrows();
        let total = live_rows + banks.iter().map(|b| b.len()).sum::<usize>();
        if total == 0 {
            return Err(Error::Empty("context"));
        }
        let (features, probs) = if banks.is_empty() {
            (features, probs)
        } else {
            let mut fm = DMatrix::zeros(total, f);
            let mut pm = DMatrix::zeros(total, c);
            fm.rows_mut(0, live_rows).copy_from(&features);
            pm.rows_mut(0, live_rows).copy_from(&probs);
            for (row, rec) in (live_rows..).zip(banks.iter().flat_map(|b| b.records())) {
                for (j, v) in rec.feature.iter().enumerate() {
                    fm[(row, j)] = *v;
                }
                for (j, v) in rec.probs.iter().enumerate() {
                    pm[(row, j)] = *v;
                }
            }
            (fm, pm)
        };
        Ok(Context {
            features,
            probs,
            live_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn live_rows(&self) -> usize {
        self.live_rows
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Column means of `[features | probs]` as a `1 x (F + C)` row. Each
    /// column is summed in sorted order, so the result does not depend on
    /// the order of the records.
    pub fn aggregate(&self) -> DMatrix<f64> {
        let (f, c) = (self.features.ncols(), self.probs.ncols());
        let n = self.len() as f64;
        let mut out = DMatrix::zeros(1, f + c);
        let mut buf = Vec::with_capacity(self.len());
        let columns = self.features.column_iter().chain(self.probs.column_iter());
        for (j, col) in columns.enumerate() {
            buf.clear();
            buf.extend(col.iter().copied());
            buf.sort_unstable_by(f64::total_cmp);
            out[(0, j)] = buf.iter().sum::<f64>() / n;
        }
        out
    }
}

pub struct PosteriorCache {
    head: MlpCache,
    raw_log_var: Vec<f64>,
    var: Vec<f64>,
    rows: usize,
}

/// Reparameterized latent draws for a batch of targets: row `t * n + i`
/// holds draw `t` for target `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSamples {
    pub eps: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub samples: usize,
    pub targets: usize,
}

impl LatentSamples {
    /// Draws `samples` latents per target. Target `i`'s noise comes from a
    /// stream keyed by `(seed, keys[i])`, so it does not depend on which
    /// other targets share the batch.
    pub fn draw(post: &LatentPosterior, keys: &[u64], samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidParameter("latent sample count must be at least 1".into()));
        }
        let n = keys.len();
        let l = post.dim();
        let mut eps = DMatrix::zeros(samples * n, l);
        for (i, &key) in keys.iter().enumerate() {
            let mut r = rng::rng_for(seed, &[key]);
            for t in 0..samples {
                for j in 0..l {
                    eps[(t * n + i, j)] = r.sample(StandardNormal);
                }
            }
        }
        Ok(Self::from_noise(post, eps, samples, n))
    }

    pub fn from_noise(post: &LatentPosterior, eps: DMatrix<f64>, samples: usize, targets: usize) -> Self {
        let sd: Vec<f64> = post.log_var().iter().map(|l| (0.5 * l).exp()).collect();
        let mean = post.mean();
        let mut z = eps.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = mean[j] + sd[j] * *v;
            }
        }
        LatentSamples {
            eps,
            z,
            samples,
            targets,
        }
    }

    /// Gradient with respect to the posterior mean and variance given the
    /// gradient with respect to `z`.
    pub fn backward(&self, post: &LatentPosterior, d_z: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let l = post.dim();
        let mut d_mean = vec![0.0; l];
        let mut d_var = vec![0.0; l];
        for j in 0..l {
            let sd = (0.5 * post.log_var()[j]).exp();
            let dz = d_z.column(j);
            d_mean[j] = dz.sum();
            d_var[j] = dz.dot(&self.eps.column(j)) / (2.0 * sd);
        }
        (d_mean, d_var)
    }
}

pub struct DecodeCache {
    features: DMatrix<f64>,
    z: DMatrix<f64>,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
    samples: usize,
}

/// Class probabilities for one target from `T` latent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct NpPrediction {
    /// `T x C`, each row a softmax output.
    pub probs: DMatrix<f64>,
    pub mean_probs: Vec<f64>,
    pub uncertainty: f64,
    pub confidence: f64,
}

impl NpPrediction {
    pub fn from_probs(probs: DMatrix<f64>, kind: UncertaintyKind) -> Result<Self> {
        let t = probs.nrows() as f64;
        let mean_probs: Vec<f64> = probs.column_iter().map(|c| c.sum() / t).collect();
        let uncertainty = kind.measure(&probs, &mean_probs)?;
        let confidence = mean_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(NpPrediction {
            probs,
            mean_probs,
            uncertainty,
            confidence,
        })
    }

    /// Arg-max of the mean probabilities; ties go to the lowest class.
    pub fn label(&self) -> usize {
        argmax(&self.mean_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

impl NpModel {
    pub fn new(dims: NpDims, seed: u64) -> Result<Self> {
        let NpDims {
            input_dim,
            feature_dim,
            latent_dim,
            hidden,
            num_classes,
        } = dims;
        if [input_dim, feature_dim, latent_dim, hidden, num_classes].contains(&0) {
            return Err(Error::InvalidParameter("model dimensions must be positive".into()));
        }
        let mut r = rng::rng(seed);
        let mut model = NpModel {
            encoder: Mlp::new(input_dim, hidden, feature_dim, &mut r),
            latent_head: Mlp::new(feature_dim + num_classes, hidden, 2 * latent_dim, &mut r),
            decoder: Mlp::new(feature_dim + latent_dim, hidden, num_classes, &mut r),
        };
        // Linear output layers start at zero: a fresh model predicts uniform
        // class probabilities from a standard-normal latent.
        model.latent_head.output = Dense::zeros(hidden, 2 * latent_dim);
        model.decoder.output = Dense::zeros(hidden, num_classes);
        Ok(model)
    }

    /// Model with all parameters zero.
    pub fn zeros(dims: NpDims) -> Self {
        NpModel {
            encoder: Mlp::zeros(dims.input_dim, dims.hidden, dims.feature_dim),
            latent_head: Mlp::zeros(dims.feature_dim + dims.num_classes, dims.hidden, 2 * dims.latent_dim),
            decoder: Mlp::zeros(dims.feature_dim + dims.latent_dim, dims.hidden, dims.num_classes),
        }
    }

    pub fn dims(&self) -> NpDims {
        NpDims {
            input_dim: self.encoder.inputs(),
            feature_dim: self.encoder.outputs(),
            latent_dim: self.latent_head.outputs() / 2,
            hidden: self.encoder.width(),
            num_classes: self.decoder.outputs(),
        }
    }

    /// Checks that the three networks chain together.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let ok = self.latent_head.inputs() == d.feature_dim + d.num_classes
            && self.latent_head.outputs().is_multiple_of(2)
            && self.decoder.inputs() == d.feature_dim + d.latent_dim
            && self.latent_head.width() == d.hidden
            && self.decoder.width() == d.hidden;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("network shapes do not chain".into()))
        }
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.encoder.forward(x)
    }

    pub fn encode_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        self.encoder.forward_cached(x)
    }

    /// One-hot class distributions for `labels`.
    pub fn one_hot(&self, labels: &[usize]) -> Result<DMatrix<f64>> {
        one_hot(labels, self.dims().num_classes)
    }

    pub fn posterior_from_context(&self, ctx: &Context) -> Result<LatentPosterior> {
        Ok(self.posterior_cached(ctx)?.0)
    }

    pub fn posterior_cached(&self, ctx: &Context) -> Result<(LatentPosterior, PosteriorCache)> {
        let d = self.dims();
        if ctx.is_empty() {
            return Err(Error::Empty("context"));
        }
        if ctx.features.ncols() != d.feature_dim || ctx.probs.ncols() != d.num_classes {
            return Err(Error::ShapeMismatch {
                context: "context records",
                expected: (ctx.len(), d.feature_dim + d.num_classes),
                found: (ctx.len(), ctx.features.ncols() + ctx.probs.ncols()),
            });
        }
        let (out, head) = self.latent_head.forward_cached(&ctx.aggregate())?;
        let l = d.latent_dim;
        let mean: Vec<f64> = (0..l).map(|j| out[(0, j)]).collect();
        let raw_log_var: Vec<f64> = (0..l).map(|j| out[(0, l + j)]).collect();
        if mean.iter().chain(&raw_log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent head output"));
        }
        let log_var: Vec<f64> = raw_log_var
            .iter()
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect();
        let post = LatentPosterior::new(mean, log_var)?;
        let var = post.var();
        Ok((
            post,
            PosteriorCache {
                head,
                raw_log_var,
                var,
                rows: ctx.len(),
            },
        ))
    }

    /// Latent-head gradients and the gradient with respect to every context
    /// feature row, given gradients with respect to the posterior mean and
    /// variance.
    pub fn posterior_backward(
        &self,
        cache: &PosteriorCache,
        d_mean: &[f64],
        d_var: &[f64],
    ) -> Result<(Mlp, DMatrix<f64>)> {
        let l = self.dims().latent_dim;
        if d_mean.len() != l || d_var.len() != l {
            return Err(Error::DimensionMismatch {
                context: "posterior backward",
                expected: l,
                found: d_mean.len().min(d_var.len()),
            });
        }
        let mut upstream = DMatrix::zeros(1, 2 * l);
        for j in 0..l {
            upstream[(0, j)] = d_mean[j];
            let inside = cache.raw_log_var[j].abs() <= LOG_VAR_CLAMP;
            upstream[(0, l + j)] = if inside { d_var[j] * cache.var[j] } else { 0.0 };
        }
        let (grads, d_agg) = self.latent_head.backward(&cache.head, &upstream)?;
        let f = self.dims().feature_dim;
        let scale = 1.0 / cache.rows as f64;
        let d_features = DMatrix::from_fn(cache.rows, f, |_, j| d_agg[(0, j)] * scale);
        Ok((grads, d_features))
    }

    /// Decoder logits for every `(sample, target)` pair; row `t * n + i`
    /// decodes `[features_i, z_{t*n+i}]`.
    pub fn decode_cached(
        &self,
        features: &DMatrix<f64>,
        z: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DecodeCache)> {
        let d = self.dims();
        let n = features.nrows();
        if features.ncols() != d.feature_dim || z.ncols() != d.latent_dim || n == 0 || !z.nrows().is_multiple_of(n) {
            return Err(Error::ShapeMismatch {
                context: "decoder input",
                expected: (z.nrows(), d.feature_dim + d.latent_dim),
                found: (z.nrows(), features.ncols() + z.ncols()),
            });
        }
        let samples = z.nrows() / n;
        let w = &self.decoder.hidden.weight;
        // The first layer splits into a feature part, computed once per
        // target, and a latent part, computed once per draw.
        let from_features = features * w.rows(0, d.feature_dim);
        let mut pre = z * w.rows(d.feature_dim, d.latent_dim);
        for t in 0..samples {
            let mut block = pre.rows_mut(t * n, n);
            block += &from_features;
        }
        add_row(&mut pre, &self.decoder.hidden.bias);
        let act = crate::nn::relu(&pre);
        let logits = self.decoder.output.apply(&act);
        Ok((
            logits,
            DecodeCache {
                features: features.clone(),
                z: z.clone(),
                pre,
                act,
                samples,
            },
        ))
    }

    /// Decoder gradients and the gradients with respect to the features
    /// (`n x F`) and the latents (`T n x L`).
    pub fn decode_backward(
        &self,
        cache: &DecodeCache,
        d_logits: &DMatrix<f64>,
    ) -> Result<(Mlp, DMatrix<f64>, DMatrix<f64>)> {
        if d_logits.shape() != (cache.act.nrows(), self.decoder.outputs()) {
            return Err(Error::ShapeMismatch {
                context: "decoder backward upstream",
                expected: (cache.act.nrows(), self.decoder.outputs()),
                found: d_logits.shape(),
            });
        }
        let d = self.dims();
        let n = cache.features.nrows();
        let out_w = cache.act.transpose() * d_logits;
        let out_b = column_sums(d_logits);
        let mut d_pre = d_logits * self.decoder.output.weight.transpose();
        relu_backward(&mut d_pre, &cache.pre);

        let mut d_from_features = DMatrix::zeros(n, d.hidden);
        for t in 0..cache.samples {
            d_from_features += d_pre.rows(t * n, n);
        }
        let w = &self.decoder.hidden.weight;
        let mut hidden_w = DMatrix::zeros(d.feature_dim + d.latent_dim, d.hidden);
        hidden_w
            .rows_mut(0, d.feature_dim)
            .copy_from(&(cache.features.transpose() * &d_from_features));
        hidden_w
            .rows_mut(d.feature_dim, d.latent_dim)
            .copy_from(&(cache.z.transpose() * &d_pre));
        let grads = Mlp {
            hidden: crate::nn::Dense {
                weight: hidden_w,
                bias: column_sums(&d_pre),
            },
            output: crate::nn::Dense {
                weight: out_w,
                bias: out_b,
            },
        };
        let d_features = d_from_features * w.rows(0, d.feature_dim).transpose();
        let d_z = d_pre * w.rows(d.feature_dim, d.latent_dim).transpose();
        Ok((grads, d_features, d_z))
    }

    /// Predictions for `targets` given a context: `samples` latent draws per
    /// target, decoded and averaged. `keys` identify the targets for noise
    /// derivation (usually dataset indices).
    pub fn predict(
        &self,
        targets: &DMatrix<f64>,
        keys: &[u64],
        ctx: &Context,
        samples: usize,
        seed: u64,
        kind: UncertaintyKind,
    ) -> Result<Vec<NpPrediction>> {
        if keys.len() != targets.nrows() {
            return Err(Error::DimensionMismatch {
                context: "prediction keys",
                expected: targets.nrows(),
                found: keys.len(),
            });
        }
        if samples == 0 {
            return Err(Error::InvalidParameter("latent sample count must be at least 1".into()));
        }
        if targets.nrows() == 0 {
            return Ok(Vec::new());
        }
        let features = self.encode(targets)?;
        let post = self.posterior_from_context(ctx)?;
        let latents = LatentSamples::draw(&post, keys, samples, seed)?;
        self.predict_from_latents(&features, &latents, kind)
    }

    /// Predictions from precomputed features and latent draws.
    pub fn predict_from_latents(
        &self,
        features: &DMatrix<f64>,
        latents: &LatentSamples,
        kind: UncertaintyKind,
    ) -> Result<Vec<NpPrediction>> {
        let (logits, _) = self.decode_cached(features, &latents.z)?;
        let probs = softmax_rows(&logits);
        let n = features.nrows();
        let c = self.dims().num_classes;
        (0..n)
            .map(|i| {
                let p = DMatrix::from_fn(latents.samples, c, |t, k| probs[(t * n + i, k)]);
                NpPrediction::from_probs(p, kind)
            })
            .collect()
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<DMatrix<f64>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(DMatrix::from_fn(labels.len(), num_classes, |i, k| {
        if labels[i] == k {
            1.0
        } else {
            0.0
        }
    }))
}
