use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::select_rows;
use crate::error::{Error, Result};
use crate::gaussian::grad::{js_geometric_diag, kl_diag};
use crate::gaussian::{kl, Gaussian, SkewParameter};
use crate::nn::ParamSet;
use crate::np::{Context, LatentPosterior, LatentSamples, MemoryBank, NpModel};
use crate::rng::derive_seed;

const TAG_TARGET_NOISE: u64 = 1;
const TAG_UNLABELED_NOISE: u64 = 2;

/// A labeled batch with its context/target partition, given as row
/// positions into `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

impl LabeledBatch {
    fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if self.labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "labeled batch labels",
                expected: n,
                found: self.labels.len(),
            });
        }
        if self.context.is_empty() {
            return Err(Error::Empty("context split"));
        }
        if self.target.is_empty() {
            return Err(Error::Empty("target split"));
        }
        if self.context.iter().chain(&self.target).any(|&i| i >= n) {
            return Err(Error::InvalidParameter("split position out of range".into()));
        }
        Ok(())
    }
}

/// Strong views of the selected unlabeled samples with their pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Noise keys for latent sampling, one per row.
    pub keys: Vec<u64>,
    /// Size of the unlabeled batch the samples were selected from; the
    /// unlabeled loss is averaged over it.
    pub batch_size: usize,
}

pub struct LossInputs<'a> {
    pub labeled: &'a LabeledBatch,
    pub pseudo: Option<&'a PseudoLabeled>,
    /// Extra context records shared by every posterior.
    pub banks: &'a [&'a MemoryBank],
    pub alpha_u: SkewParameter,
    /// Multiplies the supervised terms (reconstruction and KL).
    pub supervised_scale: f64,
    pub samples: usize,
    pub lambda_u: f64,
    pub beta: f64,
    pub noise_seed: u64,
}

/// Weighted loss terms; `total` is their sum in field order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Target cross-entropy averaged over latent samples, summed over targets.
    pub recon: f64,
    /// `KL(q(z | context and targets) || q(z | context))`.
    pub kl: f64,
    /// `lambda_u` times the unlabeled cross-entropy.
    pub unlabeled: f64,
    /// `beta` times the skew-geometric JS between the two posteriors.
    pub js: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// The ELBO objective for given pieces: expected target log-likelihood
/// minus `KL(q_target || q_context)`.
pub fn elbo_objective(expected_loglik: f64, q_target: &Gaussian, q_context: &Gaussian) -> Result<f64> {
    Ok(expected_loglik - kl(q_target, q_context)?)
}

/// Negative ELBO of the labeled batch and its parameter gradient.
pub fn elbo_loss(
    model: &NpModel,
    batch: &LabeledBatch,
    banks: &[&MemoryBank],
    samples: usize,
    noise_seed: u64,
) -> Result<(ElboTerms, NpModel)> {
    let inputs = LossInputs {
        labeled: batch,
        pseudo: None,
        banks,
        alpha_u: SkewParameter::half(),
        supervised_scale: 1.0,
        samples,
        lambda_u: 0.0,
        beta: 0.0,
        noise_seed,
    };
    let (t, g) = total_loss(model, &inputs)?;
    Ok((
        ElboTerms {
            recon: t.recon,
            kl: t.kl,
            total: t.total,
        },
        g,
    ))
}

/// Summed softmax cross-entropy over the rows of `logits` (row `t * n + i`
/// has label `labels[i]`), with the gradient `softmax - onehot` per row.
fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = labels.len();
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (r, mut row) in grad.row_iter_mut().enumerate() {
        let y = labels[r % n];
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        total += s.ln() + m - logits[(r, y)];
        row /= s;
        row[y] -= 1.0;
    }
    (total, grad)
}

fn scatter_rows(dst: &mut DMatrix<f64>, src: &DMatrix<f64>, positions: &[usize]) {
    for (r, &p) in positions.iter().enumerate() {
        let mut row = dst.row_mut(p);
        row += src.row(r);
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

struct PosteriorGrad {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PosteriorGrad {
    fn zeros(l: usize) -> Self {
        PosteriorGrad {
            mean: vec![0.0; l],
            var: vec![0.0; l],
        }
    }
}

/// Total training loss and its parameter gradient:
/// negative ELBO on the labeled batch, plus the weighted cross-entropy of
/// the pseudo-labeled strong views, plus `beta * JS(q_context, q_all)`.
///
/// The pseudo-labeled targets draw their latents from the posterior given
/// the whole labeled batch and the banks.
pub fn total_loss(model: &NpModel, inputs: &LossInputs<'_>) -> Result<(LossTerms, NpModel)> {
    let batch = inputs.labeled;
    batch.validate()?;
    if inputs.samples == 0 {
        return Err(Error::InvalidParameter("latent sample count must be at least 1".into()));
    }
    let dims = model.dims();
    let t = inputs.samples as f64;
    let mut grads = model.zeros_like();

    let (f, enc_cache) = model.encode_cached(&batch.x)?;
    let y = model.one_hot(&batch.labels)?;
    let mut d_f = DMatrix::zeros(f.nrows(), dims.feature_dim);

    let all: Vec<usize> = batch.context.iter().chain(&batch.target).copied().collect();
    let ctx_c = Context::with_banks(select_rows(&f, &batch.context), select_rows(&y, &batch.context), inputs.banks)?;
    let ctx_a = Context::with_banks(select_rows(&f, &all), select_rows(&y, &all), inputs.banks)?;
    let (q_c, cache_c) = model.posterior_cached(&ctx_c)?;
    let (q_a, cache_a) = model.posterior_cached(&ctx_a)?;
    let mut dq_c = PosteriorGrad::zeros(dims.latent_dim);
    let mut dq_a = PosteriorGrad::zeros(dims.latent_dim);

    // Reconstruction of the targets under latents from q(z | all).
    let target_labels: Vec<usize> = batch.target.iter().map(|&i| batch.labels[i]).collect();
    let keys: Vec<u64> = batch.target.iter().map(|&i| i as u64).collect();
    let seed = derive_seed(inputs.noise_seed, &[TAG_TARGET_NOISE]);
    let sup = inputs.supervised_scale;
    let recon = (sup / t) * decode_term(
        model,
        &q_a,
        &select_rows(&f, &batch.target),
        &target_labels,
        &keys,
        inputs.samples,
        seed,
        sup / t,
        &mut grads,
        &mut dq_a,
        |d_ft| scatter_rows(&mut d_f, d_ft, &batch.target),
    )?;

    let klg = kl_diag(q_a.mean(), &q_a.var(), q_c.mean(), &q_c.var())?;
    let kl_term = sup * klg.value;
    add_into(&mut dq_a.mean, &klg.first.mean, sup);
    add_into(&mut dq_a.var, &klg.first.var, sup);
    add_into(&mut dq_c.mean, &klg.second.mean, sup);
    add_into(&mut dq_c.var, &klg.second.var, sup);

    let mut unlabeled = 0.0;
    if let Some(p) = inputs.pseudo.filter(|p| inputs.lambda_u > 0.0 && !p.labels.is_empty()) {
        if p.x.nrows() != p.labels.len() || p.keys.len() != p.labels.len() {
            return Err(Error::DimensionMismatch {
                context: "pseudo-labeled batch",
                expected: p.x.nrows(),
                found: p.labels.len().min(p.keys.len()),
            });
        }
        if p.batch_size < p.labels.len() {
            return Err(Error::InvalidParameter("unlabeled batch smaller than its selection".into()));
        }
        let (fs, enc_s) = model.encode_cached(&p.x)?;
        let scale = inputs.lambda_u / (t * p.batch_size as f64);
        let seed = derive_seed(inputs.noise_seed, &[TAG_UNLABELED_NOISE]);
        let mut d_fs = DMatrix::zeros(0, 0);
        let ce = decode_term(
            model, &q_a, &fs, &p.labels, &p.keys, inputs.samples, seed, scale, &mut grads, &mut dq_a,
            |g| d_fs = g.clone(),
        )?;
        unlabeled = scale * ce;
        let (g_enc, _) = model.encoder.backward(&enc_s, &d_fs)?;
        grads.encoder.add_scaled(&g_enc, 1.0);
    }

    let mut js = 0.0;
    if inputs.beta > 0.0 {
        let jsg = js_geometric_diag(q_c.mean(), &q_c.var(), q_a.mean(), &q_a.var(), inputs.alpha_u)?;
        js = inputs.beta * jsg.value;
        add_into(&mut dq_c.mean, &jsg.first.mean, inputs.beta);
        add_into(&mut dq_c.var, &jsg.first.var, inputs.beta);
        add_into(&mut dq_a.mean, &jsg.second.mean, inputs.beta);
        add_into(&mut dq_a.var, &jsg.second.var, inputs.beta);
    }

    for (cache, dq, rows) in [(&cache_a, &dq_a, &all), (&cache_c, &dq_c, &batch.context)] {
        let (g_head, d_ctx) = model.posterior_backward(cache, &dq.mean, &dq.var)?;
        grads.latent_head.add_scaled(&g_head, 1.0);
        scatter_rows(&mut d_f, &d_ctx.rows(0, rows.len()).into_owned(), rows);
    }
    let (g_enc, _) = model.encoder.backward(&enc_cache, &d_f)?;
    grads.encoder.add_scaled(&g_enc, 1.0);

    let terms = LossTerms {
        recon,
        kl: kl_term,
        unlabeled,
        js,
        total: recon + kl_term + unlabeled + js,
    };
    Ok((terms, grads))
}

/// Raw summed cross-entropy of decoding `features` with latents drawn from
/// `post`. Accumulates `scale` times its gradient into the decoder
/// gradients and `dq`, and hands the feature gradient to `d_features`.
#[allow(clippy::too_many_arguments)]
fn decode_term(
    model: &NpModel,
    post: &LatentPosterior,
    features: &DMatrix<f64>,
    labels: &[usize],
    keys: &[u64],
    samples: usize,
    seed: u64,
    scale: f64,
    grads: &mut NpModel,
    dq: &mut PosteriorGrad,
    d_features: impl FnOnce(&DMatrix<f64>),
) -> Result<f64> {
    let lat = LatentSamples::draw(post, keys, samples, seed)?;
    let (logits, cache) = model.decode_cached(features, &lat.z)?;
    let (ce, mut d_logits) = cross_entropy(&logits, labels);
    d_logits *= scale;
    let (g_dec, d_ft, d_z) = model.decode_backward(&cache, &d_logits)?;
    grads.decoder.add_scaled(&g_dec, 1.0);
    let (dm, dv) = lat.backward(post, &d_z);
    add_into(&mut dq.mean, &dm, 1.0);
    add_into(&mut dq.var, &dv, 1.0);
    d_features(&d_ft);
    Ok(ce)
}
