//! `npmatch grad-check`: analytic gradients of the network, the NP model and
//! both training losses against central finite differences.

use nalgebra::DMatrix;
use npmatch::gaussian::SkewParameter;
use npmatch::nn::{finite_difference_gradient, worst_relative_error, Mlp, ParamSet};
use npmatch::np::{BankRecord, Context, LatentSamples, MemoryBank, NpDims, NpModel};
use npmatch::rng::{self, derive_seed};
use npmatch::ssl::{elbo_loss, total_loss, LabeledBatch, LossInputs, PseudoLabeled};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub params: usize,
    pub worst_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub tolerance: f64,
    pub suites: Vec<SuiteResult>,
    pub worst_rel_error: f64,
    pub passed: bool,
}

const DIMS: NpDims = NpDims {
    input_dim: 2,
    feature_dim: 4,
    latent_dim: 3,
    hidden: 5,
    num_classes: 3,
};

/// A model with every parameter perturbed, so no gradient path starts at
/// an exactly-zero layer.
pub fn toy_model(seed: u64) -> Result<NpModel> {
    let mut m = NpModel::new(DIMS, seed)?;
    let mut r = rng::rng_for(seed, &[1]);
    for t in m.tensors_mut() {
        t.apply(|v| *v += r.random_range(-0.4..0.4));
    }
    Ok(m)
}

fn uniform(rows: usize, cols: usize, r: &mut rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.5..1.5))
}

pub fn toy_bank(seed: u64) -> Result<MemoryBank> {
    let mut bank = MemoryBank::init(4, DIMS.feature_dim, DIMS.num_classes, seed)?;
    let mut r = rng::rng_for(seed, &[2]);
    let records: Vec<BankRecord> = (0..2)
        .map(|i| BankRecord {
            feature: (0..DIMS.feature_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            probs: (0..DIMS.num_classes).map(|k| if k == i { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    bank.push(records)?;
    Ok(bank)
}

pub fn toy_batch(r: &mut rng::Rng) -> LabeledBatch {
    LabeledBatch {
        x: uniform(5, 2, r),
        labels: vec![0, 2, 1, 1, 0],
        context: vec![3, 0],
        target: vec![1, 4, 2],
    }
}

pub fn toy_pseudo(r: &mut rng::Rng) -> PseudoLabeled {
    PseudoLabeled {
        x: uniform(3, 2, r),
        labels: vec![1, 0, 2],
        keys: vec![4, 0, 2],
        batch_size: 5,
    }
}

fn suite<P: ParamSet>(name: &str, analytic: &P, numeric: &P) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        params: analytic.num_params(),
        worst_rel_error: worst_relative_error(analytic, numeric),
    }
}

fn mlp_suite(seed: u64) -> Result<SuiteResult> {
    let mut r = rng::rng_for(seed, &[10]);
    let net = Mlp::new(3, 6, 4, &mut r);
    let x = uniform(5, 3, &mut r);
    let coef = uniform(5, 4, &mut r);
    let (_, cache) = net.forward_cached(&x)?;
    let (analytic, _) = net.backward(&cache, &coef)?;
    let numeric = finite_difference_gradient(&net, STEP, |n| {
        n.forward(&x).map(|y| y.component_mul(&coef).sum()).unwrap_or(f64::NAN)
    });
    Ok(suite("mlp", &analytic, &numeric))
}

/// Linear functional of the decoded logits, through encoder, posterior and
/// reparameterized latents.
fn np_loss(m: &NpModel, xc: &DMatrix<f64>, labels: &[usize], xt: &DMatrix<f64>, eps: &DMatrix<f64>, coef: &DMatrix<f64>) -> Result<f64> {
    let ctx = Context::new(m.encode(xc)?, m.one_hot(labels)?)?;
    let post = m.posterior_from_context(&ctx)?;
    let lat = LatentSamples::from_noise(&post, eps.clone(), eps.nrows() / xt.nrows(), xt.nrows());
    let (logits, _) = m.decode_cached(&m.encode(xt)?, &lat.z)?;
    Ok(logits.component_mul(coef).sum())
}

fn np_suite(seed: u64) -> Result<SuiteResult> {
    let model = toy_model(derive_seed(seed, &[20]))?;
    let mut r = rng::rng_for(seed, &[21]);
    let xc = uniform(4, 2, &mut r);
    let labels = [0, 2, 1, 2];
    let xt = uniform(3, 2, &mut r);
    let samples = 2;
    let eps = DMatrix::from_fn(samples * 3, DIMS.latent_dim, |_, _| r.sample(StandardNormal));
    let coef = uniform(samples * 3, DIMS.num_classes, &mut r);

    let (fc, enc_c) = model.encode_cached(&xc)?;
    let ctx = Context::new(fc, model.one_hot(&labels)?)?;
    let (post, pcache) = model.posterior_cached(&ctx)?;
    let lat = LatentSamples::from_noise(&post, eps.clone(), samples, 3);
    let (ft, enc_t) = model.encode_cached(&xt)?;
    let (_, dcache) = model.decode_cached(&ft, &lat.z)?;
    let (g_dec, d_ft, d_z) = model.decode_backward(&dcache, &coef)?;
    let (d_mean, d_var) = lat.backward(&post, &d_z);
    let (g_head, d_fc) = model.posterior_backward(&pcache, &d_mean, &d_var)?;
    let (mut g_enc, _) = model.encoder.backward(&enc_t, &d_ft)?;
    let (g_enc_c, _) = model.encoder.backward(&enc_c, &d_fc)?;
    g_enc.add_scaled(&g_enc_c, 1.0);
    let analytic = NpModel {
        encoder: g_enc,
        latent_head: g_head,
        decoder: g_dec,
    };
    let numeric = finite_difference_gradient(&model, STEP, |m| {
        np_loss(m, &xc, &labels, &xt, &eps, &coef).unwrap_or(f64::NAN)
    });
    Ok(suite("np_model", &analytic, &numeric))
}

fn elbo_suite(seed: u64) -> Result<SuiteResult> {
    let model = toy_model(derive_seed(seed, &[30]))?;
    let mut r = rng::rng_for(seed, &[31]);
    let batch = toy_batch(&mut r);
    let bank = toy_bank(derive_seed(seed, &[32]))?;
    let banks = [&bank];
    let (_, analytic) = elbo_loss(&model, &batch, &banks, 3, seed)?;
    let numeric = finite_difference_gradient(&model, STEP, |m| {
        elbo_loss(m, &batch, &banks, 3, seed).map(|(t, _)| t.total).unwrap_or(f64::NAN)
    });
    Ok(suite("elbo_loss", &analytic, &numeric))
}

fn total_suite(seed: u64) -> Result<SuiteResult> {
    let model = toy_model(derive_seed(seed, &[40]))?;
    let mut r = rng::rng_for(seed, &[41]);
    let batch = toy_batch(&mut r);
    let pseudo = toy_pseudo(&mut r);
    let bank_a = toy_bank(derive_seed(seed, &[42]))?;
    let bank_b = toy_bank(derive_seed(seed, &[43]))?;
    let banks = [&bank_a, &bank_b];
    let inputs = LossInputs {
        labeled: &batch,
        pseudo: Some(&pseudo),
        banks: &banks,
        alpha_u: SkewParameter::new(r.random_range(0.05..0.95))?,
        supervised_scale: 1.0,
        samples: 3,
        lambda_u: 0.7,
        beta: 0.5,
        noise_seed: seed,
    };
    let (_, analytic) = total_loss(&model, &inputs)?;
    let numeric = finite_difference_gradient(&model, STEP, |m| {
        total_loss(m, &inputs).map(|(t, _)| t.total).unwrap_or(f64::NAN)
    });
    Ok(suite("total_loss", &analytic, &numeric))
}

pub fn run(seed: u64) -> Result<GradReport> {
    let suites = vec![mlp_suite(seed)?, np_suite(seed)?, elbo_suite(seed)?, total_suite(seed)?];
    let worst = suites.iter().map(|s| s.worst_rel_error).fold(0.0, |a, b| if b.is_nan() || b > a { b } else { a });
    Ok(GradReport {
        seed,
        tolerance: TOLERANCE,
        passed: suites.iter().all(|s| s.worst_rel_error < TOLERANCE),
        suites,
        worst_rel_error: worst,
    })
}
