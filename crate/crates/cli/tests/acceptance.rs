//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.
//!
//! Run alone with `cargo test -p npmatch-cli --test acceptance`.

use std::collections::VecDeque;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use npmatch::data::DataConfig;
use npmatch::gaussian::{
    geometric_mean, js_geometric, js_geometric_dual, js_geometric_dual_via_kl, js_geometric_via_kl,
    log_pdf, mc_divergence, DivergenceKind, Gaussian, SkewParameter,
};
use npmatch::np::{BankRecord, Context, NpPrediction, UncertaintyKind};
use npmatch::rng::{derive_seed, rng_for};
use npmatch::ssl::{elbo_objective, select_pseudo_labels, train, BankId, TrainConfig, TrainObserver, Trainer};
use npmatch_cli::divergence::{self, random_pair, DivergenceCheck};
use npmatch_cli::gradcheck;
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_instance(seed: u64) -> (Gaussian, Gaussian, SkewParameter) {
    let mut r = rng_for(seed, &[7]);
    let dim = r.random_range(1..=4);
    let alpha = SkewParameter::new(r.random_range(0.01..0.99)).unwrap();
    let (g1, g2) = random_pair(dim, seed).unwrap();
    (g1, g2, alpha)
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// log of the unnormalized weighted product minus log_pdf of the geometric
/// mean, over probe points: its spread must vanish.
fn geometric_mean_spread() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for pair in 0..100u64 {
        let dim = [1, 2, 4][(pair % 3) as usize];
        let (g1, g2) = random_pair(dim, derive_seed(1, &[pair])).unwrap();
        let mut r = rng_for(1, &[pair, 1]);
        let a = SkewParameter::new(r.random_range(0.01..0.99)).unwrap();
        let gm = geometric_mean(&g1, &g2, a).unwrap();
        let diffs: Vec<f64> = (0..100)
            .map(|_| {
                let x = DVector::from_fn(dim, |_, _| r.random_range(-3.0..3.0));
                let product = (1.0 - a.value()) * log_pdf(&g1, &x).unwrap() + a.value() * log_pdf(&g2, &x).unwrap();
                product - log_pdf(&gm, &x).unwrap()
            })
            .collect();
        let (lo, hi) = diffs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &d| (l.min(d), h.max(d)));
        worst = worst.max(hi - lo);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("max spread {worst:.2e} over 100 pairs x 100 probes, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn closed_form_vs_oracle() -> Outcome {
    let start = Instant::now();
    let report = divergence::run(&DivergenceCheck::default()).unwrap();
    let worst_z = report.rows.iter().map(|r| r.z).fold(0.0, f64::max);

    let g1 = Gaussian::scalar(0.0, 1.0).unwrap();
    let g2 = Gaussian::scalar(2.0, 1.0).unwrap();
    let half = SkewParameter::half();
    let js = js_geometric(&g1, &g2, half).unwrap();
    let dual = js_geometric_dual(&g1, &g2, half).unwrap();
    let js_mc = mc_divergence(&g1, &g2, half, DivergenceKind::Js, 1_000_000, 3).unwrap().value;
    let dual_mc = mc_divergence(&g1, &g2, half, DivergenceKind::JsDual, 1_000_000, 4).unwrap().value;
    let hand_ok = (js - 0.5).abs() <= 1e-10
        && (dual - 0.5).abs() <= 1e-10
        && (js_mc - 0.5).abs() <= 0.01
        && (dual_mc - 0.5).abs() <= 0.01;
    let elapsed = start.elapsed();
    outcome(
        report.passed() && hand_ok && elapsed < Duration::from_secs(120),
        format!(
            "{}/{} comparisons within 3 SE (max z {worst_z:.2}); hand case js {js:.12} dual {dual:.12} mc {js_mc:.4}/{dual_mc:.4}; {:.1}s",
            report.rows.len() - report.failures(),
            report.rows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn composition_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let (g1, g2, a) = random_instance(derive_seed(3, &[i]));
        worst = worst.max(rel(js_geometric(&g1, &g2, a).unwrap(), js_geometric_via_kl(&g1, &g2, a).unwrap()));
        worst = worst.max(rel(
            js_geometric_dual(&g1, &g2, a).unwrap(),
            js_geometric_dual_via_kl(&g1, &g2, a).unwrap(),
        ));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("max relative gap {worst:.2e} over 1000 instances, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn skew_symmetry() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let (g1, g2, a) = random_instance(derive_seed(4, &[i]));
        let b = a.complement();
        worst = worst.max((js_geometric(&g1, &g2, a).unwrap() - js_geometric(&g2, &g1, b).unwrap()).abs());
        worst = worst.max((js_geometric_dual(&g1, &g2, a).unwrap() - js_geometric_dual(&g2, &g1, b).unwrap()).abs());
    }
    outcome(worst <= 1e-12, format!("max asymmetry {worst:.2e} over 1000 instances"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all = true;
    for seed in 0..20 {
        let report = gradcheck::run(seed).unwrap();
        all &= report.passed;
        worst = worst.max(report.worst_rel_error);
    }
    let elapsed = start.elapsed();
    outcome(
        all && worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over 20 seeds, {:.1}s", elapsed.as_secs_f64()),
    )
}

/// y_i = w x_i + noise with w ~ N(0, 1), noise ~ N(0, s2).
struct LinearGaussian {
    x: Vec<f64>,
    y: Vec<f64>,
    s2: f64,
}

impl LinearGaussian {
    fn posterior(&self, idx: &[usize]) -> Gaussian {
        let precision = 1.0 + idx.iter().map(|&i| self.x[i] * self.x[i]).sum::<f64>() / self.s2;
        let mean = idx.iter().map(|&i| self.x[i] * self.y[i]).sum::<f64>() / self.s2 / precision;
        Gaussian::scalar(mean, 1.0 / precision).unwrap()
    }

    /// Exact log p(y_idx | x_idx): y ~ N(0, s2 I + x x^T).
    fn log_marginal(&self, idx: &[usize]) -> f64 {
        let n = idx.len();
        let cov = DMatrix::from_fn(n, n, |a, b| {
            self.x[idx[a]] * self.x[idx[b]] + if a == b { self.s2 } else { 0.0 }
        });
        let y = DVector::from_fn(n, |a, _| self.y[idx[a]]);
        let g = Gaussian::full(DVector::zeros(n), cov).unwrap();
        log_pdf(&g, &y).unwrap()
    }

    /// E_q[sum_target log p(y_i | w, x_i)] for a scalar Gaussian q.
    fn expected_loglik(&self, q: &Gaussian, idx: &[usize]) -> f64 {
        let (m, v) = (q.mean()[0], q.cov().to_full()[(0, 0)]);
        idx.iter()
            .map(|&i| {
                let r = self.y[i] - m * self.x[i];
                -0.5 * (2.0 * std::f64::consts::PI * self.s2).ln() - (r * r + v * self.x[i] * self.x[i]) / (2.0 * self.s2)
            })
            .sum()
    }
}

fn elbo_bound() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut strict = true;
    for seed in 0..20u64 {
        let mut r = rng_for(6, &[seed]);
        let n = 8;
        let w: f64 = r.random_range(-1.5..1.5);
        let s2: f64 = r.random_range(0.1..1.0);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|xi| w * xi + s2.sqrt() * r.random_range(-1.0..1.0)).collect();
        let toy = LinearGaussian { x, y, s2 };
        let context: Vec<usize> = (0..3).collect();
        let target: Vec<usize> = (3..n).collect();
        let all: Vec<usize> = (0..n).collect();

        let q_ctx = toy.posterior(&context);
        let q_all = toy.posterior(&all);
        let truth = toy.log_marginal(&all);
        let ctx_marginal = toy.log_marginal(&context);
        let bound = |q: &Gaussian| elbo_objective(toy.expected_loglik(q, &target), q, &q_ctx).unwrap() + ctx_marginal;
        let exact = bound(&q_all);
        worst_gap = worst_gap.max((exact - truth).abs());
        strict &= exact <= truth + 1e-6;
        let (m, v) = (q_all.mean()[0], q_all.cov().to_full()[(0, 0)]);
        for q in [
            Gaussian::scalar(m + 0.1, v).unwrap(),
            Gaussian::scalar(m, 1.5 * v).unwrap(),
            Gaussian::scalar(m - 0.05, 0.7 * v).unwrap(),
        ] {
            strict &= bound(&q) < exact;
        }
    }
    outcome(
        worst_gap <= 1e-6 && strict,
        format!("max |objective + log p(y_ctx) - log p(y_all)| {worst_gap:.2e} over 20 models; perturbed q strictly lower: {strict}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ssl_effect() -> Outcome {
    let start = Instant::now();
    let mut full = Vec::new();
    let mut supervised = Vec::new();
    for seed in 0..5 {
        let data = DataConfig::default().generate(seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let ablation = TrainConfig {
            lambda_u: 0.0,
            beta: 0.0,
            ..cfg.clone()
        };
        full.push(train(cfg, &data, &mut ()).unwrap().eval.accuracy);
        supervised.push(train(ablation, &data, &mut ()).unwrap().eval.accuracy);
    }
    let elapsed = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    let (m_full, m_sup) = (median(full.clone()), median(supervised.clone()));
    outcome(
        m_full >= m_sup + 0.05 && m_full >= 0.90 && elapsed < Duration::from_secs(300),
        format!(
            "median accuracy {m_full:.4} vs supervised-only {m_sup:.4} (need +0.05 and >= 0.90); per seed [{}] vs [{}]; {:.0}s",
            fmt(&full),
            fmt(&supervised),
            elapsed.as_secs_f64()
        ),
    )
}

fn gating_monotonicity() -> Outcome {
    let model = gradcheck::toy_model(8).unwrap();
    let mut r = rng_for(8, &[1]);
    let xc = DMatrix::from_fn(9, 2, |_, _| r.random_range(-1.5..1.5));
    let ctx = Context::new(model.encode(&xc).unwrap(), model.one_hot(&[0, 1, 2, 0, 1, 2, 0, 1, 2]).unwrap()).unwrap();
    let targets = DMatrix::from_fn(1000, 2, |_, _| r.random_range(-3.0..3.0));
    let keys: Vec<u64> = (0..1000).collect();
    let preds: Vec<NpPrediction> =
        model.predict(&targets, &keys, &ctx, 10, 8, UncertaintyKind::Entropy).unwrap();
    let taus_u: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let taus_c: Vec<f64> = (0..=49).map(|i| 0.5 + i as f64 * 0.01).collect();
    let mut checks = 0;
    let mut nested = true;
    let subset = |a: &[usize], b: &[usize]| a.iter().all(|i| b.binary_search(i).is_ok());
    for &tu in &taus_u {
        for w in taus_c.windows(2) {
            let loose = select_pseudo_labels(&preds, w[0], tu).indices;
            let strict = select_pseudo_labels(&preds, w[1], tu).indices;
            nested &= subset(&strict, &loose);
            checks += 1;
        }
    }
    for &tc in &taus_c {
        for w in taus_u.windows(2) {
            let strict = select_pseudo_labels(&preds, tc, w[0]).indices;
            let loose = select_pseudo_labels(&preds, tc, w[1]).indices;
            nested &= subset(&strict, &loose);
            checks += 1;
        }
    }
    let widest = select_pseudo_labels(&preds, 0.5, 1.0).len();
    let narrowest = select_pseudo_labels(&preds, 0.99, 0.1).len();
    outcome(
        nested && widest > narrowest,
        format!("{checks} adjacent grid pairs nested; selection ranges {narrowest}..{widest} of 1000"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_npmatch"))
            .args(["train", "--quiet", "--seed", "3", "--out-dir", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    outcome(a == b, format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

struct Shadow {
    queues: [VecDeque<BankRecord>; 2],
    capacity: usize,
    max_len: usize,
    evictions_match: bool,
}

impl TrainObserver for Shadow {
    fn on_bank_push(&mut self, bank: BankId, records: &[BankRecord], evicted: usize) {
        let q = &mut self.queues[bank as usize];
        let mut dropped = 0;
        for rec in records {
            q.push_back(rec.clone());
            if q.len() > self.capacity {
                q.pop_front();
                dropped += 1;
            }
        }
        self.evictions_match &= dropped == evicted;
        self.max_len = self.max_len.max(q.len());
    }
}

fn bank_contract() -> Outcome {
    let start = Instant::now();
    let data = DataConfig::default().generate(10).unwrap();
    let cfg = TrainConfig {
        seed: 10,
        t_max: 10_000,
        log_every: 10_000,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), &data).unwrap();
    let ids = [BankId::Labeled, BankId::Pseudo];
    let mut shadow = Shadow {
        queues: ids.map(|id| trainer.bank(id).records().cloned().collect()),
        capacity: cfg.bank_capacity,
        max_len: 0,
        evictions_match: true,
    };
    while !trainer.is_done() {
        trainer.step(&mut shadow).unwrap();
    }
    let mut ok = shadow.evictions_match && shadow.max_len <= cfg.bank_capacity;
    let mut detail = Vec::new();
    for (k, id) in ids.into_iter().enumerate() {
        let bank = trainer.bank(id);
        ok &= bank.len() <= cfg.bank_capacity;
        ok &= bank.records().eq(shadow.queues[k].iter());
        ok &= bank.total_pushed() - bank.total_evicted() == bank.len() as u64;
        detail.push(format!(
            "{id:?}: len {} pushed {} evicted {}",
            bank.len(),
            bank.total_pushed(),
            bank.total_evicted()
        ));
    }
    outcome(
        ok,
        format!("{} after {} steps (Q = {}), {:.0}s", detail.join("; "), trainer.iteration(), cfg.bank_capacity, start.elapsed().as_secs_f64()),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("geometric-mean correctness", geometric_mean_spread),
        ("closed form vs Monte-Carlo oracle", closed_form_vs_oracle),
        ("composition identity", composition_identity),
        ("skew symmetry", skew_symmetry),
        ("gradient suite", gradient_suite),
        ("ELBO bound on conjugate linear-Gaussian model", elbo_bound),
        ("desk-scale SSL effect on two-moons", ssl_effect),
        ("gating monotonicity", gating_monotonicity),
        ("training determinism", determinism),
        ("memory-bank FIFO contract", bank_contract),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
