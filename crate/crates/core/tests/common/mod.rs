//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tdgrpc::envs::ActionBox;
use tdgrpc::grpc::{ConstraintConfig, PolicyBatch, PolicyHead};
use tdgrpc::nn::Tensor;
use tdgrpc::planner::ScoredTrajectory;
use tdgrpc::replay::{Segment, Transition};
use tdgrpc::world_model::{ModelConfig, SegmentBatch, WorldModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Small model with every parameter (targets included) drawn at random so
/// no gradient is trivially zero.
pub fn random_model(rng: &mut ChaCha8Rng, state_dim: usize, action_dim: usize, latent_dim: usize) -> WorldModel {
    let cfg = ModelConfig {
        latent_dim,
        hidden_sizes: vec![6],
        ..ModelConfig::default()
    };
    let mut m = WorldModel::new(state_dim, ActionBox::symmetric(action_dim, 2.0), cfg, 0.9, rng).unwrap();
    for t in m.model_tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 * normal(rng));
    }
    for t in m.policy_tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.3 * normal(rng));
    }
    for t in m.value_target.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 * normal(rng));
    }
    m
}

/// `count` contiguous random segments of `horizon` steps.
pub fn random_segments(rng: &mut ChaCha8Rng, count: usize, horizon: usize, ds: usize, da: usize) -> Vec<Segment> {
    (0..count)
        .map(|k| {
            let mut s: Vec<f64> = (0..ds).map(|_| normal(rng)).collect();
            (0..horizon)
                .map(|_| {
                    let next: Vec<f64> = (0..ds).map(|_| normal(rng)).collect();
                    let t = Transition {
                        state: s.clone(),
                        action: (0..da).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        reward: normal(rng),
                        next_state: next.clone(),
                        done: false,
                        episode_id: k as u64,
                    };
                    s = next;
                    t
                })
                .collect()
        })
        .collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, count: usize, horizon: usize, ds: usize, da: usize) -> SegmentBatch {
    SegmentBatch::from_segments(&random_segments(rng, count, horizon, ds, da)).unwrap()
}

/// Random policy batch with strictly positive, non-uniform advantages.
pub fn random_policy_batch(rng: &mut ChaCha8Rng, b: usize, g: usize, h: usize, dz: usize, da: usize) -> PolicyBatch {
    let mut batch = PolicyBatch {
        group_size: g,
        latents: vec![],
        actions: vec![],
        advantages: vec![],
        prior_mean: vec![],
        prior_log_std: vec![],
        noise: vec![],
    };
    for _ in 0..h {
        batch.latents.push(randn(rng, b, dz, 1.0));
        batch.actions.push(randn(rng, b * g, da, 1.0));
        let adv: Vec<f64> = (0..b * g).map(|_| rng.random_range(0.05..1.0)).collect();
        batch.advantages.push(Tensor::matrix(b * g, 1, adv).unwrap());
        batch.prior_mean.push(randn(rng, b, da, 1.5));
        batch.prior_log_std.push(randn(rng, b, da, 0.3));
        batch.noise.push(randn(rng, b, da, 1.0));
    }
    batch
}

/// Central finite differences of `f` with respect to every entry of the
/// flat parameter vector.
pub fn finite_diff(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = f(&p);
            p[i] = x - h;
            let down = f(&p);
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor)
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn flatten(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten(ts: &mut [&mut Tensor], flat: &[f64]) {
    let mut off = 0;
    for t in ts.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Worst relative error between reverse-mode and finite-difference
/// gradients of the model objective, with targets held fixed.
pub fn model_grad_error(model: &WorldModel, batch: &SegmentBatch) -> f64 {
    let (_, grads) = model.model_loss_and_grads(batch).unwrap();
    let analytic: Vec<f64> = grads.model.iter().flat_map(|t| t.data().iter().copied()).collect();
    let targets = model.model_targets(batch).unwrap();
    let base = flatten(&model.model_tensors());
    let mut probe = model.clone();
    let numeric = finite_diff(&base, 1e-5, |p| {
        unflatten(&mut probe.model_tensors_mut(), p);
        probe.model_loss_with_targets(batch, &targets).unwrap().total
    });
    rel_err(&analytic, &numeric, 1e-8)
}

pub fn policy_grad_error(model: &WorldModel, batch: &PolicyBatch, cfg: &ConstraintConfig, eps: f64) -> f64 {
    let (_, grads) = tdgrpc::grpc::policy_loss_and_grads(PolicyHead::of(model), batch, cfg, eps).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    let base = flatten(&model.policy_tensors());
    let mut probe = model.clone();
    let numeric = finite_diff(&base, 1e-5, |p| {
        unflatten(&mut probe.policy_tensors_mut(), p);
        tdgrpc::grpc::policy_loss_value(PolicyHead::of(&probe), batch, cfg, eps)
            .unwrap()
            .total
    });
    rel_err(&analytic, &numeric, 1e-8)
}

/// Weighted mean and population std per entry, written out longhand.
pub fn brute_moments(elites: &[ScoredTrajectory], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let best = elites.iter().map(|e| e.phi).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = elites.iter().map(|e| (temperature * (e.phi - best)).exp()).collect();
    let total: f64 = w.iter().sum();
    let len = elites[0].actions.len();
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for j in 0..len {
        let mut m = 0.0;
        for (e, wi) in elites.iter().zip(&w) {
            m += wi * e.actions.data()[j];
        }
        m /= total;
        let mut v = 0.0;
        for (e, wi) in elites.iter().zip(&w) {
            let d = e.actions.data()[j] - m;
            v += wi * d * d;
        }
        mean[j] = m;
        std[j] = (v / total).sqrt();
    }
    (mean, std)
}

/// `∫ p log(p/q)` for 1-D Gaussians by composite Simpson on ±12σ_p.
pub fn kl_quadrature(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
    let pdf = |x: f64, m: f64, s: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let logpdf = |x: f64, m: f64, s: f64| -(x - m) * (x - m) / (2.0 * s * s) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let (lo, hi) = (mp - 12.0 * sp, mp + 12.0 * sp);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| pdf(x, mp, sp) * (logpdf(x, mp, sp) - logpdf(x, mq, sq));
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let x = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}
