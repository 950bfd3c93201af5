//! Group-relative policy update with a KL trust-region hinge.
//!
//! For every latent in a batch, G actions are drawn from the policy, pulled
//! into a band around the prior, scored by the value head and turned into
//! softmax advantages. The policy maximizes the advantage-weighted
//! log-likelihood while paying `β·max(KL − ε, 0)` for leaving the prior.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpParams, Tape, Tensor, Var};
use crate::planner::{compute_moments, ScoredTrajectory};
use crate::replay::Segment;
use crate::world_model::{gaussian_log_prob, LatentState, PolicyDistribution, WorldModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonSchedule {
    Fixed,
    /// Linear from `epsilon` to `final_epsilon` over `steps` policy updates.
    LinearDecay { final_epsilon: f64, steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(π ‖ prior)`
    PolicyToPrior,
    /// `KL(prior ‖ π)`
    PriorToPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Weighted moments of the sampled segments' buffered actions.
    BufferMoments,
    /// Frozen copy of the policy from before the current update.
    PreviousPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `β·max(KL − ε, 0)`
    KlHinge,
    /// `−β·log μ(ã)` for a reparameterized policy sample `ã` under the prior.
    LogMu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub epsilon_schedule: EpsilonSchedule,
    pub action_clip_threshold: f64,
    pub tau_adv: f64,
    pub kl_direction: KlDirection,
    pub prior: PriorSource,
    pub kind: ConstraintKind,
    /// Temperature of the return weights in the buffer prior; 0 weighs
    /// every segment equally.
    pub prior_temperature: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            epsilon: 0.1,
            epsilon_schedule: EpsilonSchedule::Fixed,
            action_clip_threshold: 3.0,
            tau_adv: 1.0,
            kl_direction: KlDirection::PolicyToPrior,
            prior: PriorSource::BufferMoments,
            kind: ConstraintKind::KlHinge,
            prior_temperature: 0.0,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("constraint: {m}")));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if let EpsilonSchedule::LinearDecay { final_epsilon, .. } = self.epsilon_schedule {
            if !(final_epsilon > 0.0 && final_epsilon.is_finite()) {
                return bad("final_epsilon must be > 0");
            }
        }
        if !(self.action_clip_threshold > 0.0) {
            return bad("action_clip_threshold must be > 0");
        }
        if !(self.tau_adv > 0.0 && self.tau_adv.is_finite()) {
            return bad("tau_adv must be > 0");
        }
        if !(self.prior_temperature >= 0.0 && self.prior_temperature.is_finite()) {
            return bad("prior_temperature must be >= 0");
        }
        Ok(())
    }

    /// Trust-region size after `update` policy updates.
    pub fn epsilon_at(&self, update: u64) -> f64 {
        match self.epsilon_schedule {
            EpsilonSchedule::Fixed => self.epsilon,
            EpsilonSchedule::LinearDecay { final_epsilon, steps } => {
                if steps == 0 || update >= steps {
                    final_epsilon
                } else {
                    let f = update as f64 / steps as f64;
                    self.epsilon + f * (final_epsilon - self.epsilon)
                }
            }
        }
    }
}

/// G candidate actions at one latent with their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub z: LatentState,
    /// `[G, d_a]`
    pub actions: Tensor,
    pub log_probs: Vec<f64>,
    pub q_values: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Per-step Gaussian prior, `[H, d_a]` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyPrior {
    pub mean: Tensor,
    pub std: Tensor,
}

/// `A_i = softmax(q / τ)_i`, computed with max subtraction.
pub fn softmax_advantages(q_values: &[f64], tau_adv: f64) -> Result<Vec<f64>> {
    if !(tau_adv > 0.0) {
        return Err(Error::InvalidArgument(format!("tau_adv must be > 0, got {tau_adv}")));
    }
    if q_values.is_empty() {
        return Err(Error::InvalidArgument("advantages need G >= 1".into()));
    }
    if q_values.iter().any(|q| !q.is_finite()) {
        return Err(Error::non_finite("q values for advantages"));
    }
    // Subtract before dividing: an exactly representable shift of q then
    // leaves every exponent bit-identical.
    let m = q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q_values.iter().map(|q| ((q - m) / tau_adv).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// `(q − mean) / (std + 1e-8)` with the population std.
pub fn std_norm_advantages(q_values: &[f64]) -> Result<Vec<f64>> {
    if q_values.len() < 2 {
        return Err(Error::InvalidArgument("standardized advantages need G >= 2".into()));
    }
    let n = q_values.len() as f64;
    let mean = q_values.iter().sum::<f64>() / n;
    let var = q_values.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(q_values.iter().map(|q| (q - mean) / (std + 1e-8)).collect())
}

/// Projects every entry whose standardized deviation from the prior exceeds
/// `c` onto `μ ± c·σ`. `actions` is `[n, d_a]`; `mean`/`std` are per-dim.
pub fn threshold_actions(actions: &Tensor, mean: &[f64], std: &[f64], c: f64) -> Tensor {
    let mut out = actions.clone();
    let rows = out.rows();
    for r in 0..rows {
        for ((a, m), s) in out.row_slice_mut(r).iter_mut().zip(mean).zip(std) {
            let dev = (*a - m) / s;
            if dev > c {
                *a = m + c * s;
            } else if dev < -c {
                *a = m - c * s;
            }
        }
    }
    out
}

/// Closed-form `KL(p ‖ q)` for diagonal Gaussians, summed over dimensions.
pub fn kl_gaussian(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape("kl_gaussian", p.dim(), q.dim()));
    }
    Ok((0..p.dim())
        .map(|d| kl_1d(p.mean[d], p.log_std[d], q.mean[d], q.log_std[d]))
        .sum())
}

fn kl_1d(mp: f64, lp: f64, mq: f64, lq: f64) -> f64 {
    let vp = (2.0 * lp).exp();
    let vq = (2.0 * lq).exp();
    lq - lp + (vp + (mp - mq) * (mp - mq)) / (2.0 * vq) - 0.5
}

/// `max(kl − ε, 0)`
pub fn policy_constraint_loss(kl: f64, epsilon: f64) -> f64 {
    (kl - epsilon).max(0.0)
}

/// `(1/G)·Σ A_i·log π(a_i | z)`; the quantity the policy maximizes.
pub fn grpo_loss(group: &GroupSample) -> f64 {
    let g = group.log_probs.len() as f64;
    group
        .advantages
        .iter()
        .zip(&group.log_probs)
        .map(|(a, l)| a * l)
        .sum::<f64>()
        / g
}

/// Per-step prior from the buffered actions of `segments`, weighting each
/// segment by `exp(τ·(φ − max φ))` with φ its discounted reward.
pub fn buffer_prior(segments: &[Segment], gamma: f64, temperature: f64, std_bounds: (f64, f64)) -> Result<PolicyPrior> {
    let elites: Vec<ScoredTrajectory> = segments
        .iter()
        .map(|seg| {
            let da = seg[0].action.len();
            let actions = Tensor::new(
                vec![seg.len(), da],
                seg.iter().flat_map(|t| t.action.iter().copied()).collect(),
            )?;
            let mut discount = 1.0;
            let mut phi = 0.0;
            for t in seg {
                phi += discount * t.reward;
                discount *= gamma;
            }
            Ok(ScoredTrajectory { actions, phi })
        })
        .collect::<Result<_>>()?;
    let d = compute_moments(&elites, temperature, std_bounds)?;
    Ok(PolicyPrior {
        mean: d.mu,
        std: d.sigma,
    })
}

/// Inputs of one policy update, laid out step-major. Within a step, row
/// `b·G + g` of the action tensors is group member `g` of latent `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBatch {
    pub group_size: usize,
    /// `H × [B, d_z]`, constants.
    pub latents: Vec<Tensor>,
    /// `H × [B·G, d_a]`, thresholded.
    pub actions: Vec<Tensor>,
    /// `H × [B·G, 1]`
    pub advantages: Vec<Tensor>,
    /// `H × [B, d_a]` prior mean and log-std per latent.
    pub prior_mean: Vec<Tensor>,
    pub prior_log_std: Vec<Tensor>,
    /// `H × [B, d_a]` standard normals for the log-μ constraint.
    pub noise: Vec<Tensor>,
}

impl PolicyBatch {
    pub fn horizon(&self) -> usize {
        self.latents.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyLoss {
    /// Mean over steps of the group objective (maximized).
    pub grpo: f64,
    /// Mean over steps of the weighted constraint penalty.
    pub constraint: f64,
    /// Mean KL to the prior at each step.
    pub raw_kl: Vec<f64>,
    /// Minimized objective, `−grpo + constraint`.
    pub total: f64,
}

/// Everything the loss needs to know about the policy head.
#[derive(Clone, Copy, Debug)]
pub struct PolicyHead<'a> {
    pub params: &'a MlpParams,
    pub action_dim: usize,
    pub log_std_bounds: (f64, f64),
}

impl<'a> PolicyHead<'a> {
    pub fn of(model: &'a WorldModel) -> Self {
        Self {
            params: &model.policy,
            action_dim: model.action_dim,
            log_std_bounds: (model.config.log_std_min, model.config.log_std_max),
        }
    }
}

struct StepVars {
    grpo: Var,
    constraint: Option<Var>,
    kl_value: f64,
}

fn on_tape_gaussian(tape: &mut Tape, head: &PolicyHead, vars: &crate::nn::MlpVars, z: Var) -> Result<(Var, Var)> {
    let out = head.params.forward_on(tape, vars, z)?;
    let da = head.action_dim;
    let mean = tape.slice_cols(out, 0, da);
    let raw = tape.slice_cols(out, da, 2 * da);
    let log_std = tape.clamp(raw, head.log_std_bounds.0, head.log_std_bounds.1);
    Ok((mean, log_std))
}

/// Row-wise diagonal Gaussian log-density `[n, 1]` of constant `a`.
fn on_tape_log_prob(tape: &mut Tape, a: Var, mean: Var, log_std: Var) -> Var {
    let diff = tape.sub(a, mean);
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let u = tape.mul(diff, inv_std);
    let u2 = tape.square(u);
    let half = tape.scale(u2, -0.5);
    let lp = tape.sub(half, log_std);
    let rows = tape.sum_cols(lp);
    let (n, da) = (tape.value(a).rows(), tape.value(a).cols());
    let c = tape.constant(Tensor::filled(&[n, 1], -0.5 * LN_2PI * da as f64));
    tape.add(rows, c)
}

/// Row-wise `[B, 1]` KL between the taped policy and a constant prior.
fn on_tape_kl(tape: &mut Tape, dir: KlDirection, mean: Var, log_std: Var, pm: &Tensor, pl: &Tensor) -> Var {
    let (n, da) = (pm.rows(), pm.cols());
    let pmv = tape.constant(pm.clone());
    let plv = tape.constant(pl.clone());
    let d = tape.sub(mean, pmv);
    let d2 = tape.square(d);
    let per = match dir {
        KlDirection::PolicyToPrior => {
            // lq − lp + (e^{2lp} + d²) / (2 e^{2lq}) − ½
            let two_lp = tape.scale(log_std, 2.0);
            let vp = tape.exp(two_lp);
            let num = tape.add(vp, d2);
            let inv = tape.constant(pl.map(|l| 0.5 * (-2.0 * l).exp()));
            let frac = tape.mul(num, inv);
            let lq_minus_lp = tape.sub(plv, log_std);
            tape.add(lq_minus_lp, frac)
        }
        KlDirection::PriorToPolicy => {
            // lp − lq + (e^{2lq} + d²) / (2 e^{2lp}) − ½
            let vq = tape.constant(pl.map(|l| (2.0 * l).exp()));
            let num = tape.add(vq, d2);
            let m2lp = tape.scale(log_std, -2.0);
            let inv = tape.exp(m2lp);
            let frac = tape.mul(num, inv);
            let frac = tape.scale(frac, 0.5);
            let lp_minus_lq = tape.sub(log_std, plv);
            tape.add(lp_minus_lq, frac)
        }
    };
    let rows = tape.sum_cols(per);
    let c = tape.constant(Tensor::filled(&[n, 1], -0.5 * da as f64));
    tape.add(rows, c)
}

/// Minimized policy objective, its breakdown and gradients in
/// [`MlpParams::tensors`] order.
pub fn policy_loss_and_grads(
    head: PolicyHead,
    batch: &PolicyBatch,
    config: &ConstraintConfig,
    epsilon: f64,
) -> Result<(PolicyLoss, Vec<Tensor>)> {
    let h = batch.horizon();
    if h == 0 {
        return Err(Error::InvalidArgument("policy loss needs H >= 1".into()));
    }
    let g = batch.group_size;
    let mut tape = Tape::new();
    let vars = head.params.bind(&mut tape);
    let mut steps = Vec::with_capacity(h);
    for i in 0..h {
        let b = batch.latents[i].rows();
        let z = tape.constant(batch.latents[i].clone());
        let (mean, log_std) = on_tape_gaussian(&mut tape, &head, &vars, z)?;

        let mean_g = tape.repeat_rows(mean, g);
        let log_std_g = tape.repeat_rows(log_std, g);
        let a = tape.constant(batch.actions[i].clone());
        let lp = on_tape_log_prob(&mut tape, a, mean_g, log_std_g);
        let adv = tape.constant(batch.advantages[i].clone());
        let weighted = tape.mul(lp, adv);
        let s = tape.sum(weighted);
        let grpo = tape.scale(s, 1.0 / (g * b) as f64);

        let kl_rows = on_tape_kl(
            &mut tape,
            config.kl_direction,
            mean,
            log_std,
            &batch.prior_mean[i],
            &batch.prior_log_std[i],
        );
        let kl_value = tape.value(kl_rows).sum() / b as f64;
        let constraint = if config.beta == 0.0 {
            None
        } else {
            let per_row = match config.kind {
                ConstraintKind::KlHinge => {
                    let eps = tape.constant(Tensor::filled(&[b, 1], -epsilon));
                    let shifted = tape.add(kl_rows, eps);
                    tape.relu(shifted)
                }
                ConstraintKind::LogMu => {
                    let std = tape.exp(log_std);
                    let xi = tape.constant(batch.noise[i].clone());
                    let step = tape.mul(std, xi);
                    let sample = tape.add(mean, step);
                    let pm = tape.constant(batch.prior_mean[i].clone());
                    let pl = tape.constant(batch.prior_log_std[i].clone());
                    let lp = on_tape_log_prob(&mut tape, sample, pm, pl);
                    tape.scale(lp, -1.0)
                }
            };
            let s = tape.sum(per_row);
            Some(tape.scale(s, config.beta / b as f64))
        };
        steps.push(StepVars {
            grpo,
            constraint,
            kl_value,
        });
    }

    let mut loss = PolicyLoss::default();
    let mut total: Option<Var> = None;
    for (i, step) in steps.iter().enumerate() {
        let grpo_value = tape.value(step.grpo).item();
        let c_value = step.constraint.map_or(0.0, |c| tape.value(c).item());
        if !grpo_value.is_finite() || !c_value.is_finite() || !step.kl_value.is_finite() {
            return Err(Error::non_finite(format!("policy loss at step {i}")));
        }
        loss.grpo += grpo_value / h as f64;
        loss.constraint += c_value / h as f64;
        loss.raw_kl.push(step.kl_value);
        let mut term = tape.scale(step.grpo, -1.0);
        if let Some(c) = step.constraint {
            term = tape.add(term, c);
        }
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    let total = tape.scale(total.expect("h >= 1"), 1.0 / h as f64);
    loss.total = tape.value(total).item();
    let grads = tape.backward(total)?;
    Ok((loss, head.params.grads(&vars, &grads)))
}

/// Gradient-free evaluation of the same objective.
pub fn policy_loss_value(head: PolicyHead, batch: &PolicyBatch, config: &ConstraintConfig, epsilon: f64) -> Result<PolicyLoss> {
    let h = batch.horizon();
    let g = batch.group_size;
    let da = head.action_dim;
    let (lo, hi) = head.log_std_bounds;
    let mut loss = PolicyLoss::default();
    for i in 0..h {
        let out = head.params.forward(&batch.latents[i])?;
        let b = out.rows();
        let mut grpo = 0.0;
        let mut constraint = 0.0;
        let mut kl_sum = 0.0;
        for r in 0..b {
            let row = out.row_slice(r);
            let mean = &row[..da];
            let log_std: Vec<f64> = row[da..].iter().map(|l| l.clamp(lo, hi)).collect();
            for k in 0..g {
                let idx = r * g + k;
                let a = batch.actions[i].row_slice(idx);
                grpo += batch.advantages[i].data()[idx] * gaussian_log_prob(a, mean, &log_std);
            }
            let p = PolicyDistribution::new(mean.to_vec(), log_std.clone())?;
            let q = PolicyDistribution::new(batch.prior_mean[i].row_slice(r).to_vec(), batch.prior_log_std[i].row_slice(r).to_vec())?;
            let kl = match config.kl_direction {
                KlDirection::PolicyToPrior => kl_gaussian(&p, &q)?,
                KlDirection::PriorToPolicy => kl_gaussian(&q, &p)?,
            };
            kl_sum += kl;
            constraint += match config.kind {
                ConstraintKind::KlHinge => policy_constraint_loss(kl, epsilon),
                ConstraintKind::LogMu => {
                    let xi = batch.noise[i].row_slice(r);
                    let sample: Vec<f64> = (0..da).map(|d| mean[d] + log_std[d].exp() * xi[d]).collect();
                    -q.log_prob(&sample)
                }
            };
        }
        let grpo = grpo / (g * b) as f64;
        let constraint = if config.beta == 0.0 { 0.0 } else { config.beta * constraint / b as f64 };
        loss.grpo += grpo / h as f64;
        loss.constraint += constraint / h as f64;
        loss.raw_kl.push(kl_sum / b as f64);
    }
    loss.total = loss.constraint - loss.grpo;
    Ok(loss)
}

/// Advantage rule used when building groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageRule {
    Softmax,
    StdNorm,
}

pub fn advantages(rule: AdvantageRule, q: &[f64], tau_adv: f64) -> Result<Vec<f64>> {
    match rule {
        AdvantageRule::Softmax => softmax_advantages(q, tau_adv),
        AdvantageRule::StdNorm => std_norm_advantages(q),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub group_size: usize,
    pub num_trials: usize,
    /// Summed per-coordinate variance of the gradient estimate.
    pub softmax_trace: f64,
    pub std_norm_trace: f64,
    /// `softmax_trace / std_norm_trace`; infinite when the latter is 0.
    pub ratio: f64,
    /// Monte Carlo standard errors of the two traces.
    pub softmax_trace_se: f64,
    pub std_norm_trace_se: f64,
    pub softmax_max_grad_norm: f64,
    pub std_norm_max_grad_norm: f64,
}

/// Unbiased trace of the sample covariance and its standard error.
pub fn trace_and_se(samples: &[Vec<f64>]) -> (f64, f64) {
    let n = samples.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let dev: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .collect();
    let trace = dev.iter().sum::<f64>() / (n - 1) as f64;
    let dmean = dev.iter().sum::<f64>() / n as f64;
    let dvar = dev.iter().map(|d| (d - dmean) * (d - dmean)).sum::<f64>() / (n - 1) as f64;
    (trace, dvar.sqrt() * n as f64 / (n - 1) as f64 / (n as f64).sqrt())
}

/// Analytic `∇_{(μ, log σ)} Σ_i w_i·log π(a_i)`.
fn weighted_score(dist: &PolicyDistribution, actions: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let da = dist.dim();
    let mut g = vec![0.0; 2 * da];
    for (a, w) in actions.iter().zip(weights) {
        for d in 0..da {
            let s = dist.log_std[d].exp();
            let u = (a[d] - dist.mean[d]) / s;
            g[d] += w * u / s;
            g[da + d] += w * (u * u - 1.0);
        }
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Variance of the group policy-gradient estimate with respect to the
/// distribution parameters `(μ, log σ)`, under softmax and standardized
/// advantages. `q_fn` scores one group of raw (unclipped) actions.
pub fn variance_diagnostic_with<Q>(
    dist: &PolicyDistribution,
    group_size: usize,
    num_trials: usize,
    tau_adv: f64,
    mut q_fn: Q,
    rng: &mut dyn RngCore,
) -> Result<VarianceReport>
where
    Q: FnMut(&[Vec<f64>], &mut dyn RngCore) -> Result<Vec<f64>>,
{
    if num_trials < 2 {
        return Err(Error::InvalidArgument("variance diagnostic needs >= 2 trials".into()));
    }
    if group_size < 2 {
        return Err(Error::InvalidArgument("variance diagnostic needs G >= 2".into()));
    }
    let g = group_size as f64;
    let mut soft = Vec::with_capacity(num_trials);
    let mut stdn = Vec::with_capacity(num_trials);
    for _ in 0..num_trials {
        let actions: Vec<Vec<f64>> = (0..group_size)
            .map(|_| {
                dist.mean
                    .iter()
                    .zip(&dist.log_std)
                    .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let q = q_fn(&actions, rng)?;
        if q.len() != group_size {
            return Err(Error::shape("group q values", group_size, q.len()));
        }
        let a_soft: Vec<f64> = softmax_advantages(&q, tau_adv)?.iter().map(|a| a / g).collect();
        let a_std: Vec<f64> = std_norm_advantages(&q)?.iter().map(|a| a / g).collect();
        soft.push(weighted_score(dist, &actions, &a_soft));
        stdn.push(weighted_score(dist, &actions, &a_std));
    }
    let (softmax_trace, softmax_trace_se) = trace_and_se(&soft);
    let (std_norm_trace, std_norm_trace_se) = trace_and_se(&stdn);
    Ok(VarianceReport {
        group_size,
        num_trials,
        softmax_trace,
        std_norm_trace,
        ratio: if std_norm_trace > 0.0 { softmax_trace / std_norm_trace } else { f64::INFINITY },
        softmax_trace_se,
        std_norm_trace_se,
        softmax_max_grad_norm: soft.iter().map(|v| norm(v)).fold(0.0, f64::max),
        std_norm_max_grad_norm: stdn.iter().map(|v| norm(v)).fold(0.0, f64::max),
    })
}

/// [`variance_diagnostic_with`] at `π(z)`, scoring groups with the model's
/// live value head on box-clipped actions.
pub fn variance_diagnostic(
    model: &WorldModel,
    z: &LatentState,
    group_size: usize,
    num_trials: usize,
    tau_adv: f64,
    rng: &mut dyn RngCore,
) -> Result<VarianceReport> {
    let dist = model.policy_distribution(z)?;
    let zt = Tensor::row(z.0.clone()).repeat_rows(group_size);
    variance_diagnostic_with(
        &dist,
        group_size,
        num_trials,
        tau_adv,
        |actions, _| {
            let mut a = Tensor::from_rows(actions)?;
            for r in 0..group_size {
                model.action_box.clip(a.row_slice_mut(r));
            }
            Ok(model.value_batch(&zt, &a, false)?.into_data())
        },
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let a = softmax_advantages(&[1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(a.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax_advantages(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((a[0] - 1.0 / 3.0).abs() < 1e-15 && (a[1] - 2.0 / 3.0).abs() < 1e-15);
        let a = softmax_advantages(&[5.0, 1.0, 1.0], 0.01).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-3 && a[1] < 1e-3);
        assert!(softmax_advantages(&[1.0], 0.0).is_err());
    }

    #[test]
    fn std_norm_examples() {
        assert_eq!(std_norm_advantages(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0; 3]);
        let a = std_norm_advantages(&[0.0, 2.0]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-8 && (a[1] - 1.0).abs() < 1e-8);
        assert!(std_norm_advantages(&[1.0]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let a = Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap();
        let out = threshold_actions(&a, &[0.0], &[1.0], 3.0);
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn kl_examples() {
        let p = PolicyDistribution::new(vec![0.0], vec![0.0]).unwrap();
        let q = PolicyDistribution::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert_eq!(kl_gaussian(&p, &q).unwrap(), 0.5);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(policy_constraint_loss(0.05, 0.1), 0.0);
        assert!((policy_constraint_loss(0.5, 0.1) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn grpo_single_member() {
        let g = GroupSample {
            z: LatentState(vec![0.0]),
            actions: Tensor::matrix(1, 1, vec![0.2]).unwrap(),
            log_probs: vec![-1.3],
            q_values: vec![4.0],
            advantages: softmax_advantages(&[4.0], 1.0).unwrap(),
        };
        assert_eq!(grpo_loss(&g), -1.3);
    }

    #[test]
    fn epsilon_schedule() {
        let c = ConstraintConfig {
            epsilon: 0.2,
            epsilon_schedule: EpsilonSchedule::LinearDecay {
                final_epsilon: 0.1,
                steps: 10,
            },
            ..ConstraintConfig::default()
        };
        assert_eq!(c.epsilon_at(0), 0.2);
        assert!((c.epsilon_at(5) - 0.15).abs() < 1e-15);
        assert_eq!(c.epsilon_at(100), 0.1);
    }

    fn tiny_batch(rng: &mut ChaCha8Rng, g: usize) -> (MlpParams, PolicyBatch) {
        let policy = MlpParams::new(&[2, 5, 2], Activation::Tanh, crate::nn::Init::Xavier, rng).unwrap();
        let mut r = |n: usize, c: usize, s: f64| {
            Tensor::new(vec![n, c], (0..n * c).map(|_| s * rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let b = 2;
        let batch = PolicyBatch {
            group_size: g,
            latents: vec![r(b, 2, 1.0), r(b, 2, 1.0)],
            actions: vec![r(b * g, 1, 1.0), r(b * g, 1, 1.0)],
            advantages: vec![r(b * g, 1, 0.5), r(b * g, 1, 0.5)],
            prior_mean: vec![r(b, 1, 0.5), r(b, 1, 0.5)],
            prior_log_std: vec![r(b, 1, 0.3), r(b, 1, 0.3)],
            noise: vec![r(b, 1, 1.0), r(b, 1, 1.0)],
        };
        (policy, batch)
    }

    #[test]
    fn taped_and_plain_policy_loss_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (policy, batch) = tiny_batch(&mut rng, 3);
        let head = PolicyHead {
            params: &policy,
            action_dim: 1,
            log_std_bounds: (-5.0, 2.0),
        };
        for kind in [ConstraintKind::KlHinge, ConstraintKind::LogMu] {
            for dir in [KlDirection::PolicyToPrior, KlDirection::PriorToPolicy] {
                let cfg = ConstraintConfig {
                    kind,
                    kl_direction: dir,
                    epsilon: 0.01,
                    beta: 0.7,
                    ..ConstraintConfig::default()
                };
                let (taped, grads) = policy_loss_and_grads(head, &batch, &cfg, cfg.epsilon).unwrap();
                let plain = policy_loss_value(head, &batch, &cfg, cfg.epsilon).unwrap();
                assert!((taped.total - plain.total).abs() < 1e-12, "{kind:?} {dir:?}");
                for (a, b) in taped.raw_kl.iter().zip(&plain.raw_kl) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(grads.len(), policy.tensors().len());
            }
        }
    }

    #[test]
    fn beta_zero_leaves_pure_grpo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (policy, batch) = tiny_batch(&mut rng, 2);
        let head = PolicyHead {
            params: &policy,
            action_dim: 1,
            log_std_bounds: (-5.0, 2.0),
        };
        let cfg = ConstraintConfig {
            beta: 0.0,
            ..ConstraintConfig::default()
        };
        let (loss, _) = policy_loss_and_grads(head, &batch, &cfg, 0.1).unwrap();
        assert_eq!(loss.constraint, 0.0);
        assert_eq!(loss.total, -loss.grpo);
    }

    #[test]
    fn trace_se_of_constant_samples_is_zero() {
        let s = vec![vec![1.0, 2.0]; 10];
        assert_eq!(trace_and_se(&s), (0.0, 0.0));
    }
}
