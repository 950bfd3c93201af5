//! Latent world model: encoder, latent dynamics, reward, value (with a
//! delayed target copy) and Gaussian policy heads, plus the multi-step model
//! objective.
//!
//! Batched entry points take row-major `[n, dim]` tensors; the single-vector
//! helpers wrap them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::ActionBox;
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, MlpParams, MlpVars, Tape, Tensor, Var};
use crate::replay::Segment;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// What the TD target bootstraps through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// EMA delayed copy of the value head.
    Target,
    /// The live value head itself.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Per-update EMA step size: `target ← rate·live + (1 − rate)·target`.
    pub target_rate: f64,
    pub bootstrap: Bootstrap,
    pub consistency_coef: f64,
    pub reward_coef: f64,
    pub value_coef: f64,
    /// Fixed multiplier on the value head output. Values of long-horizon
    /// tasks are large; scaling lets the head learn them at a small step.
    pub value_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden_sizes: vec![64, 64],
            activation: Activation::Tanh,
            log_std_min: -5.0,
            log_std_max: 2.0,
            target_rate: 0.005,
            bootstrap: Bootstrap::Target,
            consistency_coef: 1.0,
            reward_coef: 1.0,
            value_coef: 1.0,
            value_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::Config("log_std_min must be < log_std_max".into()));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::Config("target_rate must lie in [0, 1]".into()));
        }
        for (name, c) in [
            ("consistency_coef", self.consistency_coef),
            ("reward_coef", self.reward_coef),
            ("value_coef", self.value_coef),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return Err(Error::Config("value_scale must be positive".into()));
        }
        Ok(())
    }
}

/// A latent vector `z = h(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl PolicyDistribution {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape("policy distribution", mean.len(), log_std.len()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, a: &[f64]) -> f64 {
        gaussian_log_prob(a, &self.mean, &self.log_std)
    }
}

pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean.iter().zip(log_std))
        .map(|(x, (m, l))| {
            let u = (x - m) / l.exp();
            -0.5 * (u * u + LN_2PI) - l
        })
        .sum()
}

/// Draws `mean + σ·ξ`, clips into `action_box`, and returns the clipped
/// action with the log-density of the unclipped draw.
pub fn sample_action<R: Rng + ?Sized>(
    dist: &PolicyDistribution,
    action_box: &ActionBox,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = dist
        .mean
        .iter()
        .zip(&dist.log_std)
        .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let log_prob = dist.log_prob(&raw);
    let mut a = raw;
    action_box.clip(&mut a);
    (a, log_prob)
}

/// Per-term breakdown of the model objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLoss {
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    pub total: f64,
}

/// `B` segments of horizon `H`, laid out step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    /// `[B, d_s]`
    pub first_states: Tensor,
    /// `H × [B, d_a]`
    pub actions: Vec<Tensor>,
    /// `H × [B, 1]`
    pub rewards: Vec<Tensor>,
    /// `H × [B, d_s]`
    pub next_states: Vec<Tensor>,
}

impl SegmentBatch {
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty segment batch".into()))?;
        let horizon = first.len();
        if horizon == 0 {
            return Err(Error::InvalidArgument("segments must be non-empty".into()));
        }
        if let Some(bad) = segments.iter().find(|s| s.len() != horizon) {
            return Err(Error::shape("segment length", horizon, bad.len()));
        }
        let first_states =
            Tensor::from_rows(&segments.iter().map(|s| s[0].state.clone()).collect::<Vec<_>>())?;
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut next_states = Vec::with_capacity(horizon);
        for i in 0..horizon {
            actions.push(Tensor::from_rows(
                &segments.iter().map(|s| s[i].action.clone()).collect::<Vec<_>>(),
            )?);
            rewards.push(Tensor::matrix(
                segments.len(),
                1,
                segments.iter().map(|s| s[i].reward).collect(),
            )?);
            next_states.push(Tensor::from_rows(
                &segments.iter().map(|s| s[i].next_state.clone()).collect::<Vec<_>>(),
            )?);
        }
        Ok(Self {
            first_states,
            actions,
            rewards,
            next_states,
        })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self) -> usize {
        self.first_states.rows()
    }
}

/// Regression targets of the model objective, treated as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTargets {
    /// `h(s_{i+1})` per step.
    pub next_latents: Vec<Tensor>,
    /// `r_i + γ·Q̄(z_{i+1}, π̄(z_{i+1}))` per step.
    pub td_targets: Vec<Tensor>,
}

/// Gradients of the model objective.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    /// In [`WorldModel::model_tensors`] order.
    pub model: Vec<Tensor>,
    /// With respect to the value-target copy; zero by construction.
    pub target: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub config: ModelConfig,
    pub gamma: f64,
    pub action_box: ActionBox,
    pub encoder: MlpParams,
    pub dynamics: MlpParams,
    pub reward: MlpParams,
    pub value: MlpParams,
    pub value_target: MlpParams,
    pub policy: MlpParams,
}

/// Tape handles for the heads bound in one model-loss pass.
struct Bound {
    encoder: MlpVars,
    dynamics: MlpVars,
    reward: MlpVars,
    value: MlpVars,
    value_target: MlpVars,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_box: ActionBox,
        config: ModelConfig,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        let (ds, da, dz) = (state_dim, action_box.dim(), config.latent_dim);
        let h = &config.hidden_sizes;
        let act = config.activation;
        let encoder = MlpParams::new(&sizes(ds, h, dz), act, Init::Xavier, rng)?;
        let dynamics = MlpParams::new(&sizes(dz + da, h, dz), act, Init::Xavier, rng)?;
        let mut reward = MlpParams::new(&sizes(dz + da, h, 1), act, Init::Xavier, rng)?;
        let mut value = MlpParams::new(&sizes(dz + da, h, 1), act, Init::Xavier, rng)?;
        let mut policy = MlpParams::new(&sizes(dz, h, 2 * da), act, Init::Xavier, rng)?;
        reward.scale_output_layer(0.0);
        value.scale_output_layer(0.0);
        policy.scale_output_layer(0.1);
        let value_target = value.clone();
        Ok(Self {
            state_dim: ds,
            action_dim: da,
            config,
            gamma,
            action_box,
            encoder,
            dynamics,
            reward,
            value,
            value_target,
            policy,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Checks that every head matches the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let (ds, da, dz) = (self.state_dim, self.action_dim, self.latent_dim());
        let heads: [(&str, &MlpParams, usize, usize); 6] = [
            ("encoder", &self.encoder, ds, dz),
            ("dynamics", &self.dynamics, dz + da, dz),
            ("reward", &self.reward, dz + da, 1),
            ("value", &self.value, dz + da, 1),
            ("value_target", &self.value_target, dz + da, 1),
            ("policy", &self.policy, dz, 2 * da),
        ];
        for (name, head, i, o) in heads {
            if head.input_dim() != i || head.output_dim() != o {
                return Err(Error::shape(
                    format!("{name} head"),
                    format!("{i} -> {o}"),
                    format!("{} -> {}", head.input_dim(), head.output_dim()),
                ));
            }
        }
        if self.value_target.layer_sizes() != self.value.layer_sizes() {
            return Err(Error::Config("value_target architecture differs from value".into()));
        }
        if self.action_box.dim() != da {
            return Err(Error::shape("action box", da, self.action_box.dim()));
        }
        Ok(())
    }

    // ---- batched forwards ----

    pub fn encode_batch(&self, states: &Tensor) -> Result<Tensor> {
        self.encoder.forward(states)
    }

    fn za(&self, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent_dim() {
            return Err(Error::shape("latent", self.latent_dim(), z.cols()));
        }
        if a.cols() != self.action_dim {
            return Err(Error::shape("action", self.action_dim, a.cols()));
        }
        if z.rows() != a.rows() {
            return Err(Error::shape("latent/action rows", z.rows(), a.rows()));
        }
        Ok(z.concat_cols(a))
    }

    pub fn dynamics_batch(&self, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.dynamics.forward(&self.za(z, a)?)
    }

    /// `[n, 1]` predicted rewards.
    pub fn reward_batch(&self, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        self.reward.forward(&self.za(z, a)?)
    }

    /// `[n, 1]` values from the live head or the target copy.
    pub fn value_batch(&self, z: &Tensor, a: &Tensor, use_target: bool) -> Result<Tensor> {
        let head = if use_target { &self.value_target } else { &self.value };
        Ok(head.forward(&self.za(z, a)?)?.scale(self.config.value_scale))
    }

    /// `(mean, log_std)`, each `[n, d_a]`, with the log-std clamp applied.
    pub fn policy_batch(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        if z.cols() != self.latent_dim() {
            return Err(Error::shape("latent", self.latent_dim(), z.cols()));
        }
        let out = self.policy.forward(z)?;
        let da = self.action_dim;
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        Ok((out.slice_cols(0, da), out.slice_cols(da, 2 * da).map(|v| v.clamp(lo, hi))))
    }

    /// Policy mean clipped into the action box, row by row.
    pub fn policy_mean_action_batch(&self, z: &Tensor) -> Result<Tensor> {
        let (mut mean, _) = self.policy_batch(z)?;
        let rows = mean.rows();
        for r in 0..rows {
            self.action_box.clip(mean.row_slice_mut(r));
        }
        Ok(mean)
    }

    // ---- single-vector forwards ----

    pub fn encode(&self, s: &[f64]) -> Result<LatentState> {
        if s.len() != self.state_dim {
            return Err(Error::shape("state", self.state_dim, s.len()));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("state passed to encoder"));
        }
        Ok(LatentState(self.encoder.forward_vec(s)?))
    }

    fn za_row(&self, z: &LatentState, a: &[f64]) -> Result<(Tensor, Tensor)> {
        Ok((Tensor::row(z.0.clone()), Tensor::row(a.to_vec())))
    }

    pub fn dynamics_step(&self, z: &LatentState, a: &[f64]) -> Result<LatentState> {
        let (zt, at) = self.za_row(z, a)?;
        Ok(LatentState(self.dynamics_batch(&zt, &at)?.into_data()))
    }

    pub fn predict_reward(&self, z: &LatentState, a: &[f64]) -> Result<f64> {
        let (zt, at) = self.za_row(z, a)?;
        Ok(self.reward_batch(&zt, &at)?.item())
    }

    pub fn predict_value(&self, z: &LatentState, a: &[f64], use_target: bool) -> Result<f64> {
        let (zt, at) = self.za_row(z, a)?;
        Ok(self.value_batch(&zt, &at, use_target)?.item())
    }

    pub fn policy_distribution(&self, z: &LatentState) -> Result<PolicyDistribution> {
        let (mean, log_std) = self.policy_batch(&Tensor::row(z.0.clone()))?;
        PolicyDistribution::new(mean.into_data(), log_std.into_data())
    }

    // ---- target network ----

    pub fn hard_sync_target(&mut self) {
        self.value_target = self.value.clone();
    }

    /// One EMA step of the target copy at `config.target_rate`.
    pub fn update_target(&mut self) {
        let rate = self.config.target_rate;
        self.value_target.blend_from(&self.value, rate);
    }

    // ---- parameter groups ----

    /// Encoder, dynamics, reward and value tensors: the model-loss group.
    pub fn model_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.dynamics.tensors());
        v.extend(self.reward.tensors());
        v.extend(self.value.tensors());
        v
    }

    pub fn model_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.dynamics.tensors_mut());
        v.extend(self.reward.tensors_mut());
        v.extend(self.value.tensors_mut());
        v
    }

    pub fn policy_tensors(&self) -> Vec<&Tensor> {
        self.policy.tensors()
    }

    pub fn policy_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.policy.tensors_mut()
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.encoder,
            &self.dynamics,
            &self.reward,
            &self.value,
            &self.value_target,
            &self.policy,
        ]
        .iter()
        .all(|h| h.is_finite())
    }

    // ---- model objective ----

    fn check_batch(&self, batch: &SegmentBatch) -> Result<()> {
        if batch.first_states.cols() != self.state_dim {
            return Err(Error::shape("segment state", self.state_dim, batch.first_states.cols()));
        }
        if let Some(a) = batch.actions.first() {
            if a.cols() != self.action_dim {
                return Err(Error::shape("segment action", self.action_dim, a.cols()));
            }
        }
        Ok(())
    }

    /// Bootstrap value at `z` with the clipped policy mean action.
    fn bootstrap_value(&self, z: &Tensor) -> Result<Tensor> {
        let a = self.policy_mean_action_batch(z)?;
        self.value_batch(z, &a, self.config.bootstrap == Bootstrap::Target)
    }

    /// Targets at the current parameters.
    pub fn model_targets(&self, batch: &SegmentBatch) -> Result<ModelTargets> {
        self.check_batch(batch)?;
        let mut z = self.encode_batch(&batch.first_states)?;
        let mut next_latents = Vec::with_capacity(batch.horizon());
        let mut td_targets = Vec::with_capacity(batch.horizon());
        for i in 0..batch.horizon() {
            next_latents.push(self.encode_batch(&batch.next_states[i])?);
            z = self.dynamics_batch(&z, &batch.actions[i])?;
            let boot = self.bootstrap_value(&z)?;
            let gamma = self.gamma;
            td_targets.push(batch.rewards[i].zip_map(&boot, |r, q| r + gamma * q));
        }
        Ok(ModelTargets {
            next_latents,
            td_targets,
        })
    }

    /// Objective value against fixed targets (gradient-free).
    pub fn model_loss_with_targets(&self, batch: &SegmentBatch, targets: &ModelTargets) -> Result<ModelLoss> {
        self.check_batch(batch)?;
        let n = batch.batch_size() as f64;
        let mut z = self.encode_batch(&batch.first_states)?;
        let mut loss = ModelLoss::default();
        for i in 0..batch.horizon() {
            let a = &batch.actions[i];
            let z_next = self.dynamics_batch(&z, a)?;
            loss.consistency += z_next.zip_map(&targets.next_latents[i], |p, t| p - t).squared_norm() / n;
            loss.reward += self
                .reward_batch(&z, a)?
                .zip_map(&batch.rewards[i], |p, t| p - t)
                .squared_norm()
                / n;
            loss.value += self
                .value_batch(&z, a, false)?
                .zip_map(&targets.td_targets[i], |p, t| p - t)
                .squared_norm()
                / n;
            z = z_next;
        }
        self.finish_loss(loss)
    }

    fn finish_loss(&self, mut loss: ModelLoss) -> Result<ModelLoss> {
        for (name, v) in [
            ("latent consistency", loss.consistency),
            ("reward consistency", loss.reward),
            ("value consistency", loss.value),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(name));
            }
        }
        let c = &self.config;
        loss.total = c.consistency_coef * loss.consistency + c.reward_coef * loss.reward + c.value_coef * loss.value;
        Ok(loss)
    }

    /// Objective value at the current parameters.
    pub fn model_loss(&self, batch: &SegmentBatch) -> Result<ModelLoss> {
        let targets = self.model_targets(batch)?;
        self.model_loss_with_targets(batch, &targets)
    }

    /// Convenience wrapper over raw replay segments.
    pub fn model_loss_segments(&self, segments: &[Segment]) -> Result<ModelLoss> {
        self.model_loss(&SegmentBatch::from_segments(segments)?)
    }

    fn on_tape_za(&self, tape: &mut Tape, z: Var, a: Var) -> Var {
        tape.concat_cols(z, a)
    }

    /// Objective and its gradients. Targets are computed on the tape and
    /// then detached, so no gradient reaches them.
    pub fn model_loss_and_grads(&self, batch: &SegmentBatch) -> Result<(ModelLoss, ModelGrads)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bound = Bound {
            encoder: self.encoder.bind(&mut tape),
            dynamics: self.dynamics.bind(&mut tape),
            reward: self.reward.bind(&mut tape),
            value: self.value.bind(&mut tape),
            value_target: self.value_target.bind(&mut tape),
        };
        let inv_n = 1.0 / batch.batch_size() as f64;
        let scale = self.config.value_scale;
        let use_target = self.config.bootstrap == Bootstrap::Target;

        let s0 = tape.constant(batch.first_states.clone());
        let mut z = self.encoder.forward_on(&mut tape, &bound.encoder, s0)?;
        let mut terms: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for i in 0..batch.horizon() {
            let a = tape.constant(batch.actions[i].clone());
            let za = self.on_tape_za(&mut tape, z, a);
            let z_next = self.dynamics.forward_on(&mut tape, &bound.dynamics, za)?;
            let r_hat = self.reward.forward_on(&mut tape, &bound.reward, za)?;
            let q_raw = self.value.forward_on(&mut tape, &bound.value, za)?;
            let q_hat = tape.scale(q_raw, scale);

            // Consistency target h(s_{i+1}), stop-gradient.
            let sn = tape.constant(batch.next_states[i].clone());
            let h_next = self.encoder.forward_on(&mut tape, &bound.encoder, sn)?;
            let h_next = tape.detach(h_next);

            // TD target r + γ·Q̄(z', π̄(z')), stop-gradient.
            let zn = tape.detach(z_next);
            let boot_a = tape.constant(self.policy_mean_action_batch(tape.value(zn))?);
            let zan = self.on_tape_za(&mut tape, zn, boot_a);
            let (head, vars) = if use_target {
                (&self.value_target, &bound.value_target)
            } else {
                (&self.value, &bound.value)
            };
            let q_boot = head.forward_on(&mut tape, vars, zan)?;
            let q_boot = tape.scale(q_boot, scale * self.gamma);
            let r = tape.constant(batch.rewards[i].clone());
            let td = tape.add(r, q_boot);
            let td = tape.detach(td);

            for (slot, (pred, target)) in [(z_next, h_next), (r_hat, r), (q_hat, td)].into_iter().enumerate() {
                let d = tape.sub(pred, target);
                let sq = tape.square(d);
                let s = tape.sum(sq);
                terms[slot].push(tape.scale(s, inv_n));
            }
            z = z_next;
        }

        let c = &self.config;
        let coefs = [c.consistency_coef, c.reward_coef, c.value_coef];
        let mut values = [0.0; 3];
        let mut total: Option<Var> = None;
        for slot in 0..3 {
            let mut acc = terms[slot][0];
            for &t in &terms[slot][1..] {
                acc = tape.add(acc, t);
            }
            values[slot] = tape.value(acc).item();
            let weighted = tape.scale(acc, coefs[slot]);
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted),
            });
        }
        let total = total.expect("three loss terms");
        let loss = self.finish_loss(ModelLoss {
            consistency: values[0],
            reward: values[1],
            value: values[2],
            total: 0.0,
        })?;
        let grads = tape.backward(total)?;
        let mut model = self.encoder.grads(&bound.encoder, &grads);
        model.extend(self.dynamics.grads(&bound.dynamics, &grads));
        model.extend(self.reward.grads(&bound.reward, &grads));
        model.extend(self.value.grads(&bound.value, &grads));
        let target = self.value_target.grads(&bound.value_target, &grads);
        Ok((loss, ModelGrads { model, target }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::Transition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            hidden_sizes: vec![8],
            ..ModelConfig::default()
        }
    }

    fn model(seed: u64) -> WorldModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WorldModel::new(3, ActionBox::symmetric(2, 1.0), small_config(), 0.9, &mut rng).unwrap()
    }

    fn zero_head(sizes: &[usize], bias: Vec<f64>) -> MlpParams {
        let mut m = MlpParams::zeros(sizes, Activation::Tanh).unwrap();
        let last = m.num_layers() - 1;
        m.bias_mut(last).data_mut().copy_from_slice(&bias);
        m
    }

    fn random_segment(rng: &mut ChaCha8Rng, h: usize) -> Segment {
        (0..h)
            .map(|_| Transition {
                state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                reward: rng.random_range(-1.0..1.0),
                next_state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: false,
                episode_id: 0,
            })
            .collect()
    }

    #[test]
    fn heads_are_dimensionally_consistent() {
        let m = model(0);
        m.validate().unwrap();
        assert_eq!(m.encode(&[0.1, 0.2, 0.3]).unwrap().dim(), 4);
        assert!(matches!(m.encode(&[0.0]), Err(Error::Shape { .. })));
        let z = LatentState(vec![0.0; 4]);
        assert!(m.dynamics_step(&z, &[0.0]).is_err());
    }

    #[test]
    fn zero_heads_emit_biases() {
        let mut m = model(0);
        m.encoder = zero_head(&[3, 8, 4], vec![1.0, 2.0, 3.0, 4.0]);
        m.dynamics = zero_head(&[6, 8, 4], vec![0.5; 4]);
        m.reward = zero_head(&[6, 8, 1], vec![-0.25]);
        m.value = zero_head(&[6, 8, 1], vec![7.0]);
        m.policy = zero_head(&[4, 8, 4], vec![0.0, 0.0, 100.0, -100.0]);
        let z = m.encode(&[9.0, -3.0, 0.5]).unwrap();
        assert_eq!(z.0, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.dynamics_step(&z, &[0.3, -0.3]).unwrap().0, vec![0.5; 4]);
        assert_eq!(m.predict_reward(&z, &[0.3, -0.3]).unwrap(), -0.25);
        assert_eq!(m.predict_value(&z, &[0.3, -0.3], false).unwrap(), 7.0);
        let d = m.policy_distribution(&z).unwrap();
        assert_eq!(d.mean, vec![0.0, 0.0]);
        assert_eq!(d.log_std, vec![2.0, -5.0]);
    }

    #[test]
    fn hard_sync_then_ema() {
        let mut m = model(1);
        m.hard_sync_target();
        let z = LatentState(vec![0.1, -0.2, 0.3, 0.0]);
        let a = [0.5, -0.5];
        assert_eq!(m.predict_value(&z, &a, true).unwrap(), m.predict_value(&z, &a, false).unwrap());

        for t in m.value.tensors_mut() {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let old = m.value_target.clone();
        m.update_target();
        let rho = m.config.target_rate;
        for ((t, l), o) in m.value_target.tensors().iter().zip(m.value.tensors()).zip(old.tensors()) {
            for ((t, l), o) in t.data().iter().zip(l.data()).zip(o.data()) {
                assert!((t - (rho * l + (1.0 - rho) * o)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn own_mean_log_density_is_normalizer() {
        let d = PolicyDistribution::new(vec![0.3, -1.0], vec![-0.5, 0.25]).unwrap();
        let expected: f64 = d.log_std.iter().map(|l| -l - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((d.log_prob(&d.mean) - expected).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_sample_returns_mean() {
        let d = PolicyDistribution::new(vec![0.4], vec![-40.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = sample_action(&d, &ActionBox::symmetric(1, 1.0), &mut rng);
        assert!((a[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn samples_are_clipped_and_seeded() {
        let d = PolicyDistribution::new(vec![0.9], vec![1.0]).unwrap();
        let b = ActionBox::symmetric(1, 1.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (a, lp) = sample_action(&d, &b, &mut r1);
            assert!(b.contains(&a));
            assert_eq!((a, lp), sample_action(&d, &b, &mut r2));
        }
    }

    #[test]
    fn gamma_zero_value_loss_is_reward_regression() {
        let mut m = model(2);
        m.gamma = 1e-300;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let segs: Vec<Segment> = (0..4).map(|_| random_segment(&mut rng, 1)).collect();
        let batch = SegmentBatch::from_segments(&segs).unwrap();
        let loss = m.model_loss(&batch).unwrap();
        let z = m.encode_batch(&batch.first_states).unwrap();
        let q = m.value_batch(&z, &batch.actions[0], false).unwrap();
        let expected = q.zip_map(&batch.rewards[0], |a, b| a - b).squared_norm() / 4.0;
        assert!((loss.value - expected).abs() < 1e-12);
    }

    #[test]
    fn taped_loss_matches_plain_and_target_grads_vanish() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let segs: Vec<Segment> = (0..5).map(|_| random_segment(&mut rng, 3)).collect();
        let batch = SegmentBatch::from_segments(&segs).unwrap();
        let (taped, grads) = m.model_loss_and_grads(&batch).unwrap();
        let plain = m.model_loss(&batch).unwrap();
        assert!((taped.total - plain.total).abs() < 1e-12 * plain.total.abs().max(1.0));
        assert!(grads.target.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.model.len(), m.model_tensors().len());
    }

    #[test]
    fn ragged_segments_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let segs = vec![random_segment(&mut rng, 2), random_segment(&mut rng, 3)];
        assert!(SegmentBatch::from_segments(&segs).is_err());
    }
}
