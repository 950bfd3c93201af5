//! The training loop: collect with the planner, then run gradient steps on
//! the model and the group-relative policy objective.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::envs::{make_env, Env, EnvState};
use crate::error::{Error, Result};
use crate::grpc::{
    advantages, buffer_prior, policy_loss_and_grads, threshold_actions, AdvantageRule, PolicyBatch, PolicyHead,
    PriorSource,
};
use crate::metrics::{EvalRecord, MetricsRecord, MetricsWriter, Phase, PlannerRecord, PolicyLossRecord};
use crate::nn::{MlpParams, OptimizerState, Tensor};
use crate::planner::{plan, PlannerConfig, TrajectoryDistribution};
use crate::replay::{BufferConfig, ReplayBuffer, Segment, Transition};
use crate::world_model::{SegmentBatch, WorldModel};

pub const CHECKPOINT_KIND: &str = "tdgrpc-train-checkpoint";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    pub pushes: u64,
    pub train_steps: u64,
    pub skipped_train_steps: u64,
    pub episodes: u64,
    pub failures: u64,
    pub outer_iterations: u64,
    pub planner_fallbacks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub steps: u64,
    pub episode_returns: Vec<f64>,
    pub failures: u64,
    pub planner_fallbacks: u64,
}

/// Where the running episode stands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Cursor {
    observation: Vec<f64>,
    episode_id: u64,
    running_return: f64,
    last_return: Option<f64>,
    plan: Option<TrajectoryDistribution>,
    last_planner: Option<PlannerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub env: String,
    pub seed: u64,
    pub counters: Counters,
    pub clipped_actions: u64,
    pub last_episode_return: Option<f64>,
    pub final_eval: Option<EvalRecord>,
    pub model_parameters: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainCheckpoint {
    config: TrainConfig,
    model: WorldModel,
    model_opt: OptimizerState,
    policy_opt: OptimizerState,
    prev_policy: MlpParams,
    buffer: ReplayBuffer,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    env_state: EnvState,
    cursor: Cursor,
    counters: Counters,
    next_eval: u64,
    next_checkpoint: u64,
    metrics_count: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub struct Trainer {
    config: TrainConfig,
    env: Box<dyn Env>,
    model: WorldModel,
    model_opt: OptimizerState,
    policy_opt: OptimizerState,
    prev_policy: MlpParams,
    buffer: ReplayBuffer,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    cursor: Cursor,
    counters: Counters,
    next_eval: u64,
    next_checkpoint: u64,
    records: Vec<MetricsRecord>,
    writer: Option<MetricsWriter>,
    run_dir: Option<PathBuf>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut env = make_env(&config.env)?;
        let spec = env.spec().clone();
        let mut init_rng = stream(config.seed, 0);
        let mut model = WorldModel::new(
            spec.state_dim,
            spec.action_box.clone(),
            config.model.clone(),
            config.gamma,
            &mut init_rng,
        )?;
        model.hard_sync_target();
        let model_opt = OptimizerState::new(config.optimizer.clone(), config.learning_rate, &model.model_tensors())?;
        let policy_opt = OptimizerState::new(config.optimizer.clone(), config.learning_rate, &model.policy_tensors())?;
        let buffer = ReplayBuffer::new(BufferConfig {
            capacity: config.buffer_capacity,
            horizon: config.horizon,
            seed: config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        })?;
        let mut collect_rng = stream(config.seed, 1);
        let observation = env.reset(&mut collect_rng);
        Ok(Self {
            prev_policy: model.policy.clone(),
            env,
            model,
            model_opt,
            policy_opt,
            buffer,
            collect_rng,
            train_rng: stream(config.seed, 2),
            cursor: Cursor {
                observation,
                episode_id: 0,
                running_return: 0.0,
                last_return: None,
                plan: None,
                last_planner: None,
            },
            counters: Counters::default(),
            next_eval: config.eval_every,
            next_checkpoint: config.checkpoint_every,
            records: Vec::new(),
            writer: None,
            run_dir: None,
            started: Instant::now(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut WorldModel {
        &mut self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    /// Attaches a run directory: config snapshot, metrics file and
    /// checkpoints live there.
    pub fn attach_run_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, self.config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
        self.writer = Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?);
        self.run_dir = Some(dir.to_path_buf());
        Ok(())
    }

    fn emit(&mut self, mut record: MetricsRecord) -> Result<()> {
        if self.config.record_wall_clock {
            record.wall_clock = Some(self.started.elapsed().as_secs_f64());
        }
        if let Some(w) = &mut self.writer {
            w.write(&record)?;
        }
        self.records.push(record);
        Ok(())
    }

    fn planner_config(&self) -> &PlannerConfig {
        &self.config.planner
    }

    /// Takes `steps` environment steps, pushing every transition.
    pub fn collect(&mut self, steps: u64) -> Result<CollectStats> {
        let mut stats = CollectStats::default();
        for _ in 0..steps {
            let spec_box = self.env.spec().action_box.clone();
            let raw = if self.counters.env_steps < self.config.warmup_steps {
                spec_box.sample_uniform(&mut self.collect_rng)
            } else {
                let z = self.model.encode(&self.cursor.observation)?;
                let p = plan(
                    &self.model,
                    &z,
                    self.cursor.plan.as_ref(),
                    &self.config.planner,
                    self.config.explore,
                    &mut self.collect_rng,
                )?;
                if p.diagnostics.fallback {
                    stats.planner_fallbacks += 1;
                    self.counters.planner_fallbacks += 1;
                }
                let fallbacks = self.cursor.last_planner.as_ref().map_or(0, |r| r.fallbacks)
                    + u64::from(p.diagnostics.fallback);
                self.cursor.last_planner = Some(PlannerRecord {
                    elite_phi_mean: p.diagnostics.elite_phi_mean,
                    elite_phi_max: p.diagnostics.elite_phi_max,
                    iterations: p.diagnostics.iterations,
                    fallbacks,
                });
                self.cursor.plan = Some(p.distribution);
                p.action
            };
            let step = self.env.step(&raw);
            let mut action = raw;
            spec_box.clip(&mut action);
            self.counters.env_steps += 1;
            stats.steps += 1;
            if step.failed {
                stats.failures += 1;
                self.counters.failures += 1;
            } else {
                self.buffer.push(Transition {
                    state: std::mem::take(&mut self.cursor.observation),
                    action,
                    reward: step.reward,
                    next_state: step.observation.clone(),
                    done: step.done,
                    episode_id: self.cursor.episode_id,
                })?;
                self.counters.pushes += 1;
                self.cursor.running_return += step.reward;
            }
            self.cursor.observation = step.observation;
            if step.done {
                if !step.failed {
                    stats.episode_returns.push(self.cursor.running_return);
                    self.cursor.last_return = Some(self.cursor.running_return);
                }
                self.counters.episodes += 1;
                self.cursor.observation = self.env.reset(&mut self.collect_rng);
                self.cursor.episode_id += 1;
                self.cursor.running_return = 0.0;
                self.cursor.plan = None;
            }
        }
        Ok(stats)
    }

    /// Prior mean and log-std rows (`[B, d_a]`) for every step.
    fn priors(&self, segments: &[Segment], latents: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let b = segments.len();
        let pc = self.planner_config();
        match self.config.constraint.prior {
            PriorSource::BufferMoments => {
                let prior = buffer_prior(
                    segments,
                    self.config.gamma,
                    self.config.constraint.prior_temperature,
                    (pc.min_std, pc.max_std),
                )?;
                let mut means = Vec::new();
                let mut log_stds = Vec::new();
                for i in 0..latents.len() {
                    means.push(Tensor::row(prior.mean.row_slice(i).to_vec()).repeat_rows(b));
                    log_stds.push(Tensor::row(prior.std.row_slice(i).iter().map(|s| s.ln()).collect()).repeat_rows(b));
                }
                Ok((means, log_stds))
            }
            PriorSource::PreviousPolicy => {
                let da = self.model.action_dim;
                let (lo, hi) = (self.model.config.log_std_min, self.model.config.log_std_max);
                let mut means = Vec::new();
                let mut log_stds = Vec::new();
                for z in latents {
                    let out = self.prev_policy.forward(z)?;
                    means.push(out.slice_cols(0, da));
                    log_stds.push(out.slice_cols(da, 2 * da).map(|v| v.clamp(lo, hi)));
                }
                Ok((means, log_stds))
            }
        }
    }

    /// One model update and one policy update on a fresh batch.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let h = self.config.horizon;
        let segments = match self.buffer.sample_segments(h, self.config.batch_segments) {
            Ok(s) => s,
            Err(Error::InsufficientData { .. }) => {
                self.counters.skipped_train_steps += 1;
                let mut r = MetricsRecord::new(Phase::Train, self.counters.env_steps, self.counters.train_steps);
                r.skipped_train_steps = self.counters.skipped_train_steps;
                return Ok(r);
            }
            Err(e) => return Err(e),
        };
        let batch = SegmentBatch::from_segments(&segments)?;
        let (model_loss, model_grads) = self.model.model_loss_and_grads(&batch)?;

        // Latent rollout through the learned dynamics, as constants.
        let mut latents = Vec::with_capacity(h);
        let mut z = self.model.encode_batch(&batch.first_states)?;
        for i in 0..h {
            let next = self.model.dynamics_batch(&z, &batch.actions[i])?;
            latents.push(z);
            z = next;
        }
        let (prior_mean, prior_log_std) = self.priors(&segments, &latents)?;

        let g = self.config.group_size();
        let constraint = self.config.effective_constraint();
        let rule = if self.config.ablation.use_std_norm_advantages {
            AdvantageRule::StdNorm
        } else {
            AdvantageRule::Softmax
        };
        let da = self.model.action_dim;
        let b = segments.len();
        let c = constraint.action_clip_threshold;
        let mut actions = Vec::with_capacity(h);
        let mut advs = Vec::with_capacity(h);
        let mut noise = Vec::with_capacity(h);
        let (mut adv_min, mut adv_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..h {
            let (mean, log_std) = self.model.policy_batch(&latents[i])?;
            let mut a = Tensor::zeros(&[b * g, da]);
            for r in 0..b {
                let prior_std: Vec<f64> = prior_log_std[i].row_slice(r).iter().map(|l| l.exp()).collect();
                let mut group = Tensor::zeros(&[g, da]);
                for k in 0..g {
                    let row = group.row_slice_mut(k);
                    for d in 0..da {
                        let m = mean.row_slice(r)[d];
                        let s = log_std.row_slice(r)[d].exp();
                        row[d] = m + s * self.train_rng.sample::<f64, _>(StandardNormal);
                    }
                    self.model.action_box.clip(row);
                }
                let group = threshold_actions(&group, prior_mean[i].row_slice(r), &prior_std, c);
                for k in 0..g {
                    a.row_slice_mut(r * g + k).copy_from_slice(group.row_slice(k));
                }
            }
            let zg = latents[i].repeat_rows(g);
            let q = self.model.value_batch(&zg, &a, false)?;
            let mut adv = Vec::with_capacity(b * g);
            for r in 0..b {
                let group_q = &q.data()[r * g..(r + 1) * g];
                adv.extend(advantages(rule, group_q, constraint.tau_adv)?);
            }
            for &x in &adv {
                adv_min = adv_min.min(x);
                adv_max = adv_max.max(x);
            }
            advs.push(Tensor::matrix(b * g, 1, adv)?);
            actions.push(a);
            let xi: Vec<f64> = (0..b * da).map(|_| self.train_rng.sample::<f64, _>(StandardNormal)).collect();
            noise.push(Tensor::matrix(b, da, xi)?);
        }
        let policy_batch = PolicyBatch {
            group_size: g,
            latents,
            actions,
            advantages: advs,
            prior_mean,
            prior_log_std,
            noise,
        };
        let epsilon = constraint.epsilon_at(self.policy_opt.step_count());
        let (policy_loss, policy_grads) =
            policy_loss_and_grads(PolicyHead::of(&self.model), &policy_batch, &constraint, epsilon)?;

        {
            let mut params = self.model.model_tensors_mut();
            self.model_opt.step(&mut params, &model_grads.model, "model loss")?;
        }
        let before = self.model.policy.clone();
        {
            let mut params = self.model.policy_tensors_mut();
            self.policy_opt.step(&mut params, &policy_grads, "policy loss")?;
        }
        self.prev_policy = before;
        self.model.update_target();
        self.counters.train_steps += 1;

        let mut r = MetricsRecord::new(Phase::Train, self.counters.env_steps, self.counters.train_steps);
        r.episode_return = self.cursor.last_return;
        r.model_loss = Some(model_loss);
        r.policy_loss = Some(PolicyLossRecord {
            grpo: policy_loss.grpo,
            kl_term: policy_loss.constraint,
            raw_kl: policy_loss.raw_kl,
            total: policy_loss.total,
        });
        r.planner = self.cursor.last_planner.take();
        r.advantage_min = Some(adv_min);
        r.advantage_max = Some(adv_max);
        r.skipped_train_steps = self.counters.skipped_train_steps;
        Ok(r)
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let e = evaluate(
            &self.model,
            &self.config.env,
            &self.config.planner,
            self.config.eval_episodes,
            self.config.eval_seed,
        )?;
        let mut r = MetricsRecord::new(Phase::Eval, self.counters.env_steps, self.counters.train_steps);
        r.episode_return = self.cursor.last_return;
        r.eval = Some(e);
        self.emit(r)
    }

    /// Runs to the step budget, then a final evaluation.
    pub fn run(&mut self) -> Result<TrainReport> {
        let total = self.config.total_steps;
        while self.counters.env_steps < total {
            let n = self.config.trajectory_length.min(total - self.counters.env_steps);
            self.collect(n)?;
            if self.counters.env_steps >= self.config.warmup_steps {
                for _ in 0..self.config.gradient_steps {
                    let r = self.train_step()?;
                    self.emit(r)?;
                }
            }
            self.counters.outer_iterations += 1;
            if self.config.eval_every > 0 && self.counters.env_steps >= self.next_eval && self.counters.env_steps < total {
                self.evaluate_now()?;
                while self.next_eval <= self.counters.env_steps {
                    self.next_eval += self.config.eval_every;
                }
            }
            if self.config.checkpoint_every > 0 && self.counters.env_steps >= self.next_checkpoint {
                while self.next_checkpoint <= self.counters.env_steps {
                    self.next_checkpoint += self.config.checkpoint_every;
                }
                self.save_checkpoint()?;
            }
        }
        let final_eval = if total > 0 {
            self.evaluate_now()?;
            self.records.last().and_then(|r| r.eval.clone())
        } else {
            None
        };
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        let report = TrainReport {
            env: self.config.env.clone(),
            seed: self.config.seed,
            counters: self.counters.clone(),
            clipped_actions: self.env.clipped_actions(),
            last_episode_return: self.cursor.last_return,
            final_eval,
            model_parameters: self.model.model_tensors().iter().map(|t| t.len()).sum::<usize>()
                + self.model.policy_tensors().iter().map(|t| t.len()).sum::<usize>(),
        };
        if let Some(dir) = self.run_dir.clone() {
            self.save_checkpoint()?;
            checkpoint::save_model(&dir.join("model.json"), &self.model)?;
            let p = dir.join("report.json");
            fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(report)
    }

    fn checkpoint_payload(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            model_opt: self.model_opt.clone(),
            policy_opt: self.policy_opt.clone(),
            prev_policy: self.prev_policy.clone(),
            buffer: self.buffer.clone(),
            collect_rng: self.collect_rng.clone(),
            train_rng: self.train_rng.clone(),
            env_state: self.env.state(),
            cursor: self.cursor.clone(),
            counters: self.counters.clone(),
            next_eval: self.next_eval,
            next_checkpoint: self.next_checkpoint,
            metrics_count: self.records.len(),
        }
    }

    /// Writes `checkpoints/latest.json` and a step-stamped copy.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let dir = self
            .run_dir
            .clone()
            .ok_or_else(|| Error::InvalidArgument("checkpointing needs a run directory".into()))?;
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        let payload = self.checkpoint_payload();
        let stamped = dir.join("checkpoints").join(format!("step-{:08}.json", self.counters.env_steps));
        checkpoint::save(&stamped, CHECKPOINT_KIND, &payload)?;
        let latest = dir.join("checkpoints").join("latest.json");
        checkpoint::save(&latest, CHECKPOINT_KIND, &payload)?;
        Ok(latest)
    }

    /// Rebuilds a trainer from a run directory's latest checkpoint. The
    /// metrics file is cut back to the records the checkpoint knew about.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        Self::resume_from(run_dir, &run_dir.join("checkpoints").join("latest.json"))
    }

    pub fn resume_from(run_dir: &Path, checkpoint_path: &Path) -> Result<Self> {
        let ck: TrainCheckpoint = checkpoint::load(checkpoint_path, CHECKPOINT_KIND)?;
        ck.config.validate()?;
        ck.model.validate()?;
        let mut env = make_env(&ck.config.env)?;
        env.restore(&ck.env_state)?;
        let metrics_path = run_dir.join("metrics.jsonl");
        let writer = MetricsWriter::truncate_to(&metrics_path, ck.metrics_count)?;
        let records = crate::metrics::read_metrics(&metrics_path)?;
        Ok(Self {
            config: ck.config,
            env,
            model: ck.model,
            model_opt: ck.model_opt,
            policy_opt: ck.policy_opt,
            prev_policy: ck.prev_policy,
            buffer: ck.buffer,
            collect_rng: ck.collect_rng,
            train_rng: ck.train_rng,
            cursor: ck.cursor,
            counters: ck.counters,
            next_eval: ck.next_eval,
            next_checkpoint: ck.next_checkpoint,
            records,
            writer: Some(writer),
            run_dir: Some(run_dir.to_path_buf()),
            started: Instant::now(),
        })
    }
}

/// Trains with `config`, persisting artifacts under `run_dir` when given.
pub fn run_training(config: TrainConfig, run_dir: Option<&Path>) -> Result<(TrainReport, Trainer)> {
    let mut t = Trainer::new(config)?;
    if let Some(d) = run_dir {
        t.attach_run_dir(d)?;
    }
    let report = t.run()?;
    Ok((report, t))
}

fn summarize(returns: Vec<f64>) -> EvalRecord {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    EvalRecord {
        mean_return: mean,
        std_return: var.sqrt(),
        returns,
    }
}

/// Deterministic evaluation: episode `k` resets from seed `seed + k` and
/// plans without exploration noise.
pub fn evaluate(
    model: &WorldModel,
    env_name: &str,
    planner: &PlannerConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalRecord> {
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes as u64 {
        let mut env = make_env(env_name)?;
        let mut reset_rng = stream(seed.wrapping_add(k), 0);
        let mut plan_rng = stream(seed.wrapping_add(k), 1);
        let mut obs = env.reset(&mut reset_rng);
        let mut prev: Option<TrajectoryDistribution> = None;
        let mut total = 0.0;
        loop {
            let z = model.encode(&obs)?;
            let p = plan(model, &z, prev.as_ref(), planner, false, &mut plan_rng)?;
            let step = env.step(&p.action);
            total += step.reward;
            prev = Some(p.distribution);
            obs = step.observation;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(summarize(returns))
}

/// Uniform-random actions under the same episode seeding as [`evaluate`].
pub fn evaluate_random(env_name: &str, episodes: usize, seed: u64) -> Result<EvalRecord> {
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes as u64 {
        let mut env = make_env(env_name)?;
        let mut reset_rng = stream(seed.wrapping_add(k), 0);
        let mut act_rng = stream(seed.wrapping_add(k), 1);
        env.reset(&mut reset_rng);
        let action_box = env.spec().action_box.clone();
        let mut total = 0.0;
        loop {
            let step = env.step(&action_box.sample_uniform(&mut act_rng));
            total += step.reward;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(summarize(returns))
}

/// Mean and population std of a sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let s = summarize(xs.to_vec());
    (s.mean_return, s.std_return)
}
