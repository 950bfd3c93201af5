//! Sampling-based trajectory optimization in latent space.
//!
//! Each iteration draws action sequences from the current per-step Gaussian,
//! mixes in policy rollouts, scores everything with the H-step return
//! estimate and refits the Gaussian to the exponentially weighted top-k.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::ActionBox;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::world_model::{LatentState, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub num_samples: usize,
    pub num_policy_samples: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub iterations: usize,
    pub min_std: f64,
    pub max_std: f64,
    /// Std of a freshly initialized step.
    pub init_std: f64,
    /// Best elites carried into the next iteration's pool.
    pub retain_elites: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            num_samples: 512,
            num_policy_samples: 24,
            top_k: 64,
            temperature: 0.5,
            iterations: 6,
            min_std: 0.05,
            max_std: 2.0,
            init_std: 2.0,
            retain_elites: 1,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("planner: {m}")));
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        if self.num_samples == 0 {
            return bad("num_samples must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.top_k == 0 || self.top_k > self.num_samples + self.num_policy_samples {
            return bad("top_k must lie in [1, num_samples + num_policy_samples]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.min_std > 0.0 && self.min_std <= self.max_std && self.max_std.is_finite()) {
            return bad("need 0 < min_std <= max_std");
        }
        if !(self.min_std..=self.max_std).contains(&self.init_std) {
            return bad("init_std must lie in [min_std, max_std]");
        }
        if self.retain_elites > self.top_k {
            return bad("retain_elites must be <= top_k");
        }
        Ok(())
    }
}

/// Per-step Gaussian over action sequences. Both tensors are `[H, d_a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl TrajectoryDistribution {
    pub fn initial(horizon: usize, action_box: &ActionBox, std: f64) -> Self {
        let da = action_box.dim();
        let center = action_box.center();
        let mu = Tensor::new(vec![horizon, da], center.repeat(horizon)).expect("consistent shape");
        Self {
            mu,
            sigma: Tensor::filled(&[horizon, da], std),
        }
    }

    pub fn horizon(&self) -> usize {
        self.mu.rows()
    }

    /// Receding-horizon shift: step t takes step t+1's moments, the last step
    /// restarts at the box center with `std`.
    pub fn shifted(&self, action_box: &ActionBox, std: f64) -> Self {
        let h = self.horizon();
        let mut next = self.clone();
        for t in 0..h.saturating_sub(1) {
            next.mu.row_slice_mut(t).copy_from_slice(self.mu.row_slice(t + 1));
            next.sigma.row_slice_mut(t).copy_from_slice(self.sigma.row_slice(t + 1));
        }
        next.mu.row_slice_mut(h - 1).copy_from_slice(&action_box.center());
        next.sigma.row_slice_mut(h - 1).fill(std);
        next
    }
}

/// An action sequence `[H, d_a]` and its estimated return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub actions: Tensor,
    pub phi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub iterations: usize,
    pub elite_phi_mean: f64,
    pub elite_phi_max: f64,
    /// Best elite return after each iteration.
    pub phi_max_per_iteration: Vec<f64>,
    /// Every sample scored −∞; the policy mean was returned.
    pub fallback: bool,
}

/// What the planner needs from a model.
pub trait ReturnModel {
    fn action_box(&self) -> &ActionBox;

    /// Returns for `n` sequences from `z0`; `actions[t]` is `[n, d_a]`.
    /// Non-finite returns are reported as −∞.
    fn score(&self, z0: &LatentState, actions: &[Tensor]) -> Result<Vec<f64>>;

    /// `count` sequences of `horizon` steps sampled from the policy.
    fn policy_rollouts(
        &self,
        z0: &LatentState,
        horizon: usize,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Tensor>>;

    /// Action used when planning breaks down.
    fn fallback_action(&self, z0: &LatentState) -> Result<Vec<f64>>;
}

impl ReturnModel for WorldModel {
    fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    fn score(&self, z0: &LatentState, actions: &[Tensor]) -> Result<Vec<f64>> {
        let n = actions.first().map_or(0, Tensor::rows);
        let mut z = Tensor::row(z0.0.clone()).repeat_rows(n);
        let mut phi = vec![0.0; n];
        let mut discount = 1.0;
        for a in actions {
            let r = self.reward_batch(&z, a)?;
            for (p, r) in phi.iter_mut().zip(r.data()) {
                *p += discount * r;
            }
            z = self.dynamics_batch(&z, a)?;
            discount *= self.gamma;
        }
        let a_h = self.policy_mean_action_batch(&z)?;
        let q = self.value_batch(&z, &a_h, false)?;
        for (p, q) in phi.iter_mut().zip(q.data()) {
            *p += discount * q;
            if !p.is_finite() {
                *p = f64::NEG_INFINITY;
            }
        }
        Ok(phi)
    }

    fn policy_rollouts(
        &self,
        z0: &LatentState,
        horizon: usize,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Tensor>> {
        let mut z = Tensor::row(z0.0.clone()).repeat_rows(count);
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (mean, log_std) = self.policy_batch(&z)?;
            let mut a = mean;
            for (x, l) in a.data_mut().iter_mut().zip(log_std.data()) {
                *x += l.exp() * rng.sample::<f64, _>(StandardNormal);
            }
            for r in 0..count {
                self.action_box.clip(a.row_slice_mut(r));
            }
            z = self.dynamics_batch(&z, &a)?;
            out.push(a);
        }
        Ok(out)
    }

    fn fallback_action(&self, z0: &LatentState) -> Result<Vec<f64>> {
        Ok(self.policy_mean_action_batch(&Tensor::row(z0.0.clone()))?.into_data())
    }
}

/// `φ = Σ_t γ^t r̂_t + γ^H q̂(z_H, π mean)` for one sequence `[H, d_a]`.
pub fn estimate_return(model: &WorldModel, z0: &LatentState, actions: &Tensor) -> Result<f64> {
    if actions.cols() != model.action_dim {
        return Err(Error::shape("action sequence", model.action_dim, actions.cols()));
    }
    if !z0.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    let steps: Vec<Tensor> = (0..actions.rows())
        .map(|t| Tensor::row(actions.row_slice(t).to_vec()))
        .collect();
    if steps.is_empty() {
        return Err(Error::InvalidArgument("action sequence needs H >= 1".into()));
    }
    Ok(model.score(z0, &steps)?[0])
}

/// Exponentially weighted moments of the elites,
/// `Ω_i = exp(τ·(φ_i − max φ))`, with σ clamped to `std_bounds`.
pub fn compute_moments(
    elites: &[ScoredTrajectory],
    temperature: f64,
    std_bounds: (f64, f64),
) -> Result<TrajectoryDistribution> {
    let first = elites
        .first()
        .ok_or_else(|| Error::InvalidArgument("compute_moments needs at least one elite".into()))?;
    if let Some(e) = elites.iter().find(|e| !e.phi.is_finite()) {
        return Err(Error::InvalidArgument(format!("elite return {} is not finite", e.phi)));
    }
    if let Some(e) = elites.iter().find(|e| e.actions.shape() != first.actions.shape()) {
        return Err(Error::shape(
            "elite actions",
            format!("{:?}", first.actions.shape()),
            format!("{:?}", e.actions.shape()),
        ));
    }
    let max_phi = elites.iter().map(|e| e.phi).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = elites.iter().map(|e| (temperature * (e.phi - max_phi)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let len = first.actions.len();
    let mut mu = vec![0.0; len];
    for (e, w) in elites.iter().zip(&weights) {
        for (m, a) in mu.iter_mut().zip(e.actions.data()) {
            *m += w * a;
        }
    }
    mu.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; len];
    for (e, w) in elites.iter().zip(&weights) {
        for ((v, a), m) in var.iter_mut().zip(e.actions.data()).zip(&mu) {
            *v += w * (a - m) * (a - m);
        }
    }
    let (lo, hi) = std_bounds;
    let sigma: Vec<f64> = var.iter().map(|v| (v / total).sqrt().clamp(lo, hi)).collect();
    let shape = first.actions.shape().to_vec();
    Ok(TrajectoryDistribution {
        mu: Tensor::new(shape.clone(), mu)?,
        sigma: Tensor::new(shape, sigma)?,
    })
}

/// Indices of the `k` largest finite returns, best first. Ties keep
/// sample order.
pub fn top_k_indices(phi: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..phi.len()).filter(|&i| phi[i].is_finite()).collect();
    idx.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]));
    idx.truncate(k);
    idx
}

fn sequence(actions: &[Tensor], i: usize) -> Tensor {
    let da = actions[0].cols();
    let data: Vec<f64> = actions.iter().flat_map(|a| a.row_slice(i).to_vec()).collect();
    Tensor::new(vec![actions.len(), da], data).expect("consistent shape")
}

/// Output of one planning call.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub action: Vec<f64>,
    pub distribution: TrajectoryDistribution,
    pub diagnostics: PlanDiagnostics,
}

/// Plans from `z0`. `prev` is the previous step's distribution, shifted
/// here for the warm start. With `explore`, the returned action is
/// perturbed by the final first-step σ.
pub fn plan<M: ReturnModel + ?Sized>(
    model: &M,
    z0: &LatentState,
    prev: Option<&TrajectoryDistribution>,
    config: &PlannerConfig,
    explore: bool,
    rng: &mut dyn RngCore,
) -> Result<Plan> {
    config.validate()?;
    let action_box = model.action_box().clone();
    let (h, da) = (config.horizon, action_box.dim());
    let mut dist = match prev {
        Some(p) if p.horizon() == h && p.mu.cols() == da => p.shifted(&action_box, config.init_std),
        _ => TrajectoryDistribution::initial(h, &action_box, config.init_std),
    };

    let policy_samples = if config.num_policy_samples > 0 {
        Some(model.policy_rollouts(z0, h, config.num_policy_samples, rng)?)
    } else {
        None
    };
    let policy_phi = match &policy_samples {
        Some(p) => model.score(z0, p)?,
        None => Vec::new(),
    };

    let mut diagnostics = PlanDiagnostics::default();
    let mut retained: Vec<ScoredTrajectory> = Vec::new();
    let mut elites: Vec<ScoredTrajectory> = Vec::new();
    for _ in 0..config.iterations {
        let n = config.num_samples;
        let mut samples = Vec::with_capacity(h);
        for t in 0..h {
            let mut a = Tensor::zeros(&[n, da]);
            for i in 0..n {
                let row = a.row_slice_mut(i);
                for d in 0..da {
                    let m = dist.mu.row_slice(t)[d];
                    let s = dist.sigma.row_slice(t)[d];
                    row[d] = m + s * rng.sample::<f64, _>(StandardNormal);
                }
                action_box.clip(row);
            }
            samples.push(a);
        }
        let phi = model.score(z0, &samples)?;

        let mut pool: Vec<ScoredTrajectory> = Vec::with_capacity(n + policy_phi.len() + retained.len());
        let mut pool_phi: Vec<f64> = Vec::with_capacity(pool.capacity());
        for (i, &p) in phi.iter().enumerate() {
            pool.push(ScoredTrajectory {
                actions: sequence(&samples, i),
                phi: p,
            });
            pool_phi.push(p);
        }
        if let Some(ps) = &policy_samples {
            for (i, &p) in policy_phi.iter().enumerate() {
                pool.push(ScoredTrajectory {
                    actions: sequence(ps, i),
                    phi: p,
                });
                pool_phi.push(p);
            }
        }
        for e in retained.drain(..) {
            pool_phi.push(e.phi);
            pool.push(e);
        }

        let top = top_k_indices(&pool_phi, config.top_k);
        if top.is_empty() {
            diagnostics.fallback = true;
            diagnostics.iterations += 1;
            diagnostics.phi_max_per_iteration.push(f64::NEG_INFINITY);
            continue;
        }
        elites = top.iter().map(|&i| pool[i].clone()).collect();
        dist = compute_moments(&elites, config.temperature, (config.min_std, config.max_std))?;
        retained = elites[..config.retain_elites.min(elites.len())].to_vec();
        diagnostics.iterations += 1;
        diagnostics.phi_max_per_iteration.push(elites[0].phi);
    }

    if elites.is_empty() {
        diagnostics.fallback = true;
        diagnostics.elite_phi_mean = f64::NEG_INFINITY;
        diagnostics.elite_phi_max = f64::NEG_INFINITY;
        let action = model.fallback_action(z0)?;
        let distribution = TrajectoryDistribution::initial(h, &action_box, config.init_std);
        return Ok(Plan {
            action,
            distribution,
            diagnostics,
        });
    }
    diagnostics.fallback = false;
    diagnostics.elite_phi_max = elites[0].phi;
    diagnostics.elite_phi_mean = elites.iter().map(|e| e.phi).sum::<f64>() / elites.len() as f64;

    let mut action = dist.mu.row_slice(0).to_vec();
    if explore {
        for (a, s) in action.iter_mut().zip(dist.sigma.row_slice(0)) {
            *a += s * rng.sample::<f64, _>(StandardNormal);
        }
        action_box.clip(&mut action);
    }
    Ok(Plan {
        action,
        distribution: dist,
        diagnostics,
    })
}

/// `φ = −‖A − C‖²` over the whole sequence; a known-optimum stand-in for a
/// learned model.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    /// `[H, d_a]` optimum.
    pub target: Tensor,
    pub action_box: ActionBox,
}

impl ReturnModel for QuadraticObjective {
    fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    fn score(&self, _z0: &LatentState, actions: &[Tensor]) -> Result<Vec<f64>> {
        if actions.len() != self.target.rows() {
            return Err(Error::shape("quadratic horizon", self.target.rows(), actions.len()));
        }
        let n = actions.first().map_or(0, Tensor::rows);
        Ok((0..n)
            .map(|i| {
                -actions
                    .iter()
                    .enumerate()
                    .map(|(t, a)| {
                        a.row_slice(i)
                            .iter()
                            .zip(self.target.row_slice(t))
                            .map(|(x, c)| (x - c) * (x - c))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .collect())
    }

    fn policy_rollouts(
        &self,
        _z0: &LatentState,
        horizon: usize,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Tensor>> {
        let da = self.action_box.dim();
        (0..horizon)
            .map(|_| {
                let data: Vec<f64> = (0..count).flat_map(|_| self.action_box.sample_uniform(rng)).collect();
                Tensor::new(vec![count, da], data)
            })
            .collect()
    }

    fn fallback_action(&self, _z0: &LatentState) -> Result<Vec<f64>> {
        Ok(self.action_box.center())
    }
}
