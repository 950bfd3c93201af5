use std::f64::consts::PI;

use rand::Rng;

use super::{sanitize_action, wrap_angle, ActionBox, Env, EnvSpec, EnvState, Step, DEFAULT_DT};
use crate::error::{Error, Result};

/// Cart-pole swing-up on a bounded track.
///
/// The pole angle θ is measured from upright; episodes start hanging down
/// (θ ≈ π). Classic frictionless cart-pole equations with force `F = 10·u`,
/// `u ∈ [−1, 1]`. The cart is confined to `|x| ≤ 2.4`; reaching the end
/// zeroes the cart velocity.
///
/// Observation `[x, cos θ, sin θ, ẋ, θ̇]`. Reward on the pre-step state:
/// `cos θ − 0.01·x² − 0.001·u²`, in `[−1 − 0.01·2.4² − 0.001, 1]`.
#[derive(Clone, Debug)]
pub struct CartpoleSwingUp {
    spec: EnvSpec,
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub pole_half_length: f64,
    pub force_scale: f64,
    pub track_limit: f64,
    /// `[x, θ, ẋ, θ̇]`
    state: [f64; 4],
    steps: usize,
    clipped: u64,
}

impl Default for CartpoleSwingUp {
    fn default() -> Self {
        let track_limit = 2.4;
        let spec = EnvSpec {
            name: "cartpole".into(),
            state_dim: 5,
            action_dim: 1,
            action_box: ActionBox::symmetric(1, 1.0),
            max_episode_steps: 200,
            dt: DEFAULT_DT,
            reward_range: (-1.0 - 0.01 * track_limit * track_limit - 0.001, 1.0),
        };
        Self {
            spec,
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_scale: 10.0,
            track_limit,
            state: [0.0, PI, 0.0, 0.0],
            steps: 0,
            clipped: 0,
        }
    }
}

impl CartpoleSwingUp {
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
    }

    pub fn reward(&self, state: &[f64; 4], u: f64) -> f64 {
        state[1].cos() - 0.01 * state[0] * state[0] - 0.001 * u * u
    }

    /// `(ẍ, θ̈)` for the current state under force `f`.
    fn accelerations(&self, theta: f64, theta_dot: f64, force: f64) -> (f64, f64) {
        let total = self.cart_mass + self.pole_mass;
        let pl = self.pole_mass * self.pole_half_length;
        let (s, c) = theta.sin_cos();
        let temp = (force + pl * theta_dot * theta_dot * s) / total;
        let theta_acc = (self.gravity * s - c * temp)
            / (self.pole_half_length * (4.0 / 3.0 - self.pole_mass * c * c / total));
        let x_acc = temp - pl * theta_acc * c / total;
        (x_acc, theta_acc)
    }
}

impl Env for CartpoleSwingUp {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.state = [
            rng.random_range(-0.1..=0.1),
            PI + rng.random_range(-0.1..=0.1),
            rng.random_range(-0.05..=0.05),
            rng.random_range(-0.05..=0.05),
        ];
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (a, clipped) = sanitize_action(&self.spec, action);
        if clipped {
            self.clipped += 1;
        }
        let u = a[0];
        let reward = self.reward(&self.state, u);
        let dt = self.spec.dt;
        let [x, theta, x_dot, theta_dot] = self.state;
        let (x_acc, theta_acc) = self.accelerations(theta, theta_dot, self.force_scale * u);
        let mut x_dot = x_dot + dt * x_acc;
        let theta_dot = theta_dot + dt * theta_acc;
        let x_new = x + dt * x_dot;
        let x_clamped = x_new.clamp(-self.track_limit, self.track_limit);
        if x_clamped != x_new {
            x_dot = 0.0;
        }
        self.state = [x_clamped, wrap_angle(theta + dt * theta_dot), x_dot, theta_dot];
        self.steps += 1;
        let failed = self.state.iter().any(|v| !v.is_finite());
        Step {
            observation: self.observation(),
            reward,
            done: failed || self.steps >= self.spec.max_episode_steps,
            failed,
        }
    }

    fn observation(&self) -> Vec<f64> {
        let [x, theta, x_dot, theta_dot] = self.state;
        vec![x, theta.cos(), theta.sin(), x_dot, theta_dot]
    }

    fn state(&self) -> EnvState {
        EnvState {
            physical: self.state.to_vec(),
            steps: self.steps,
        }
    }

    fn restore(&mut self, state: &EnvState) -> Result<()> {
        let physical: [f64; 4] = state
            .physical
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape("cartpole state", 4, state.physical.len()))?;
        self.state = physical;
        self.steps = state.steps;
        Ok(())
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}
