//! Toy continuous-control tasks with closed-form dynamics.
//!
//! All environments integrate their ODE with semi-implicit Euler at
//! `dt = 0.05` s and clip out-of-box actions, counting each clipped call.

mod cartpole;
mod pendulum;
mod point_mass;

pub use cartpole::CartpoleSwingUp;
pub use pendulum::Pendulum;
pub use point_mass::PointMass;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 0.05;

/// Axis-aligned action bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::Config(format!(
                "action bounds of length {} and {}",
                low.len(),
                high.len()
            )));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action_low must be < action_high elementwise".into()));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self {
            low: vec![-bound; dim],
            high: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(x, (l, h))| *x >= *l && *x <= *h)
    }

    /// Clips in place; returns whether any entry moved.
    pub fn clip(&self, a: &mut [f64]) -> bool {
        let mut clipped = false;
        for (x, (l, h)) in a.iter_mut().zip(self.low.iter().zip(&self.high)) {
            let c = x.clamp(*l, *h);
            if c != *x {
                clipped = true;
                *x = c;
            }
        }
        clipped
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| rng.random_range(*l..=*h))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_box: ActionBox,
    pub max_episode_steps: usize,
    pub dt: f64,
    /// Closed interval every per-step reward lies in.
    pub reward_range: (f64, f64),
}

/// Physical state plus step counter, enough to resume an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub physical: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode over, by step limit or failure.
    pub done: bool,
    /// The state became non-finite; the episode was cut short.
    pub failed: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Draws an initial state and zeroes the step counter.
    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    fn step(&mut self, action: &[f64]) -> Step;

    fn observation(&self) -> Vec<f64>;

    fn state(&self) -> EnvState;

    fn restore(&mut self, state: &EnvState) -> Result<()>;

    /// Number of `step` calls whose action had to be clipped.
    fn clipped_actions(&self) -> u64;
}

pub fn env_names() -> &'static [&'static str] {
    &["pendulum", "point_mass", "cartpole"]
}

pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::default())),
        "point_mass" | "point-mass" => Ok(Box::new(PointMass::default())),
        "cartpole" | "cartpole_swingup" => Ok(Box::new(CartpoleSwingUp::default())),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

pub fn env_spec(name: &str) -> Result<EnvSpec> {
    Ok(make_env(name)?.spec().clone())
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    (theta + PI).rem_euclid(TAU) - PI
}

/// Copies `action`, clipping into the box. Returns the usable action and
/// whether clipping happened. Non-finite entries become the box center.
pub(crate) fn sanitize_action(spec: &EnvSpec, action: &[f64]) -> (Vec<f64>, bool) {
    let mut a: Vec<f64> = action.to_vec();
    a.resize(spec.action_dim, 0.0);
    let mut clipped = action.len() != spec.action_dim;
    let center = spec.action_box.center();
    for (x, c) in a.iter_mut().zip(&center) {
        if !x.is_finite() {
            *x = *c;
            clipped = true;
        }
    }
    clipped |= spec.action_box.clip(&mut a);
    (a, clipped)
}
