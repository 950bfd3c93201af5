use rand::Rng;

use super::{sanitize_action, ActionBox, Env, EnvSpec, EnvState, Step, DEFAULT_DT};
use crate::error::{Error, Result};

/// Planar point mass pushed toward a goal at the origin.
///
/// State and observation `[x, y, vx, vy]`; action is a force in `[−1, 1]²`.
/// `v ← v + dt·(gain·u − drag·v)`, then `p ← p + dt·v`. Positions live in
/// `[−arena, arena]²`; hitting a wall zeroes that velocity component.
///
/// Reward on the pre-step state: `−‖p‖ + bonus` where `bonus = 1` inside
/// `goal_radius`. Range `[−arena·√2, 1]`.
///
/// Initial state: p ~ U[−1, 1]², v = 0.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub gain: f64,
    pub drag: f64,
    pub arena: f64,
    pub goal_radius: f64,
    pub goal_bonus: f64,
    state: [f64; 4],
    steps: usize,
    clipped: u64,
}

impl Default for PointMass {
    fn default() -> Self {
        let arena = 2.0;
        let spec = EnvSpec {
            name: "point_mass".into(),
            state_dim: 4,
            action_dim: 2,
            action_box: ActionBox::symmetric(2, 1.0),
            max_episode_steps: 100,
            dt: DEFAULT_DT,
            reward_range: (-arena * std::f64::consts::SQRT_2, 1.0),
        };
        Self {
            spec,
            gain: 2.0,
            drag: 0.5,
            arena,
            goal_radius: 0.1,
            goal_bonus: 1.0,
            state: [0.0; 4],
            steps: 0,
            clipped: 0,
        }
    }
}

impl PointMass {
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
    }

    pub fn reward(&self, state: &[f64; 4]) -> f64 {
        let dist = (state[0] * state[0] + state[1] * state[1]).sqrt();
        let bonus = if dist < self.goal_radius { self.goal_bonus } else { 0.0 };
        -dist + bonus
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.state = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0, 0.0];
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (a, clipped) = sanitize_action(&self.spec, action);
        if clipped {
            self.clipped += 1;
        }
        let reward = self.reward(&self.state);
        let dt = self.spec.dt;
        for axis in 0..2 {
            let v = self.state[2 + axis] + dt * (self.gain * a[axis] - self.drag * self.state[2 + axis]);
            let p = self.state[axis] + dt * v;
            let pc = p.clamp(-self.arena, self.arena);
            self.state[axis] = pc;
            self.state[2 + axis] = if pc != p { 0.0 } else { v };
        }
        self.steps += 1;
        let failed = self.state.iter().any(|x| !x.is_finite());
        Step {
            observation: self.observation(),
            reward,
            done: failed || self.steps >= self.spec.max_episode_steps,
            failed,
        }
    }

    fn observation(&self) -> Vec<f64> {
        self.state.to_vec()
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
            .map_err(|_| Error::shape("point_mass state", 4, state.physical.len()))?;
        self.state = physical;
        self.steps = state.steps;
        Ok(())
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}
