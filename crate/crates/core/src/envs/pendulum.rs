use std::f64::consts::PI;

use rand::Rng;

use super::{sanitize_action, wrap_angle, ActionBox, Env, EnvSpec, EnvState, Step, DEFAULT_DT};
use crate::error::{Error, Result};

/// Torque-limited pendulum swing-up.
///
/// The angle θ is measured from the hanging-down rest position, so the
/// upright target is θ = π. Dynamics:
///
/// ```text
/// θ̈ = −(g/l)·sin θ + u/(m·l²) − damping·θ̇
/// ```
///
/// Observation is `[cos θ, sin θ, θ̇]`. The per-step reward, evaluated on the
/// pre-step state and the applied torque, is
/// `−(φ² + 0.1·θ̇² + 0.001·u²)` with `φ = wrap(θ − π)` the deviation from
/// upright. |θ̇| is capped at `max_speed`, which bounds the reward to
/// `[−(π² + 0.1·max_speed² + 0.001·max_torque²), 0]`.
///
/// Initial state: θ ~ U[−π, π), θ̇ ~ U[−1, 1].
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub max_speed: f64,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    clipped: u64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new(2.0, 200)
    }
}

impl Pendulum {
    pub fn new(max_torque: f64, max_episode_steps: usize) -> Self {
        let max_speed = 8.0;
        let spec = EnvSpec {
            name: "pendulum".into(),
            state_dim: 3,
            action_dim: 1,
            action_box: ActionBox::symmetric(1, max_torque),
            max_episode_steps,
            dt: DEFAULT_DT,
            reward_range: (-(PI * PI + 0.1 * max_speed * max_speed + 0.001 * max_torque * max_torque), 0.0),
        };
        Self {
            spec,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
            max_speed,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            clipped: 0,
        }
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.theta_dot
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    /// Kinetic plus potential energy, zero at the hanging rest position.
    pub fn energy(&self) -> f64 {
        let (m, l, g) = (self.mass, self.length, self.gravity);
        0.5 * m * l * l * self.theta_dot * self.theta_dot + m * g * l * (1.0 - self.theta.cos())
    }

    pub fn reward(&self, theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let phi = wrap_angle(theta - PI);
        -(phi * phi + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
    }

    fn angular_acceleration(&self, theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let (m, l, g) = (self.mass, self.length, self.gravity);
        -(g / l) * theta.sin() + torque / (m * l * l) - self.damping * theta_dot
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (a, clipped) = sanitize_action(&self.spec, action);
        if clipped {
            self.clipped += 1;
        }
        let u = a[0];
        let reward = self.reward(self.theta, self.theta_dot, u);
        let dt = self.spec.dt;
        let acc = self.angular_acceleration(self.theta, self.theta_dot, u);
        self.theta_dot = (self.theta_dot + dt * acc).clamp(-self.max_speed, self.max_speed);
        self.theta = wrap_angle(self.theta + dt * self.theta_dot);
        self.steps += 1;

        let failed = !(self.theta.is_finite() && self.theta_dot.is_finite());
        Step {
            observation: self.observation(),
            reward,
            done: failed || self.steps >= self.spec.max_episode_steps,
            failed,
        }
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    fn state(&self) -> EnvState {
        EnvState {
            physical: vec![self.theta, self.theta_dot],
            steps: self.steps,
        }
    }

    fn restore(&mut self, state: &EnvState) -> Result<()> {
        if state.physical.len() != 2 {
            return Err(Error::shape("pendulum state", 2, state.physical.len()));
        }
        self.theta = state.physical[0];
        self.theta_dot = state.physical[1];
        self.steps = state.steps;
        Ok(())
    }

    fn clipped_actions(&self) -> u64 {
        self.clipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upright_equilibrium_is_a_fixed_point() {
        let mut env = Pendulum::default();
        env.set_state(PI, 0.0);
        let step = env.step(&[0.0]);
        assert!(wrap_angle(env.angle() - PI).abs() < 1e-6);
        assert!(env.angular_velocity().abs() < 1e-6);
        assert!(step.reward.abs() < 1e-12);
    }

    #[test]
    fn single_step_matches_hand_integration() {
        // θ = π/2, θ̇ = 0, u = 0, g/l = 10, dt = 0.05:
        // θ̇' = 0 + 0.05 · (−10 · sin(π/2)) = −0.5
        // θ'  = π/2 + 0.05 · (−0.5) = π/2 − 0.025
        let mut env = Pendulum::default();
        env.set_state(PI / 2.0, 0.0);
        let step = env.step(&[0.0]);
        assert!((env.angular_velocity() + 0.5).abs() < 1e-12);
        assert!((env.angle() - (PI / 2.0 - 0.025)).abs() < 1e-12);
        let t = PI / 2.0 - 0.025;
        assert!((step.observation[0] - t.cos()).abs() < 1e-12);
        assert!((step.observation[1] - t.sin()).abs() < 1e-12);
        // Reward on the pre-step state: −((π/2)²).
        assert!((step.reward + (PI / 2.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn reset_angle_in_range_and_reproducible() {
        let mut env = Pendulum::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            env.reset(&mut rng);
            assert!((-PI..=PI).contains(&env.angle()));
        }
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(11));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_box_torque_is_clipped_and_counted() {
        let mut a = Pendulum::default();
        let mut b = Pendulum::default();
        a.set_state(1.0, 0.0);
        b.set_state(1.0, 0.0);
        a.step(&[5.0]);
        b.step(&[2.0]);
        assert_eq!(a.state(), b.state());
        assert_eq!(a.clipped_actions(), 1);
        assert_eq!(b.clipped_actions(), 0);
    }

    #[test]
    fn episode_ends_at_step_limit() {
        let mut env = Pendulum::new(2.0, 3);
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(!env.step(&[0.0]).done);
        assert!(!env.step(&[0.0]).done);
        assert!(env.step(&[0.0]).done);
    }

    #[test]
    fn nan_state_terminates_with_failure() {
        let mut env = Pendulum::default();
        env.set_state(f64::NAN, 0.0);
        let step = env.step(&[0.0]);
        assert!(step.done && step.failed);
    }
}
