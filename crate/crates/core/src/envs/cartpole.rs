//! Cart-pole balancing with the classic dynamics, integrated by explicit
//! Euler at dt = 0.02.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::envs::{EnvCore, StepOutcome};

const GRAVITY: f32 = 9.8;
const CART_MASS: f32 = 1.0;
const POLE_MASS: f32 = 0.1;
const TOTAL_MASS: f32 = CART_MASS + POLE_MASS;
const HALF_POLE_LENGTH: f32 = 0.5;
const POLE_MASS_LENGTH: f32 = POLE_MASS * HALF_POLE_LENGTH;
const FORCE_MAG: f32 = 10.0;
const TAU: f32 = 0.02;

/// Episode ends beyond ~12 degrees of pole tilt.
pub const ANGLE_LIMIT: f32 = 12.0 * std::f32::consts::PI / 180.0;
/// ... or when the cart leaves the track.
pub const POSITION_LIMIT: f32 = 2.4;
/// ... or after this many steps.
pub const MAX_STEPS: u32 = 200;

/// State is `[x, x_dot, theta, theta_dot]`; actions 0/1 push left/right with
/// a fixed force. Reward is 1 per step, terminal step included, so a full
/// episode returns 200.
#[derive(Clone)]
pub struct CartPole {
    state: [f32; 4],
    steps: u32,
}

impl CartPole {
    pub fn new() -> CartPole {
        CartPole {
            state: [0.0; 4],
            steps: 0,
        }
    }

    /// Starts from an explicit state instead of the randomized reset.
    pub fn with_state(state: [f32; 4]) -> CartPole {
        CartPole { state, steps: 0 }
    }

    pub fn state(&self) -> [f32; 4] {
        self.state
    }
}

impl Default for CartPole {
    fn default() -> Self {
        CartPole::new()
    }
}

impl EnvCore for CartPole {
    fn obs_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = StdRng::seed_from_u64(seed);
        for v in &mut self.state {
            *v = rng.gen_range(-0.05..0.05);
        }
        self.steps = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let cos = theta.cos();
        let sin = theta.sin();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_POLE_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;

        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;

        let fell = self.state[0].abs() > POSITION_LIMIT || self.state[2].abs() > ANGLE_LIMIT;
        let done = fell || self.steps >= MAX_STEPS;
        StepOutcome {
            obs: self.state.to_vec(),
            reward: 1.0,
            done,
        }
    }

    fn clone_core(&self) -> Box<dyn EnvCore> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_threshold_angle_terminates_in_one_step() {
        // Just inside the limit with high angular velocity: one Euler step
        // pushes theta past 12 degrees.
        let mut env = CartPole::with_state([0.0, 0.0, ANGLE_LIMIT - 1e-4, 2.0]);
        let out = env.step(1);
        assert!(out.done);
        assert!(env.state()[2].abs() > ANGLE_LIMIT);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn balanced_start_survives_early_steps() {
        let mut env = CartPole::new();
        env.reset(3);
        for step in 0..5 {
            // Alternate pushes roughly hold the pole for a few steps.
            let out = env.step(step % 2);
            assert!(!out.done, "terminated unexpectedly at step {step}");
        }
    }

    #[test]
    fn episode_caps_at_max_steps() {
        let mut env = CartPole::new();
        env.reset(0);
        let mut steps = 0;
        loop {
            // Crude balance: push against the pole's lean.
            let action = if env.state()[2] > 0.0 { 1 } else { 0 };
            steps += 1;
            if env.step(action).done {
                break;
            }
        }
        assert!(steps <= MAX_STEPS);
    }

    #[test]
    fn seeded_reset_is_reproducible() {
        let mut a = CartPole::new();
        let mut b = CartPole::new();
        assert_eq!(a.reset(42), b.reset(42));
        assert_ne!(a.reset(1), b.reset(2));
    }
}
