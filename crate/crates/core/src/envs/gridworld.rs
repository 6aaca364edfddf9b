//! Deterministic grid navigation, small enough to check by hand.

use crate::envs::{EnvCore, StepOutcome};

pub const GOAL_REWARD: f32 = 10.0;
pub const STEP_REWARD: f32 = -1.0;

/// Square grid, start at the top-left corner, goal at the bottom-right.
/// Actions 0..4 are up/down/left/right; off-grid moves keep the position.
/// Each step costs `-1`; landing on the goal yields `+10` and ends the
/// episode. Episodes also cap at `max_steps`.
#[derive(Clone)]
pub struct GridWorld {
    size: usize,
    row: usize,
    col: usize,
    steps: u32,
    max_steps: u32,
}

impl GridWorld {
    pub fn new() -> GridWorld {
        GridWorld::with_size(3, 50)
    }

    pub fn with_size(size: usize, max_steps: u32) -> GridWorld {
        assert!(size >= 2);
        GridWorld {
            size,
            row: 0,
            col: 0,
            steps: 0,
            max_steps,
        }
    }

    /// Best possible episode return: a shortest path of `2 (size - 1)` moves.
    pub fn optimal_return(&self) -> f32 {
        let moves = (2 * (self.size - 1)) as f32;
        STEP_REWARD * (moves - 1.0) + GOAL_REWARD
    }

    fn one_hot(&self) -> Vec<f32> {
        let mut obs = vec![0.0; self.size * self.size];
        obs[self.row * self.size + self.col] = 1.0;
        obs
    }
}

impl Default for GridWorld {
    fn default() -> Self {
        GridWorld::new()
    }
}

impl EnvCore for GridWorld {
    fn obs_dim(&self) -> usize {
        self.size * self.size
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, _seed: u64) -> Vec<f32> {
        self.row = 0;
        self.col = 0;
        self.steps = 0;
        self.one_hot()
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        match action {
            0 => self.row = self.row.saturating_sub(1),
            1 => self.row = (self.row + 1).min(self.size - 1),
            2 => self.col = self.col.saturating_sub(1),
            3 => self.col = (self.col + 1).min(self.size - 1),
            _ => unreachable!("action validated by the agent"),
        }
        self.steps += 1;
        let at_goal = self.row == self.size - 1 && self.col == self.size - 1;
        let reward = if at_goal { GOAL_REWARD } else { STEP_REWARD };
        let done = at_goal || self.steps >= self.max_steps;
        StepOutcome {
            obs: self.one_hot(),
            reward,
            done,
        }
    }

    fn clone_core(&self) -> Box<dyn EnvCore> {
        Box::new(self.clone())
    }
}
