//! A parametric environment whose dynamics are trainable tensors, so the
//! loss gradient flows through the unrolled environment into both the policy
//! and the world model.

use crate::agent::{Agent, Context};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// Linear dynamics `s' = s A + a B` with reward `-|s'|^2` per item.
///
/// Speaks the same variable vocabulary as [`EnvAgent`](crate::envs::EnvAgent)
/// but reads the previous state back from the workspace, so the whole
/// rollout stays on the autodiff tape: `env/env_obs` and `env/reward` are
/// differentiable in the dynamics parameters and in every past action.
pub struct LinearDynamicsAgent {
    state_matrix: Param,
    action_matrix: Param,
    initial_state: Tensor,
    state_dim: usize,
    action_dim: usize,
}

impl LinearDynamicsAgent {
    /// `initial_state` is `[B, state_dim]`; `state_matrix` `[state_dim,
    /// state_dim]`; `action_matrix` `[action_dim, state_dim]`.
    pub fn new(
        state_matrix: Tensor,
        action_matrix: Tensor,
        initial_state: Tensor,
    ) -> Result<LinearDynamicsAgent> {
        let state_dim = initial_state
            .shape()
            .get(1)
            .copied()
            .ok_or(Error::ShapeMismatch {
                op: "diff_env",
                lhs: initial_state.shape().to_vec(),
                rhs: vec![0, 0],
            })?;
        if state_matrix.shape() != [state_dim, state_dim] {
            return Err(Error::ShapeMismatch {
                op: "diff_env",
                lhs: state_matrix.shape().to_vec(),
                rhs: vec![state_dim, state_dim],
            });
        }
        let action_dim = action_matrix
            .shape()
            .first()
            .copied()
            .ok_or(Error::ShapeMismatch {
                op: "diff_env",
                lhs: action_matrix.shape().to_vec(),
                rhs: vec![0, state_dim],
            })?;
        if action_matrix.shape() != [action_dim, state_dim] {
            return Err(Error::ShapeMismatch {
                op: "diff_env",
                lhs: action_matrix.shape().to_vec(),
                rhs: vec![action_dim, state_dim],
            });
        }
        Ok(LinearDynamicsAgent {
            state_matrix: Param::new("diff_env/state_matrix", state_matrix),
            action_matrix: Param::new("diff_env/action_matrix", action_matrix),
            initial_state,
            state_dim,
            action_dim,
        })
    }

    /// Stable-ish default: `A = damping * I`, `B = 1`, all-ones start.
    pub fn with_dims(
        batch: usize,
        state_dim: usize,
        action_dim: usize,
        damping: f32,
    ) -> Result<LinearDynamicsAgent> {
        let mut a = vec![0.0; state_dim * state_dim];
        for i in 0..state_dim {
            a[i * state_dim + i] = damping;
        }
        LinearDynamicsAgent::new(
            Tensor::from_vec(vec![state_dim, state_dim], a),
            Tensor::ones(vec![action_dim, state_dim]),
            Tensor::ones(vec![batch, state_dim]),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn dynamics_params(&self) -> (Param, Param) {
        (self.state_matrix.clone(), self.action_matrix.clone())
    }
}

impl Agent for LinearDynamicsAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let batch = self.initial_state.shape()[0];
        let zeros = Tensor::zeros(vec![batch]);

        if t == 0 {
            ctx.set("env/env_obs", 0, self.initial_state.clone())?;
            ctx.set("env/reward", 0, zeros.clone())?;
            ctx.set("env/done", 0, zeros.clone())?;
            ctx.set("env/timestep", 0, zeros.clone())?;
            ctx.set("env/initial_state", 0, Tensor::ones(vec![batch]))?;
            ctx.set("env/cumulated_reward", 0, zeros)?;
            return Ok(());
        }

        let prev_state = ctx.get("env/env_obs", t - 1)?;
        let action = ctx.get("action", t - 1).map_err(|e| match e {
            Error::UnknownVariable { .. } | Error::UnwrittenTimestep { .. } => {
                Error::MissingAction { t: t - 1 }
            }
            other => other,
        })?;
        if action.shape() != [batch, self.action_dim] {
            return Err(Error::ShapeMismatch {
                op: "diff_env",
                lhs: action.shape().to_vec(),
                rhs: vec![batch, self.action_dim],
            });
        }

        let next = prev_state
            .matmul(&self.state_matrix.value())?
            .add(&action.matmul(&self.action_matrix.value())?)?;
        // Per-item -|s'|^2 via a ones column: [B, d] x [d, 1] -> [B, 1].
        let squared = next.mul(&next)?;
        let row_sums = squared.matmul(&Tensor::ones(vec![self.state_dim, 1]))?;
        let reward = row_sums.reshape(vec![batch])?.neg();

        let prev_cumulated = ctx.get("env/cumulated_reward", t - 1)?;
        let cumulated = prev_cumulated.add(&reward)?;

        ctx.set("env/env_obs", t, next)?;
        ctx.set("env/reward", t, reward)?;
        ctx.set("env/done", t, zeros.clone())?;
        ctx.set("env/timestep", t, Tensor::full(vec![batch], t as f32))?;
        ctx.set("env/initial_state", t, zeros)?;
        ctx.set("env/cumulated_reward", t, cumulated)?;
        Ok(())
    }

    fn parameters(&self) -> Vec<Param> {
        vec![self.state_matrix.clone(), self.action_matrix.clone()]
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(LinearDynamicsAgent {
            state_matrix: self.state_matrix.deep_clone(),
            action_matrix: self.action_matrix.deep_clone(),
            initial_state: self.initial_state.detach(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        })
    }
}
