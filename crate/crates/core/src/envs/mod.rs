//! Environments as agents.
//!
//! [`EnvAgent`] wraps a batch of [`EnvCore`] instances and speaks the shared
//! variable vocabulary: at every executed timestep it writes `env/env_obs`,
//! `env/reward`, `env/done`, `env/timestep`, `env/initial_state` and
//! `env/cumulated_reward`. At `t = 0` every item is reset; at `t > 0` each
//! live item consumes `action` written at `t - 1`.
//!
//! [`LinearDynamicsAgent`] is the differentiable counterpart: its writes are
//! autodiff-connected to both its dynamics parameters and the incoming
//! action, so losses propagate straight through the environment.

mod cartpole;
mod dataloader;
mod diff_env;
mod gridworld;

pub use cartpole::CartPole;
pub use dataloader::{ArrayDataset, DataLoaderAgent};
pub use diff_env::LinearDynamicsAgent;
pub use gridworld::GridWorld;

use crate::agent::{Agent, Context};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of stepping one environment instance.
pub struct StepOutcome {
    pub obs: Vec<f32>,
    pub reward: f32,
    pub done: bool,
}

/// One simulated environment. Implementations must be deterministic given
/// the reset seed and the action sequence.
pub trait EnvCore: Send {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f32>;
    fn step(&mut self, action: usize) -> StepOutcome;
    fn clone_core(&self) -> Box<dyn EnvCore>;
}

/// Builds one instance of a named built-in environment.
pub fn make_env(name: &str) -> Result<Box<dyn EnvCore>> {
    match name {
        "gridworld" => Ok(Box::new(GridWorld::new())),
        "cartpole" => Ok(Box::new(CartPole::new())),
        _ => Err(Error::UnknownEnv {
            name: name.to_string(),
        }),
    }
}

fn mix_seed(base: u64, item: u64, episode: u64) -> u64 {
    // splitmix64 over a combination of the inputs
    let mut z = base
        .wrapping_add(item.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(episode.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ItemState {
    episode: u64,
    timestep: u64,
    cumulated: f32,
    done: bool,
    last_obs: Vec<f32>,
}

/// A batch of environments driven through the workspace.
///
/// Without auto-reset a finished item keeps replaying its terminal
/// observation with reward 0 and `done = 1`, keeping tensors rectangular;
/// with auto-reset it restarts on the following step with
/// `env/initial_state = 1` and `env/timestep = 0`.
pub struct EnvAgent {
    cores: Vec<Box<dyn EnvCore>>,
    items: Vec<ItemState>,
    auto_reset: bool,
    base_seed: u64,
}

impl EnvAgent {
    pub fn new(cores: Vec<Box<dyn EnvCore>>, auto_reset: bool) -> EnvAgent {
        let items = cores
            .iter()
            .map(|core| ItemState {
                episode: 0,
                timestep: 0,
                cumulated: 0.0,
                done: false,
                last_obs: vec![0.0; core.obs_dim()],
            })
            .collect();
        EnvAgent {
            cores,
            items,
            auto_reset,
            base_seed: 0,
        }
    }

    /// `n_envs` copies of a named built-in environment.
    pub fn from_name(name: &str, n_envs: usize, auto_reset: bool) -> Result<EnvAgent> {
        let mut cores = Vec::with_capacity(n_envs);
        for _ in 0..n_envs {
            cores.push(make_env(name)?);
        }
        Ok(EnvAgent::new(cores, auto_reset))
    }

    pub fn n_envs(&self) -> usize {
        self.cores.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.cores[0].obs_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.cores[0].n_actions()
    }

    fn reset_item(&mut self, k: usize) {
        let seed = mix_seed(self.base_seed, k as u64, self.items[k].episode);
        let obs = self.cores[k].reset(seed);
        let item = &mut self.items[k];
        item.timestep = 0;
        item.cumulated = 0.0;
        item.done = false;
        item.last_obs = obs;
    }

    fn write_frame(
        &self,
        ctx: &mut Context<'_>,
        t: usize,
        rewards: Vec<f32>,
        initials: Vec<f32>,
    ) -> Result<()> {
        let batch = self.cores.len();
        let obs_dim = self.obs_dim();
        let mut obs = Vec::with_capacity(batch * obs_dim);
        let mut done = Vec::with_capacity(batch);
        let mut timestep = Vec::with_capacity(batch);
        let mut cumulated = Vec::with_capacity(batch);
        for item in &self.items {
            obs.extend_from_slice(&item.last_obs);
            done.push(if item.done { 1.0 } else { 0.0 });
            timestep.push(item.timestep as f32);
            cumulated.push(item.cumulated);
        }
        ctx.set("env/env_obs", t, Tensor::from_vec(vec![batch, obs_dim], obs))?;
        ctx.set("env/reward", t, Tensor::from_vec(vec![batch], rewards))?;
        ctx.set("env/done", t, Tensor::from_vec(vec![batch], done))?;
        ctx.set("env/timestep", t, Tensor::from_vec(vec![batch], timestep))?;
        ctx.set(
            "env/initial_state",
            t,
            Tensor::from_vec(vec![batch], initials),
        )?;
        ctx.set(
            "env/cumulated_reward",
            t,
            Tensor::from_vec(vec![batch], cumulated),
        )?;
        Ok(())
    }
}

impl Agent for EnvAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let batch = self.cores.len();

        if t == 0 {
            for k in 0..batch {
                self.items[k].episode = 0;
                self.reset_item(k);
            }
            return self.write_frame(ctx, 0, vec![0.0; batch], vec![1.0; batch]);
        }

        let action = ctx.get("action", t - 1).map_err(|e| match e {
            Error::UnknownVariable { .. } | Error::UnwrittenTimestep { .. } => {
                Error::MissingAction { t: t - 1 }
            }
            other => other,
        })?;
        if action.shape()[0] != batch {
            return Err(Error::BatchSizeMismatch {
                name: "action".to_string(),
                expected: batch,
                got: action.shape()[0],
            });
        }
        let per_item = action.numel() / batch;

        let mut rewards = Vec::with_capacity(batch);
        let mut initials = Vec::with_capacity(batch);
        for k in 0..batch {
            if self.items[k].done {
                if self.auto_reset {
                    self.items[k].episode += 1;
                    self.reset_item(k);
                    rewards.push(0.0);
                    initials.push(1.0);
                } else {
                    // Frozen terminal: replay the last observation.
                    rewards.push(0.0);
                    initials.push(0.0);
                }
                continue;
            }
            let raw = action.data()[k * per_item].round() as i64;
            let n_actions = self.cores[k].n_actions();
            if raw < 0 || raw as usize >= n_actions {
                return Err(Error::ActionOutOfRange {
                    action: raw,
                    n_actions,
                });
            }
            let outcome = self.cores[k].step(raw as usize);
            let item = &mut self.items[k];
            item.timestep += 1;
            item.cumulated += outcome.reward;
            item.done = outcome.done;
            item.last_obs = outcome.obs;
            rewards.push(outcome.reward);
            initials.push(0.0);
        }
        self.write_frame(ctx, t, rewards, initials)
    }

    fn seed(&mut self, seed: u64) {
        self.base_seed = seed;
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        let cores: Vec<Box<dyn EnvCore>> = self.cores.iter().map(|c| c.clone_core()).collect();
        let mut clone = EnvAgent::new(cores, self.auto_reset);
        clone.base_seed = self.base_seed;
        Box::new(clone)
    }
}
