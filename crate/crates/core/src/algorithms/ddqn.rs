//! Double Q-learning over replay windows.
//!
//! Transitions are length-2 sliding windows of acquired workspaces — the
//! replay buffer is built on workspaces, not a bespoke transition store. The
//! target is `y = r + gamma * (1 - done) * Q_target(s', argmax_a
//! Q_online(s', a))`, with the online argmax decoupling selection from
//! evaluation; the target network is hard-copied every `target_update` env
//! steps. Exploration epsilon rides the kwargs into the sampler.

use crate::agent::Sequential;
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::tensor::{no_grad, Optimizer, Tensor};
use crate::workspace::VarStore;

use super::nn::{EpsilonGreedySampler, Mlp, ScoreAgent};
use super::{
    collect_episode_returns, derive_rng, make_env_agent, rollout_kwargs, Acquirer, MetricLog,
    TrainConfig,
};

fn epsilon_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.epsilon_decay_steps == 0 {
        return cfg.epsilon_final;
    }
    let progress = (step as f64 / cfg.epsilon_decay_steps as f64).min(1.0);
    cfg.epsilon_start + (cfg.epsilon_final - cfg.epsilon_start) * progress
}

/// Training outcome: the metric log plus a final greedy evaluation of the
/// learned Q-network (50 episodes, exploration off).
pub struct DqnResult {
    pub log: MetricLog,
    pub greedy_returns: Vec<f32>,
}

pub fn train_double_dqn(cfg: &TrainConfig) -> Result<DqnResult> {
    cfg.validate()?;
    if cfg.n_steps < 2 {
        return Err(Error::InvalidConfig(
            "transition windows need n_steps >= 2".into(),
        ));
    }
    let mut rng = derive_rng(cfg.seed, 3);
    let env = make_env_agent(cfg, true)?;
    let (obs_dim, n_actions) = (env.obs_dim(), env.n_actions());

    let online = Mlp::new("qnet", &[obs_dim, cfg.hidden, n_actions], &mut rng);
    let target = online.deep_clone();

    let acquisition = Sequential::new(vec![
        Box::new(env),
        Box::new(ScoreAgent::new(online.clone(), "env/env_obs", "q_values")),
        Box::new(EpsilonGreedySampler::new()),
    ])?;
    let mut acquirer = Acquirer::new(
        Box::new(crate::agent::Temporal::new(Box::new(acquisition))),
        cfg.num_processes,
        cfg.seed,
    );

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, 2);
    let mut optimizer = Optimizer::adam(cfg.lr, online.params());
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;

    let warmup = (cfg.batch_size * 4).max(64);
    let mut global_step: u64 = 0;
    let mut iteration: u64 = 0;
    let mut syncs: u64 = 0;
    while global_step < cfg.total_steps as u64 {
        let epsilon = epsilon_at(cfg, global_step);
        let kwargs = rollout_kwargs(cfg.n_steps).with("epsilon", epsilon);
        let ws = acquirer.acquire(&kwargs)?;
        let batch = ws.batch_size().unwrap_or(0);
        global_step += (cfg.n_steps * batch) as u64;
        collect_episode_returns(&ws, &mut log.episode_returns)?;
        buffer.put(&ws, 1)?;

        let mut loss_value = 0.0;
        if buffer.len() >= warmup {
            let sample_seed = cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(iteration);
            let window = buffer.sample(cfg.batch_size, sample_seed)?;

            let obs0 = window.get("env/env_obs", 0)?;
            let obs1 = window.get("env/env_obs", 1)?;
            let act0 = window.get("action", 0)?;
            let r1 = window.get("env/reward", 1)?;
            let d1 = window.get("env/done", 1)?;
            let init1 = window.get("env/initial_state", 1)?;

            // A window whose second step is a fresh reset carries no real
            // transition (the first step's action was never consumed).
            let m = cfg.batch_size;
            let mut mask = vec![0.0f32; m];
            let mut valid = 0.0f32;
            for (slot, flag) in mask.iter_mut().zip(init1.data()) {
                if *flag < 0.5 {
                    *slot = 1.0;
                    valid += 1.0;
                }
            }

            let targets = no_grad(|| -> Result<Vec<f32>> {
                let q_next_online = online.apply(&obs1)?;
                let best = q_next_online.argmax_last()?;
                let q_next_target = target.apply(&obs1)?;
                let mut y = vec![0.0f32; m];
                for i in 0..m {
                    let q_sel = q_next_target.data()[i * n_actions + best[i]];
                    y[i] =
                        r1.data()[i] + cfg.gamma * (1.0 - d1.data()[i]) * q_sel;
                }
                Ok(y)
            })?;

            let q_taken = online.apply(&obs0)?.gather(&act0)?;
            let residual = q_taken
                .sub(&Tensor::from_vec(vec![m], targets))?
                .mul(&Tensor::from_vec(vec![m], mask))?;
            let loss = residual
                .mul(&residual)?
                .sum()
                .mul_scalar(1.0 / valid.max(1.0));
            loss.backward()?;
            optimizer.step()?;
            optimizer.zero_grad();
            loss_value = loss.item()?;
        }

        // Hard copy on the configured cadence of env steps.
        let due = global_step / cfg.target_update.max(1) as u64;
        if due > syncs {
            target.copy_from(&online)?;
            syncs = due;
        }

        iteration += 1;
        log.push(global_step, loss_value, None, Some(loss_value), None)?;
    }

    let greedy_returns = evaluate_greedy(cfg, &online, 50, cfg.seed.wrapping_add(777))?;
    Ok(DqnResult {
        log,
        greedy_returns,
    })
}

/// Greedy evaluation: runs `episodes` episodes with exploration off and
/// returns each episode's return. Used to score a trained Q-network.
pub fn evaluate_greedy(
    cfg: &TrainConfig,
    online: &Mlp,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    use crate::agent::{Agent, AgentExt, KwArgs, Temporal};
    use crate::workspace::Workspace;

    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut env = crate::envs::EnvAgent::from_name(&cfg.env_name, 1, false)?;
        env.seed(seed.wrapping_add(e as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let agent = Sequential::new(vec![
            Box::new(env),
            Box::new(ScoreAgent::new(online.clone(), "env/env_obs", "q_values")),
            Box::new(EpsilonGreedySampler::new()),
        ])?;
        let mut rollout = Temporal::new(Box::new(agent));
        let mut ws = Workspace::new();
        let kwargs = KwArgs::new()
            .with("t", 0usize)
            .with("stop_variable", "env/done")
            .with("n_steps", 512usize)
            .with("stochastic", false);
        no_grad(|| rollout.execute(&mut ws, &kwargs))?;
        let extent = ws.time_extent("env/cumulated_reward").unwrap_or(0);
        if extent == 0 {
            return Err(Error::EmptyWorkspace);
        }
        returns.push(ws.get("env/cumulated_reward", extent - 1)?.data()[0]);
    }
    Ok(returns)
}
