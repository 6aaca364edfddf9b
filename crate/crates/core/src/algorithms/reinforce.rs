//! Policy gradient with within-rollout discounted returns.
//!
//! Each iteration: acquire a rollout with the auto-resetting environment and
//! the sampling policy (gradient-free, in-process or via workers), replay
//! the score agent over the trace to get differentiable logits, weight the
//! log-likelihood of each consumed action by its return-to-go, and step.

use crate::agent::Sequential;
use crate::error::{Error, Result};
use crate::tensor::{Optimizer, Tensor};
use crate::workspace::VarStore;

use super::nn::CategoricalSampler;
use super::{
    collect_episode_returns, consumed_action_mask, derive_rng, make_env_agent, make_score_agent,
    policy_gradient_terms, replay_over, returns_to_go, rollout_kwargs, Acquirer, MetricLog,
    TrainConfig,
};

pub fn train_reinforce(cfg: &TrainConfig) -> Result<MetricLog> {
    cfg.validate()?;
    if cfg.n_steps < 2 {
        return Err(Error::InvalidConfig(
            "policy-gradient rollouts need n_steps >= 2".into(),
        ));
    }
    let mut rng = derive_rng(cfg.seed, 1);
    let env = make_env_agent(cfg, true)?;
    let (obs_dim, n_actions) = (env.obs_dim(), env.n_actions());
    let (score_acq, mut score_replay, params) =
        make_score_agent(cfg, obs_dim, n_actions, &mut rng)?;

    let acquisition = Sequential::new(vec![
        Box::new(env),
        score_acq,
        Box::new(CategoricalSampler::new()),
    ])?;
    let mut acquirer = Acquirer::new(
        Box::new(crate::agent::Temporal::new(Box::new(acquisition))),
        cfg.num_processes,
        cfg.seed,
    );

    let mut optimizer = Optimizer::adam(cfg.lr, params);
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;
    let kwargs = rollout_kwargs(cfg.n_steps);

    let mut global_step: u64 = 0;
    while global_step < cfg.total_steps as u64 {
        let mut ws = acquirer.acquire(&kwargs)?;
        let batch = ws.batch_size().unwrap_or(0);
        global_step += (cfg.n_steps * batch) as u64;
        collect_episode_returns(&ws, &mut log.episode_returns)?;

        replay_over(score_replay.as_mut(), &mut ws, cfg.n_steps)?;

        let done = ws.full("env/done")?;
        let reward = ws.full("env/reward")?;
        let steps = done.shape()[0];
        let len = steps - 1;
        let (mask, valid_count) = consumed_action_mask(&done);

        // Return-to-go per batch column over the shifted reward sequence:
        // the action at t is paid by reward[t+1].
        let mut weights = vec![0.0f32; len * batch];
        for b in 0..batch {
            let mut r_next = Vec::with_capacity(len);
            let mut d_next = Vec::with_capacity(len);
            for t in 0..len {
                r_next.push(reward.data()[(t + 1) * batch + b]);
                d_next.push(done.data()[(t + 1) * batch + b]);
            }
            let g = returns_to_go(&r_next, &d_next, cfg.gamma);
            for t in 0..len {
                weights[t * batch + b] = mask[t * batch + b] * g[t];
            }
        }

        let weights = Tensor::from_vec(vec![len * batch], weights);
        let (pg, entropy) = policy_gradient_terms(&ws, len, &weights, valid_count)?;
        let loss = pg.add(&entropy.mul_scalar(-cfg.entropy_coef))?;

        loss.backward()?;
        optimizer.step()?;
        optimizer.zero_grad();

        log.push(
            global_step,
            loss.item()?,
            Some(pg.item()?),
            None,
            Some(entropy.item()?),
        )?;
    }
    Ok(log)
}
