//! Advantage actor-critic.
//!
//! Acquisition matches the policy-gradient trainer; learning additionally
//! replays a critic over the acquired trace (writing `critic` at every
//! timestep) and weights the log-likelihood by the advantage
//! `A_t = G_t - V_t`, where `G_t` is the within-rollout discounted
//! return-to-go for the action taken at `t` (episode-boundary masked, no
//! bootstrap across rollouts). The critic term is the squared advantage —
//! a direct regression of `V` onto observed returns — with the advantage
//! detached in the policy term, plus an entropy bonus.

use crate::agent::Sequential;
use crate::error::{Error, Result};
use crate::tensor::{dedup_params, Optimizer, Tensor};
use crate::workspace::VarStore;

use super::nn::{CategoricalSampler, Mlp, ScoreAgent};
use super::{
    collect_episode_returns, consumed_action_mask, derive_rng, make_env_agent, make_score_agent,
    policy_gradient_terms, replay_over, returns_to_go, rollout_kwargs, stack_range, Acquirer,
    MetricLog, TrainConfig,
};

pub fn train_a2c(cfg: &TrainConfig) -> Result<MetricLog> {
    cfg.validate()?;
    if cfg.n_steps < 2 {
        return Err(Error::InvalidConfig(
            "actor-critic rollouts need n_steps >= 2".into(),
        ));
    }
    let mut rng = derive_rng(cfg.seed, 2);
    let env = make_env_agent(cfg, true)?;
    let (obs_dim, n_actions) = (env.obs_dim(), env.n_actions());
    let (score_acq, mut score_replay, policy_params) =
        make_score_agent(cfg, obs_dim, n_actions, &mut rng)?;

    let critic_mlp = Mlp::new("critic", &[obs_dim, cfg.hidden, 1], &mut rng);
    let mut critic_replay = ScoreAgent::new(critic_mlp.clone(), "env/env_obs", "critic");
    let critic_params = critic_mlp.params();

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

    let all_params = dedup_params(policy_params.into_iter().chain(critic_params).collect());
    let mut optimizer = Optimizer::adam(cfg.lr, all_params);
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;
    let kwargs = rollout_kwargs(cfg.n_steps);

    let mut global_step: u64 = 0;
    while global_step < cfg.total_steps as u64 {
        let mut ws = acquirer.acquire(&kwargs)?;
        let batch = ws.batch_size().unwrap_or(0);
        global_step += (cfg.n_steps * batch) as u64;
        collect_episode_returns(&ws, &mut log.episode_returns)?;

        // Both the policy score and the critic are replayed over the
        // acquired trajectories.
        replay_over(score_replay.as_mut(), &mut ws, cfg.n_steps)?;
        replay_over(&mut critic_replay, &mut ws, cfg.n_steps)?;

        let done = ws.full("env/done")?;
        let reward = ws.full("env/reward")?;
        let steps = done.shape()[0];
        let len = steps - 1;
        let (mask, valid_count) = consumed_action_mask(&done);

        // Return-to-go per batch column over the shifted reward sequence.
        let mut returns = vec![0.0f32; len * batch];
        for b in 0..batch {
            let mut r_next = Vec::with_capacity(len);
            let mut d_next = Vec::with_capacity(len);
            for t in 0..len {
                r_next.push(reward.data()[(t + 1) * batch + b]);
                d_next.push(done.data()[(t + 1) * batch + b]);
            }
            let g = returns_to_go(&r_next, &d_next, cfg.gamma);
            for t in 0..len {
                returns[t * batch + b] = g[t];
            }
        }
        let returns = Tensor::from_vec(vec![len * batch], returns);
        let mask_t = Tensor::from_vec(vec![len * batch], mask.clone());

        // critic is written as [B, 1]; flatten the stack to [len * B].
        let values = stack_range(&ws, "critic", 0, len)?.reshape(vec![len * batch])?;
        let advantage = returns.sub(&values)?.mul(&mask_t)?;
        let critic_loss = advantage
            .mul(&advantage)?
            .sum()
            .mul_scalar(1.0 / valid_count.max(1.0));

        // Detached advantage weights the policy term.
        let weights = Tensor::from_vec(vec![len * batch], advantage.to_vec());
        let (pg, entropy) = policy_gradient_terms(&ws, len, &weights, valid_count)?;

        let loss = pg
            .add(&critic_loss)?
            .add(&entropy.mul_scalar(-cfg.entropy_coef))?;

        loss.backward()?;
        optimizer.step()?;
        optimizer.zero_grad();

        log.push(
            global_step,
            loss.item()?,
            Some(pg.item()?),
            Some(critic_loss.item()?),
            Some(entropy.item()?),
        )?;
    }
    Ok(log)
}
