//! Model-based and multi-agent demonstrations over the differentiable
//! environment.
//!
//! Both run the rollout with gradients enabled: the loss `-sum(env/reward)`
//! backpropagates through the unrolled dynamics into the policy parameters
//! (and the world model's own parameters, which also receive gradients).

use crate::agent::{Agent, AgentExt, Context, Sequential, Temporal};
use crate::envs::LinearDynamicsAgent;
use crate::error::Result;
use crate::tensor::{Optimizer, Param, Tensor};
use crate::workspace::Workspace;

use super::nn::LinearPolicyAgent;
use super::{rollout_kwargs, stack_range, MetricLog, TrainConfig};

const STATE_DIM: usize = 4;
const ACTION_DIM: usize = 2;
const DAMPING: f32 = 0.95;

/// Sums two action contributions into the `action` variable the environment
/// consumes; the add keeps both writers on the tape.
pub struct JointActionAgent;

impl Agent for JointActionAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let a1 = ctx.get("action_1", t)?;
        let a2 = ctx.get("action_2", t)?;
        ctx.set("action", t, a1.add(&a2)?)
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(JointActionAgent)
    }
}

fn rollout_loss(ws: &Workspace, extent: usize) -> Result<Tensor> {
    // Rewards start mattering at t = 1; t = 0 is the reset frame.
    let rewards = stack_range(ws, "env/reward", 1, extent - 1)?;
    Ok(rewards.sum().neg())
}

/// Gradient descent directly through the environment: policy parameters are
/// trained by backpropagating `-sum(reward)` through the unrolled linear
/// dynamics. Returns one record per optimizer step; `total_steps` counts
/// optimizer iterations here.
pub fn demo_model_based(cfg: &TrainConfig) -> Result<MetricLog> {
    cfg.validate()?;
    let env = LinearDynamicsAgent::with_dims(cfg.n_envs, STATE_DIM, ACTION_DIM, DAMPING)?;
    let env_params = env.parameters();
    let policy = LinearPolicyAgent::new("mb/policy", STATE_DIM, ACTION_DIM, 0.0);
    let policy_params = policy.parameters();

    let mut rollout = Temporal::new(Box::new(Sequential::new(vec![
        Box::new(env),
        Box::new(policy),
    ])?));

    let steps = cfg.n_steps.max(2);
    let mut optimizer = Optimizer::adam(cfg.lr, policy_params);
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;
    let kwargs = rollout_kwargs(steps);

    for iteration in 0..cfg.total_steps as u64 {
        let mut ws = Workspace::new();
        rollout.execute(&mut ws, &kwargs)?;
        let loss = rollout_loss(&ws, steps)?;
        loss.backward()?;
        optimizer.step()?;
        optimizer.zero_grad();
        // The world model accumulates gradients too; clear them so the next
        // iteration starts clean (this demo trains only the policy).
        crate::tensor::zero_grad(&env_params);
        log.push(iteration + 1, loss.item()?, None, None, None)?;
    }
    Ok(log)
}

/// Pieces of the multi-agent composition, exposed for tests that need to
/// freeze or inspect one policy.
pub struct MultiAgentSetup {
    pub rollout: Temporal,
    pub policy_1_params: Vec<Param>,
    pub policy_2_params: Vec<Param>,
    pub env_params: Vec<Param>,
    pub steps: usize,
}

/// `temporal(sequential([env, policy_1, policy_2, join]))`: two policies
/// write `action_1` / `action_2`, the join sums them into `action`, and one
/// joint loss reaches both parameter sets through backward.
pub fn multi_agent_setup(cfg: &TrainConfig) -> Result<MultiAgentSetup> {
    let env = LinearDynamicsAgent::with_dims(cfg.n_envs, STATE_DIM, ACTION_DIM, DAMPING)?;
    let env_params = env.parameters();
    let policy_1 =
        LinearPolicyAgent::new("ma/policy_1", STATE_DIM, ACTION_DIM, 0.01).with_output("action_1");
    let policy_2 =
        LinearPolicyAgent::new("ma/policy_2", STATE_DIM, ACTION_DIM, 0.02).with_output("action_2");
    let policy_1_params = policy_1.parameters();
    let policy_2_params = policy_2.parameters();
    let rollout = Temporal::new(Box::new(Sequential::new(vec![
        Box::new(env),
        Box::new(policy_1),
        Box::new(policy_2),
        Box::new(JointActionAgent),
    ])?));
    Ok(MultiAgentSetup {
        rollout,
        policy_1_params,
        policy_2_params,
        env_params,
        steps: cfg.n_steps.max(2),
    })
}

/// Joint training of both policies against the shared loss.
pub fn demo_multi_agent(cfg: &TrainConfig) -> Result<MetricLog> {
    cfg.validate()?;
    let mut setup = multi_agent_setup(cfg)?;
    let mut params = setup.policy_1_params.clone();
    params.extend(setup.policy_2_params.clone());
    let mut optimizer = Optimizer::adam(cfg.lr, params);
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;
    let kwargs = rollout_kwargs(setup.steps);

    for iteration in 0..cfg.total_steps as u64 {
        let mut ws = Workspace::new();
        setup.rollout.execute(&mut ws, &kwargs)?;
        let loss = rollout_loss(&ws, setup.steps)?;
        loss.backward()?;
        optimizer.step()?;
        optimizer.zero_grad();
        crate::tensor::zero_grad(&setup.env_params);
        log.push(iteration + 1, loss.item()?, None, None, None)?;
    }
    Ok(log)
}
