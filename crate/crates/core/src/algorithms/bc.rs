//! Behavioral cloning from recorded trajectory datasets, plus the recorder
//! that produces them.
//!
//! Each iteration deserializes one stored workspace, replays the policy
//! score over it (overwriting `logits`, leaving every `env/*` variable
//! untouched), and minimizes cross-entropy between the fresh logits and the
//! stored actions over non-terminal steps.

use std::path::Path;

use crate::agent::{Agent, AgentExt, KwArgs, Sequential, Temporal};
use crate::envs::{make_env, EnvAgent};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Optimizer, Tensor};
use crate::workspace::io::TrajectoryDataset;
use crate::workspace::{VarStore, Workspace};

use super::nn::{GridExpertAgent, UniformRandomAgent};
use super::{derive_rng, make_score_agent, replay_over, stack_range, MetricLog, TrainConfig};

/// Policy used when recording a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordPolicy {
    Random,
    Expert,
}

impl RecordPolicy {
    pub fn parse(name: &str) -> Result<RecordPolicy> {
        match name {
            "random" => Ok(RecordPolicy::Random),
            "expert" => Ok(RecordPolicy::Expert),
            other => Err(Error::InvalidConfig(format!(
                "unknown record policy '{other}' (expected random|expert)"
            ))),
        }
    }
}

/// Rolls out `episodes` single-environment episodes (stopping on
/// `env/done`) and collects each as one workspace.
pub fn record_dataset(
    env_name: &str,
    policy: RecordPolicy,
    episodes: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let probe = make_env(env_name)?;
    let n_actions = probe.n_actions();
    let mut dataset = TrajectoryDataset::new();
    for episode in 0..episodes {
        let env = EnvAgent::from_name(env_name, 1, false)?;
        let policy_agent: Box<dyn Agent> = match policy {
            RecordPolicy::Random => Box::new(UniformRandomAgent::new(n_actions)),
            RecordPolicy::Expert => match env_name {
                "gridworld" => Box::new(GridExpertAgent::new(3)),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "no expert policy available for '{other}'"
                    )));
                }
            },
        };
        let mut rollout = Temporal::new(Box::new(Sequential::new(vec![
            Box::new(env),
            policy_agent,
        ])?));
        rollout.seed(seed.wrapping_add(episode as u64 * 64));
        let mut ws = Workspace::new();
        let kwargs = KwArgs::new()
            .with("t", 0usize)
            .with("stop_variable", "env/done")
            .with("n_steps", 1024usize);
        no_grad(|| rollout.execute(&mut ws, &kwargs))?;
        dataset.push(ws);
    }
    Ok(dataset)
}

/// Training outcome: the metric log plus the final action agreement with
/// the dataset over non-terminal steps.
pub struct BcResult {
    pub log: MetricLog,
    pub agreement: f32,
}

pub fn train_bc(cfg: &TrainConfig, dataset_path: &Path) -> Result<BcResult> {
    cfg.validate()?;
    let dataset = TrajectoryDataset::load(dataset_path)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probe = make_env(&cfg.env_name)?;
    let (obs_dim, n_actions) = (probe.obs_dim(), probe.n_actions());

    let mut rng = derive_rng(cfg.seed, 4);
    let (_acq, mut score, params) = make_score_agent(cfg, obs_dim, n_actions, &mut rng)?;
    let mut optimizer = Optimizer::adam(cfg.lr, params);
    let mut log = MetricLog::new(cfg.log_path.as_ref())?;

    // For cloning, total_steps counts optimizer iterations.
    for iteration in 0..cfg.total_steps as u64 {
        let stored = dataset
            .get((iteration % dataset.len() as u64) as usize)
            .expect("dataset is non-empty");
        let mut ws = stored.clone();
        let extent = ws.max_time_extent();

        replay_over(score.as_mut(), &mut ws, extent)?;

        let loss = cloning_loss(&ws, extent, n_actions)?;
        loss.backward()?;
        optimizer.step()?;
        optimizer.zero_grad();
        log.push(iteration + 1, loss.item()?, None, None, None)?;
    }

    let agreement = action_agreement(score.as_mut(), &dataset)?;
    Ok(BcResult { log, agreement })
}

/// Cross-entropy between replayed logits and stored actions, masked to
/// non-terminal steps.
fn cloning_loss(ws: &Workspace, extent: usize, n_actions: usize) -> Result<Tensor> {
    let batch = ws.batch_size().ok_or(Error::EmptyWorkspace)?;
    let rows = extent * batch;
    let logits = stack_range(ws, "logits", 0, extent)?.reshape(vec![rows, n_actions])?;
    let actions = ws.full("action")?.reshape(vec![rows])?;
    let done = ws.full("env/done")?;

    let mut mask = vec![0.0f32; rows];
    let mut valid = 0.0f32;
    for (i, &d) in done.data().iter().enumerate() {
        if d < 0.5 {
            mask[i] = 1.0;
            valid += 1.0;
        }
    }
    let picked = logits.softmax()?.log().gather(&actions)?;
    Ok(picked
        .mul(&Tensor::from_vec(vec![rows], mask))?
        .sum()
        .mul_scalar(-1.0 / valid.max(1.0)))
}

/// Fraction of non-terminal dataset steps where the policy's greedy action
/// matches the stored one.
pub fn action_agreement(policy: &mut dyn Agent, dataset: &TrajectoryDataset) -> Result<f32> {
    let mut matches = 0usize;
    let mut total = 0usize;
    for stored in dataset.iter() {
        let mut ws = stored.clone();
        let extent = ws.max_time_extent();
        no_grad(|| replay_over(policy, &mut ws, extent))?;
        let logits = ws.full("logits")?;
        let batch = logits.shape()[1];
        let classes = logits.shape()[2];
        let rows = extent * batch;
        let greedy = logits.reshape(vec![rows, classes])?.argmax_last()?;
        let actions = ws.full("action")?;
        let done = ws.full("env/done")?;
        for ((choice, action), d) in greedy.iter().zip(actions.data()).zip(done.data()) {
            if *d < 0.5 {
                total += 1;
                if *choice == action.round() as usize {
                    matches += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(matches as f32 / total as f32)
}
