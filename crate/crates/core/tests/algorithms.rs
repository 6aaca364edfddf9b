//! Trainer building blocks: discounted returns, loss formulas, replay
//! targets, cloning, and the model-based / multi-agent demonstrations.

mod common;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tabula::algorithms::{
    self, demo_model_based, multi_agent_setup, record_dataset, returns_to_go, train_a2c,
    train_bc, train_reinforce, RecordPolicy, TrainConfig,
};
use tabula::{AgentExt, Optimizer, Tensor, VarStore};

/// Brute-force return-to-go: for each t, walk forward summing discounted
/// rewards until an episode boundary. Quadratic and obviously correct.
fn brute_force_returns(rewards: &[f32], dones: &[f32], gamma: f32) -> Vec<f32> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut discount = 1.0;
        for k in t..n {
            acc += discount * rewards[k];
            if dones[k] > 0.5 {
                break;
            }
            discount *= gamma;
        }
        *slot = acc;
    }
    out
}

#[test]
fn returns_to_go_degenerate_discount() {
    let g = returns_to_go(&[3.0, -1.0, 2.0], &[0.0, 0.0, 0.0], 0.0);
    assert_eq!(g, vec![3.0, -1.0, 2.0]);
}

#[test]
fn returns_to_go_two_step_hand_recursion() {
    let g = returns_to_go(&[1.0, 1.0], &[0.0, 0.0], 0.5);
    assert_eq!(g, vec![1.5, 1.0]);
}

#[test]
fn returns_to_go_matches_brute_force_on_random_sequences() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let rewards: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dones: Vec<f32> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 })
            .collect();
        let gamma = rng.gen_range(0.0..1.0);
        let fast = returns_to_go(&rewards, &dones, gamma);
        let slow = brute_force_returns(&rewards, &dones, gamma);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn policy_gradient_loss_matches_finite_differences() {
    // Two-parameter policy: logits = obs * w, one scalar observation per
    // step; fixed trajectory of actions and return weights.
    let obs = vec![0.8f32, -0.4, 1.2, 0.3];
    let actions = vec![0.0f32, 1.0, 1.0, 0.0];
    let weights = vec![1.5f32, 1.0, -0.5, 2.0]; // masked G_t values
    let steps = obs.len();

    let tol = common::FdTolerance::default();
    common::check_gradients(
        "policy gradient loss",
        &[
            (vec![1, 2], vec![0.3, -0.2]),
            (vec![steps, 1], obs.clone()),
            (vec![steps], actions.clone()),
            (vec![steps], weights.clone()),
        ],
        &[true, false, false, false],
        &|ts| {
            let logits = ts[1].matmul(&ts[0]).unwrap(); // [steps, 2]
            let logp = logits.softmax().unwrap().log();
            let picked = logp.gather(&ts[2]).unwrap();
            picked
                .mul(&ts[3])
                .unwrap()
                .sum()
                .mul_scalar(-1.0 / steps as f32)
        },
        &|vs| {
            let mut total = 0.0;
            for t in 0..steps {
                let logits = [vs[1][t] * vs[0][0], vs[1][t] * vs[0][1]];
                let sm = common::refops::softmax(&logits, 2);
                let a = vs[2][t] as usize;
                total += sm[a].ln() * vs[3][t];
            }
            -total / steps as f64
        },
        &tol,
    );
}

#[test]
fn advantage_reduces_to_one_step_return_when_value_is_zero() {
    // A = r_next + gamma (1 - d_next) V_next - V, composed exactly as the
    // trainer composes it.
    let r_next = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]);
    let bootstrap = Tensor::from_vec(vec![3], vec![0.99, 0.99, 0.0]);
    let v = Tensor::zeros(vec![3]);
    let v_next = Tensor::zeros(vec![3]);

    let advantage = r_next
        .add(&v_next.mul(&bootstrap).unwrap())
        .unwrap()
        .sub(&v)
        .unwrap();
    assert_eq!(advantage.to_vec(), vec![1.0, -2.0, 0.5]);
}

#[test]
fn terminal_step_has_no_bootstrap() {
    let r_next = Tensor::from_vec(vec![2], vec![1.0, 1.0]);
    let done_next = [0.0f32, 1.0];
    let gamma = 0.9;
    let bootstrap =
        Tensor::from_vec(vec![2], done_next.iter().map(|d| gamma * (1.0 - d)).collect());
    let v_next = Tensor::from_vec(vec![2], vec![10.0, 10.0]);
    let v = Tensor::from_vec(vec![2], vec![2.0, 2.0]);
    let advantage = r_next
        .add(&v_next.mul(&bootstrap).unwrap())
        .unwrap()
        .sub(&v)
        .unwrap();
    // Live step bootstraps; terminal step is r - V only.
    assert_eq!(advantage.to_vec(), vec![1.0 + 0.9 * 10.0 - 2.0, 1.0 - 2.0]);
}

#[test]
fn double_dqn_target_on_a_hand_built_table() {
    // Two one-hot states, two actions; weight matrices ARE the Q-tables.
    let online = Tensor::from_vec(vec![2, 2], vec![1.0, 3.0, 2.0, 0.5]);
    let target = Tensor::from_vec(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]);
    let next_obs = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let gamma = 0.9f32;
    let rewards = [1.0f32, -1.0];
    let dones = [0.0f32, 0.0];

    let q_online = next_obs.matmul(&online).unwrap();
    let best = q_online.argmax_last().unwrap();
    assert_eq!(best, vec![1, 0], "online argmax picks the selector");
    let q_target = target.value_like_gather(&next_obs, &best);

    // Hand expansion: state 0 -> online picks a=1, target Q = 20;
    // state 1 -> online picks a=0, target Q = 30.
    let y0 = rewards[0] + gamma * (1.0 - dones[0]) * 20.0;
    let y1 = rewards[1] + gamma * (1.0 - dones[1]) * 30.0;
    assert_eq!(q_target, vec![20.0, 30.0]);
    assert!((y0 - 19.0).abs() < 1e-6);
    assert!((y1 - 26.0).abs() < 1e-6);

    // gamma = 0: the target collapses to the reward.
    assert_eq!(rewards[0] + 0.0 * 20.0, 1.0);

    // Degenerate double estimate: with target == online the rule equals the
    // vanilla max target.
    let q_self = next_obs.matmul(&online).unwrap();
    let vanilla_max: Vec<f32> = (0..2)
        .map(|r| {
            q_self.data()[r * 2..(r + 1) * 2]
                .iter()
                .cloned()
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect();
    let double_with_self: Vec<f32> = best
        .iter()
        .enumerate()
        .map(|(r, &a)| q_self.data()[r * 2 + a])
        .collect();
    assert_eq!(vanilla_max, double_with_self);
}

trait GatherRows {
    fn value_like_gather(&self, obs: &Tensor, best: &[usize]) -> Vec<f32>;
}

impl GatherRows for Tensor {
    fn value_like_gather(&self, obs: &Tensor, best: &[usize]) -> Vec<f32> {
        let q = obs.matmul(self).unwrap();
        best.iter()
            .enumerate()
            .map(|(r, &a)| q.data()[r * 2 + a])
            .collect()
    }
}

fn tiny_cfg(env: &str) -> TrainConfig {
    TrainConfig {
        env_name: env.to_string(),
        n_envs: 2,
        n_steps: 8,
        total_steps: 200,
        hidden: 8,
        lr: 0.01,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn reinforce_is_deterministic_for_a_fixed_seed() {
    let run = || {
        let log = train_reinforce(&tiny_cfg("gridworld")).unwrap();
        (
            log.records
                .iter()
                .map(|r| (r.global_step, r.loss.to_bits()))
                .collect::<Vec<_>>(),
            log.episode_returns,
        )
    };
    let (a_rec, a_ep) = run();
    let (b_rec, b_ep) = run();
    assert_eq!(a_rec, b_rec);
    assert_eq!(a_ep, b_ep);
    assert!(!a_rec.is_empty());
}

#[test]
fn trainers_run_with_recurrent_policies_unchanged() {
    let mut cfg = tiny_cfg("gridworld");
    cfg.recurrent = true;
    let log = train_reinforce(&cfg).unwrap();
    assert!(!log.records.is_empty());
    let log = train_a2c(&cfg).unwrap();
    assert!(!log.records.is_empty());
}

#[test]
fn trainers_run_with_worker_pools_unchanged() {
    let mut cfg = tiny_cfg("gridworld");
    cfg.num_processes = 4;
    cfg.total_steps = 400;
    let log = train_reinforce(&cfg).unwrap();
    assert!(!log.records.is_empty());
}

#[test]
fn bc_overfits_a_single_trajectory_and_leaves_env_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("single.wsds");
    let ds = record_dataset("gridworld", RecordPolicy::Expert, 1, 3).unwrap();
    ds.save(&path).unwrap();

    // Replay must not move stored env variables.
    let stored = ds.get(0).unwrap();
    let before: Vec<u32> = stored
        .full("env/env_obs")
        .unwrap()
        .to_vec()
        .iter()
        .map(|f| f.to_bits())
        .collect();

    let cfg = TrainConfig {
        env_name: "gridworld".to_string(),
        total_steps: 400,
        lr: 0.05,
        hidden: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let result = train_bc(&cfg, &path).unwrap();
    let last = result.log.records.last().unwrap();
    assert!(
        last.loss < 0.05,
        "single-sample cloning should overfit, loss {}",
        last.loss
    );
    assert!(result.agreement > 0.99);

    let after: Vec<u32> = stored
        .full("env/env_obs")
        .unwrap()
        .to_vec()
        .iter()
        .map(|f| f.to_bits())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn expert_dataset_trains_high_agreement_cloning() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("expert.wsds");
    record_dataset("gridworld", RecordPolicy::Expert, 20, 11)
        .unwrap()
        .save(&path)
        .unwrap();
    let cfg = TrainConfig {
        env_name: "gridworld".to_string(),
        total_steps: 500,
        lr: 0.05,
        hidden: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let result = train_bc(&cfg, &path).unwrap();
    assert!(
        result.agreement >= 0.95,
        "agreement {} below 95%",
        result.agreement
    );
}

#[test]
fn model_based_loss_decreases() {
    let cfg = TrainConfig {
        n_envs: 4,
        n_steps: 12,
        total_steps: 50,
        lr: 0.02,
        seed: 9,
        ..TrainConfig::default()
    };
    let log = demo_model_based(&cfg).unwrap();
    let first = log.records.first().unwrap().loss;
    let best = log
        .records
        .iter()
        .map(|r| r.loss)
        .fold(f32::INFINITY, f32::min);
    assert!(
        best < first * 0.9,
        "best-so-far {best} did not improve on {first}"
    );
    // Best-so-far is non-increasing by construction; spot-check the tail
    // actually settled below the start.
    let last = log.records.last().unwrap().loss;
    assert!(last < first);
}

#[test]
fn multi_agent_backward_reaches_both_policies() {
    let cfg = TrainConfig {
        n_envs: 2,
        n_steps: 6,
        total_steps: 1,
        ..TrainConfig::default()
    };
    let mut setup = multi_agent_setup(&cfg).unwrap();
    let mut ws = tabula::Workspace::new();
    let kwargs = tabula::KwArgs::new()
        .with("t", 0usize)
        .with("n_steps", 6usize);
    setup.rollout.execute(&mut ws, &kwargs).unwrap();
    let rewards: Vec<Tensor> = (1..6).map(|t| ws.get("env/reward", t).unwrap()).collect();
    let loss = Tensor::stack(&rewards).unwrap().sum().neg();
    loss.backward().unwrap();

    for p in setup.policy_1_params.iter().chain(&setup.policy_2_params) {
        let grad = p.grad().expect("both policies receive gradients");
        assert!(grad.to_vec().iter().any(|&g| g != 0.0), "{}", p.name());
    }
    // Environment (world model) parameters receive gradients too.
    for p in &setup.env_params {
        let grad = p.grad().expect("dynamics gradients flow");
        assert!(grad.to_vec().iter().any(|&g| g != 0.0));
    }

    // Freezing the second policy: exclude it from the optimizer and step.
    let before: Vec<Vec<f32>> = setup
        .policy_2_params
        .iter()
        .map(|p| p.value_detached().to_vec())
        .collect();
    let mut optimizer = Optimizer::sgd(0.1, setup.policy_1_params.clone());
    optimizer.step().unwrap();
    let after: Vec<Vec<f32>> = setup
        .policy_2_params
        .iter()
        .map(|p| p.value_detached().to_vec())
        .collect();
    assert_eq!(before, after, "frozen policy must not move");
}

#[test]
fn epsilon_greedy_rides_kwargs_into_acquisition() {
    // Indirect check through the trainer: a run with a fixed seed completes
    // and logs monotone global steps (epsilon schedule exercised inside).
    let cfg = TrainConfig {
        env_name: "gridworld".to_string(),
        n_envs: 2,
        n_steps: 4,
        total_steps: 400,
        batch_size: 8,
        buffer_capacity: 512,
        target_update: 64,
        hidden: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let result = algorithms::train_double_dqn(&cfg).unwrap();
    let steps: Vec<u64> = result.log.records.iter().map(|r| r.global_step).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(result.greedy_returns.len(), 50);
}

#[test]
fn returns_never_cross_an_episode_boundary() {
    // Two episodes inside one rollout: the boundary sits after index 2.
    // Rewards past the boundary must not leak into earlier returns.
    let rewards = [1.0f32, 1.0, 1.0, 100.0, 100.0];
    let dones = [0.0f32, 0.0, 1.0, 0.0, 0.0];
    let g = returns_to_go(&rewards, &dones, 0.9);
    // Episode one: 1 + 0.9 * (1 + 0.9 * 1) = 2.71; untouched by the 100s.
    assert!((g[0] - 2.71).abs() < 1e-5, "g0 = {}", g[0]);
    assert!((g[1] - 1.9).abs() < 1e-5);
    assert_eq!(g[2], 1.0);
    // Episode two sees only its own rewards.
    assert!((g[3] - 190.0).abs() < 1e-4);
    assert_eq!(g[4], 100.0);
}

#[test]
fn supervised_workflow_trains_through_the_workspace() {
    use tabula::agent::util::{CrossEntropyAgent, LinearAgent};
    use tabula::envs::{ArrayDataset, DataLoaderAgent};
    use tabula::{Agent, Optimizer, Param};

    // Linearly separable two-class data on one feature.
    let features: Vec<Vec<f32>> = (0..32)
        .map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } * (1.0 + (i / 2) as f32 * 0.1)])
        .collect();
    let labels: Vec<f32> = (0..32).map(|i| (i % 2) as f32).collect();
    let dataset = ArrayDataset::new(features, labels).unwrap();

    let mut loader = DataLoaderAgent::new(dataset, 8, true);
    loader.seed(3);
    let mut model = LinearAgent::from_weight(Tensor::zeros(vec![1, 2]), "data/x", "predicted_y");
    let params: Vec<Param> = model.parameters();
    let mut optimizer = Optimizer::adam(0.1, params);

    // One loader step per timestep, predictions per timestep, then the
    // whole-trace loss agent; repeated over fresh workspaces.
    let mut first_loss = None;
    let mut last_loss = 0.0;
    for _ in 0..40 {
        let mut ws = tabula::Workspace::new();
        for t in 0..4usize {
            let kwargs = tabula::KwArgs::new().with("t", t);
            loader.execute(&mut ws, &kwargs).unwrap();
            // The model reads data/x and writes logits; rename the label
            // series for the loss agent's vocabulary.
            model.execute(&mut ws, &kwargs).unwrap();
            let y = ws.get("data/y", t).unwrap();
            ws.set("y", t, y).unwrap();
        }
        CrossEntropyAgent
            .execute(&mut ws, &tabula::KwArgs::new())
            .unwrap();
        let per_item = ws.get("loss", 0).unwrap();
        let loss = per_item.mean().unwrap();
        loss.backward().unwrap();
        optimizer.step().unwrap();
        optimizer.zero_grad();
        last_loss = loss.item().unwrap();
        first_loss.get_or_insert(last_loss);
    }
    let first = first_loss.unwrap();
    assert!(
        last_loss < first * 0.2,
        "loss {first} -> {last_loss} did not drop"
    );
}
