//! Policy, critic and sampler agents used by the reference trainers.
//!
//! Policies are split in two: a score agent maps observations to `logits`
//! (or `q_values`), and a sampler agent turns scores into `action` /
//! `action_logp`. Trainers replay only the score part over acquired
//! trajectories, so stored actions survive while fresh, differentiable
//! scores are recomputed.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::agent::{Agent, Context};
use crate::error::{Error, Result};
use crate::tensor::{dedup_params, Param, Tensor};

/// Bias-free linear layer, Xavier-uniform initialized.
#[derive(Clone)]
pub struct Linear {
    weight: Param,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut StdRng) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Linear {
            weight: Param::new(
                name,
                Tensor::rand_uniform(vec![fan_in, fan_out], -bound, bound, rng),
            ),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.value())
    }

    pub fn param(&self) -> Param {
        self.weight.clone()
    }

    /// Rebuilds the layer with its current weights scaled by `factor`.
    pub fn from_param_scaled(layer: Linear, factor: f32) -> Linear {
        let scaled = layer.weight.value_detached().mul_scalar(factor);
        layer
            .weight
            .assign(&scaled)
            .expect("same shape by construction");
        layer
    }

    pub fn deep_clone(&self) -> Linear {
        Linear {
            weight: self.weight.deep_clone(),
        }
    }
}

/// Tanh MLP. Cloning shares parameter storage (the clone sees optimizer
/// updates); use [`deep_clone`](Mlp::deep_clone) for an independent copy.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], rng: &mut StdRng) -> Mlp {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Linear::new(&format!("{name}/l{i}"), pair[0], pair[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i != last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Param> {
        self.layers.iter().map(Linear::param).collect()
    }

    pub fn deep_clone(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(Linear::deep_clone).collect(),
        }
    }

    /// Hard-copies another MLP's parameter values (target-network sync).
    pub fn copy_from(&self, source: &Mlp) -> Result<()> {
        for (dst, src) in self.layers.iter().zip(&source.layers) {
            dst.param().assign(&src.param().value_detached())?;
        }
        Ok(())
    }
}

/// Reads `input` at `t`, writes `mlp(input)` to `output`. Covers both policy
/// logits and Q-value heads depending on the variable names.
pub struct ScoreAgent {
    mlp: Mlp,
    input: String,
    output: String,
}

impl ScoreAgent {
    pub fn new(mlp: Mlp, input: &str, output: &str) -> ScoreAgent {
        ScoreAgent {
            mlp,
            input: input.to_string(),
            output: output.to_string(),
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
}

impl Agent for ScoreAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let x = ctx.get(&self.input, t)?;
        let scores = self.mlp.apply(&x)?;
        ctx.set(&self.output, t, scores)
    }

    fn parameters(&self) -> Vec<Param> {
        self.mlp.params()
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(ScoreAgent {
            mlp: self.mlp.deep_clone(),
            input: self.input.clone(),
            output: self.output.clone(),
        })
    }
}

/// Recurrent state carrier: writes `z[t] = tanh(W_in x[t] + W_rec z[t-1])`,
/// reading its own previous output back from the workspace. Swapping a
/// feedforward policy for `Sequential[RecurrentAgent, ScoreAgent(z ->
/// logits)]` changes nothing in the trainers.
pub struct RecurrentAgent {
    w_in: Linear,
    w_rec: Linear,
    input: String,
    state: String,
}

impl RecurrentAgent {
    pub fn new(obs_dim: usize, hidden: usize, rng: &mut StdRng) -> RecurrentAgent {
        // Keep the recurrence contractive at init: Xavier on an [h, h]
        // matrix has spectral norm around 2, which explodes gradients
        // through long unrolls. Shrink toward ~0.7.
        let mut w_rec = Linear::new("rec/rec", hidden, hidden, rng);
        w_rec = Linear::from_param_scaled(w_rec, 0.35);
        RecurrentAgent::from_parts(Linear::new("rec/in", obs_dim, hidden, rng), w_rec)
    }

    /// Builds from existing layers; clones of the layers share storage, so
    /// several instances can expose the same trainable state.
    pub fn from_parts(w_in: Linear, w_rec: Linear) -> RecurrentAgent {
        RecurrentAgent {
            w_in,
            w_rec,
            input: "env/env_obs".to_string(),
            state: "z".to_string(),
        }
    }
}

impl Agent for RecurrentAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let obs = ctx.get(&self.input, t)?;
        let drive = self.w_in.apply(&obs)?;
        let pre = if t == 0 {
            drive
        } else {
            let prev = ctx.get(&self.state, t - 1)?;
            drive.add(&self.w_rec.apply(&prev)?)?
        };
        ctx.set(&self.state, t, pre.tanh())
    }

    fn parameters(&self) -> Vec<Param> {
        dedup_params(vec![self.w_in.param(), self.w_rec.param()])
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(RecurrentAgent {
            w_in: self.w_in.deep_clone(),
            w_rec: self.w_rec.deep_clone(),
            input: self.input.clone(),
            state: self.state.clone(),
        })
    }
}

fn sample_categorical(probs: &[f32], rng: &mut StdRng) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples a discrete action from `logits`, writing `action` and
/// `action_logp`. The `stochastic` kwarg (default true) switches between
/// sampling and argmax.
pub struct CategoricalSampler {
    rng: StdRng,
}

impl CategoricalSampler {
    pub fn new() -> CategoricalSampler {
        CategoricalSampler {
            rng: StdRng::seed_from_u64(0),
        }
    }
}

impl Default for CategoricalSampler {
    fn default() -> Self {
        CategoricalSampler::new()
    }
}

impl Agent for CategoricalSampler {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let logits = ctx.get("logits", t)?;
        let probs = logits.softmax()?;
        let shape = probs.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sampler",
                lhs: shape.to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (batch, n) = (shape[0], shape[1]);
        let stochastic = ctx.kwargs().bool_or("stochastic", true)?;
        let mut actions = Vec::with_capacity(batch);
        let mut logps = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &probs.data()[b * n..(b + 1) * n];
            let choice = if stochastic {
                sample_categorical(row, &mut self.rng)
            } else {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            };
            actions.push(choice as f32);
            logps.push(row[choice].max(f32::MIN_POSITIVE).ln());
        }
        ctx.set("action", t, Tensor::from_vec(vec![batch], actions))?;
        ctx.set("action_logp", t, Tensor::from_vec(vec![batch], logps))
    }

    fn seed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(CategoricalSampler {
            rng: self.rng.clone(),
        })
    }
}

/// Epsilon-greedy over `q_values`: uniform with probability `epsilon`
/// (kwarg), else argmax. `stochastic = false` forces pure greedy.
pub struct EpsilonGreedySampler {
    rng: StdRng,
}

impl EpsilonGreedySampler {
    pub fn new() -> EpsilonGreedySampler {
        EpsilonGreedySampler {
            rng: StdRng::seed_from_u64(0),
        }
    }
}

impl Default for EpsilonGreedySampler {
    fn default() -> Self {
        EpsilonGreedySampler::new()
    }
}

impl Agent for EpsilonGreedySampler {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let q = ctx.get("q_values", t)?;
        let shape = q.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sampler",
                lhs: shape.to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (batch, n) = (shape[0], shape[1]);
        let stochastic = ctx.kwargs().bool_or("stochastic", true)?;
        let epsilon = if stochastic {
            ctx.kwargs().opt_float("epsilon")?.unwrap_or(0.0)
        } else {
            0.0
        };
        let mut actions = Vec::with_capacity(batch);
        let mut logps = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &q.data()[b * n..(b + 1) * n];
            let greedy = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            let explore = epsilon > 0.0 && self.rng.gen::<f64>() < epsilon;
            let choice = if explore {
                self.rng.gen_range(0..n)
            } else {
                greedy
            };
            actions.push(choice as f32);
            let p = epsilon / n as f64 + if choice == greedy { 1.0 - epsilon } else { 0.0 };
            logps.push((p.max(f64::MIN_POSITIVE) as f32).ln());
        }
        ctx.set("action", t, Tensor::from_vec(vec![batch], actions))?;
        ctx.set("action_logp", t, Tensor::from_vec(vec![batch], logps))
    }

    fn seed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(EpsilonGreedySampler {
            rng: self.rng.clone(),
        })
    }
}

/// Uniform random discrete policy (baseline and dataset recording).
pub struct UniformRandomAgent {
    rng: StdRng,
    n_actions: usize,
}

impl UniformRandomAgent {
    pub fn new(n_actions: usize) -> UniformRandomAgent {
        UniformRandomAgent {
            rng: StdRng::seed_from_u64(0),
            n_actions,
        }
    }
}

impl Agent for UniformRandomAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let batch = ctx
            .batch_size()
            .ok_or(Error::EmptyWorkspace)?;
        let actions: Vec<f32> = (0..batch)
            .map(|_| self.rng.gen_range(0..self.n_actions) as f32)
            .collect();
        let logp = (1.0 / self.n_actions as f32).ln();
        ctx.set("action", t, Tensor::from_vec(vec![batch], actions))?;
        ctx.set("action_logp", t, Tensor::full(vec![batch], logp))
    }

    fn seed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(UniformRandomAgent {
            rng: self.rng.clone(),
            n_actions: self.n_actions,
        })
    }
}

/// Shortest-path policy for the grid environment: move right until the last
/// column, then down. Used to record expert datasets.
pub struct GridExpertAgent {
    size: usize,
}

impl GridExpertAgent {
    pub fn new(size: usize) -> GridExpertAgent {
        GridExpertAgent { size }
    }
}

impl Agent for GridExpertAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let obs = ctx.get("env/env_obs", t)?;
        let batch = obs.shape()[0];
        let cells = self.size * self.size;
        let mut actions = Vec::with_capacity(batch);
        for b in 0..batch {
            let row_data = &obs.data()[b * cells..(b + 1) * cells];
            let cell = row_data
                .iter()
                .position(|&v| v > 0.5)
                .unwrap_or(0);
            let col = cell % self.size;
            // 3 = right, 1 = down
            actions.push(if col < self.size - 1 { 3.0 } else { 1.0 });
        }
        ctx.set("action", t, Tensor::from_vec(vec![batch], actions))?;
        ctx.set("action_logp", t, Tensor::zeros(vec![batch]))
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(GridExpertAgent { size: self.size })
    }
}

/// Continuous linear policy for the differentiable environment:
/// `action[t] = obs[t] @ W`, fully on the autodiff tape.
pub struct LinearPolicyAgent {
    weight: Param,
    output: String,
}

impl LinearPolicyAgent {
    pub fn new(name: &str, obs_dim: usize, action_dim: usize, scale: f32) -> LinearPolicyAgent {
        LinearPolicyAgent {
            weight: Param::new(name, Tensor::full(vec![obs_dim, action_dim], scale)),
        output: "action".to_string(),
        }
    }

    pub fn with_output(mut self, output: &str) -> LinearPolicyAgent {
        self.output = output.to_string();
        self
    }
}

impl Agent for LinearPolicyAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let obs = ctx.get("env/env_obs", t)?;
        let action = obs.matmul(&self.weight.value())?;
        ctx.set(&self.output, t, action)
    }

    fn parameters(&self) -> Vec<Param> {
        vec![self.weight.clone()]
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(LinearPolicyAgent {
            weight: self.weight.deep_clone(),
            output: self.output.clone(),
        })
    }
}
