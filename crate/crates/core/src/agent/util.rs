//! Small ready-made agents: value fillers, linear maps, a whole-trace
//! cross-entropy loss, and a synthetic sleeper for throughput tests.

use std::time::Duration;

use crate::agent::{Agent, Context};
use crate::error::Result;
use crate::tensor::{Param, Tensor};

/// Fills a variable with a constant, controlled entirely through kwargs:
/// `var_name` (string), `value` (float) and `n_steps` (int). Writes shape
/// `[1]` at every `t` in `[0, n_steps)`.
#[derive(Clone, Default)]
pub struct FillAgent;

impl Agent for FillAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let name = ctx.kwargs().str("var_name")?.to_string();
        let value = ctx.kwargs().float("value")? as f32;
        let n_steps = ctx.kwargs().int("n_steps")?.max(0) as usize;
        for t in 0..n_steps {
            ctx.set(&name, t, Tensor::from_vec(vec![1], vec![value]))?;
        }
        Ok(())
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(self.clone())
    }
}

/// `y[t] = x[t] @ w`: reads `x` at the current timestep, writes `y`.
pub struct LinearAgent {
    weight: Param,
    input: String,
    output: String,
}

impl LinearAgent {
    pub fn from_weight(weight: Tensor, input: &str, output: &str) -> LinearAgent {
        LinearAgent {
            weight: Param::new(format!("linear/{output}"), weight),
            input: input.to_string(),
            output: output.to_string(),
        }
    }

    pub fn identity(dim: usize, input: &str, output: &str) -> LinearAgent {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        LinearAgent::from_weight(Tensor::from_vec(vec![dim, dim], data), input, output)
    }
}

impl Agent for LinearAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let x = ctx.get(&self.input, t)?;
        let y = x.matmul(&self.weight.value())?;
        ctx.set(&self.output, t, y)
    }

    fn parameters(&self) -> Vec<Param> {
        vec![self.weight.clone()]
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(LinearAgent {
            weight: self.weight.deep_clone(),
            input: self.input.clone(),
            output: self.output.clone(),
        })
    }
}

/// Cross-entropy over the whole trace: reads the full `predicted_y`
/// (`[T, B, N]` logits) and `y` (`[T, B]` class indices) series and writes a
/// per-item loss vector `loss` (`[B]`, averaged over time) at `t = 0`.
#[derive(Clone, Default)]
pub struct CrossEntropyAgent;

impl Agent for CrossEntropyAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let logits = ctx.get_full("predicted_y")?;
        let targets = ctx.get_full("y")?;
        let (steps, batch, classes) = (
            logits.shape()[0],
            logits.shape()[1],
            logits.shape()[2],
        );
        let flat_logits = logits.reshape(vec![steps * batch, classes])?;
        let flat_targets = targets.reshape(vec![steps * batch])?;
        let picked = flat_logits.softmax()?.log().gather(&flat_targets)?;
        // Column means via a ones row-vector: [1, T] x [T, B] -> [1, B].
        let per_step = picked.reshape(vec![steps, batch])?;
        let summed = Tensor::ones(vec![1, steps]).matmul(&per_step)?;
        let loss = summed
            .reshape(vec![batch])?
            .mul_scalar(-1.0 / steps as f32);
        ctx.set("loss", 0, loss)
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(self.clone())
    }
}

/// Sleeps a fixed duration each step, then writes `tick` at `t`. Stands in
/// for an expensive environment when measuring parallel throughput.
#[derive(Clone)]
pub struct SleepAgent {
    millis: u64,
    batch: usize,
}

impl SleepAgent {
    pub fn new(millis: u64, batch: usize) -> SleepAgent {
        SleepAgent { millis, batch }
    }
}

impl Agent for SleepAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        std::thread::sleep(Duration::from_millis(self.millis));
        ctx.set("tick", t, Tensor::full(vec![self.batch], t as f32))
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(self.clone())
    }
}
