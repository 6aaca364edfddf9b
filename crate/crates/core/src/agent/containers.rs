//! Container agents: run a list of agents in order, or unroll one agent over
//! timesteps until a step budget or a stop condition halts it.

use crate::agent::{Agent, Context, KwArgs};
use crate::error::{Error, Result};
use crate::tensor::{dedup_params, Param};

/// Executes its members one after the other on the same workspace with the
/// same kwargs, so a write by member `i` is readable by every later member
/// at the same timestep.
pub struct Sequential {
    agents: Vec<Box<dyn Agent>>,
}

impl Sequential {
    pub fn new(agents: Vec<Box<dyn Agent>>) -> Result<Sequential> {
        if agents.is_empty() {
            return Err(Error::EmptyContainer);
        }
        Ok(Sequential { agents })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

impl Agent for Sequential {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        for agent in &mut self.agents {
            let mut inner = Context {
                store: &mut *ctx.store,
                kwargs: ctx.kwargs,
            };
            agent.forward(&mut inner)?;
        }
        Ok(())
    }

    /// Fans out derived seeds: the k-th member receives `seed + k`, keeping
    /// sub-agents decorrelated but reproducible.
    fn seed(&mut self, seed: u64) {
        for (k, agent) in self.agents.iter_mut().enumerate() {
            agent.seed(seed.wrapping_add(k as u64));
        }
    }

    fn parameters(&self) -> Vec<Param> {
        dedup_params(
            self.agents
                .iter()
                .flat_map(|a| a.parameters())
                .collect(),
        )
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(Sequential {
            agents: self.agents.iter().map(|a| a.clone_agent()).collect(),
        })
    }
}

/// Unrolls an inner agent from `t` (kwarg, default 0), one timestep per
/// iteration, until `n_steps` are done or `stop_variable` reads all-true.
///
/// The loop runs the inner agent at `_t`, then checks the stop variable at
/// `_t`, then increments and checks the step budget — so the step at which
/// the stop condition first holds is executed, and with both bounds present
/// whichever triggers first wins. The inner agent sees the caller's kwargs
/// minus the loop-control keys, with `t` rebound to the current timestep.
pub struct Temporal {
    inner: Box<dyn Agent>,
}

impl Temporal {
    pub fn new(inner: Box<dyn Agent>) -> Temporal {
        Temporal { inner }
    }
}

/// The temporal loop itself, usable on a borrowed agent: run the agent at
/// `_t`, check the stop variable at `_t`, increment, check the budget.
pub(crate) fn unroll(
    agent: &mut dyn Agent,
    store: &mut dyn crate::workspace::VarStore,
    start: usize,
    n_steps: Option<usize>,
    stop_variable: Option<&str>,
    base_kwargs: &KwArgs,
) -> Result<()> {
    if n_steps.is_none() && stop_variable.is_none() {
        return Err(Error::UnboundedTemporal);
    }
    let mut inner_kwargs = base_kwargs.clone();
    inner_kwargs.remove("n_steps");
    inner_kwargs.remove("stop_variable");

    let mut t = start;
    loop {
        inner_kwargs.insert("t", t);
        let mut inner_ctx = Context {
            store: &mut *store,
            kwargs: &inner_kwargs,
        };
        agent.forward(&mut inner_ctx)?;

        if let Some(name) = stop_variable {
            let flag = store.get(name, t)?;
            if flag.data().iter().all(|&v| v > 0.5) {
                break;
            }
        }
        t += 1;
        if let Some(n) = n_steps {
            if t >= start + n {
                break;
            }
        }
    }
    Ok(())
}

impl Agent for Temporal {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let start = ctx.kwargs.opt_int("t")?.unwrap_or(0);
        if start < 0 {
            return Err(Error::KwargType {
                key: "t".to_string(),
                expected: "non-negative int",
            });
        }
        let n_steps = match ctx.kwargs.opt_int("n_steps")? {
            Some(n) if n < 1 => {
                return Err(Error::KwargType {
                    key: "n_steps".to_string(),
                    expected: "positive int",
                });
            }
            Some(n) => Some(n as usize),
            None => None,
        };
        let stop_variable = ctx.kwargs.opt_str("stop_variable")?.map(str::to_string);
        unroll(
            &mut *self.inner,
            ctx.store,
            start as usize,
            n_steps,
            stop_variable.as_deref(),
            ctx.kwargs,
        )
    }

    fn seed(&mut self, seed: u64) {
        self.inner.seed(seed);
    }

    fn parameters(&self) -> Vec<Param> {
        self.inner.parameters()
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(Temporal {
            inner: self.inner.clone_agent(),
        })
    }
}
