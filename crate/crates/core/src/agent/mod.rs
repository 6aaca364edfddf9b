//! Agents: named computational units that read and write workspace
//! variables. Environments, policies, losses and data loaders all share this
//! one interface, so any of them can be swapped, composed, replayed over an
//! existing trace, or farmed out to worker threads.

mod containers;
pub mod util;

pub use containers::{Sequential, Temporal};
pub(crate) use containers::unroll as containers_unroll;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};
use crate::workspace::VarStore;

/// Execution-time keyword arguments, forwarded unmodified through containers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KwArgs(BTreeMap<String, KwValue>);

#[derive(Clone, Debug, PartialEq)]
pub enum KwValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl From<i64> for KwValue {
    fn from(v: i64) -> Self {
        KwValue::Int(v)
    }
}
impl From<usize> for KwValue {
    fn from(v: usize) -> Self {
        KwValue::Int(v as i64)
    }
}
impl From<f64> for KwValue {
    fn from(v: f64) -> Self {
        KwValue::Float(v)
    }
}
impl From<bool> for KwValue {
    fn from(v: bool) -> Self {
        KwValue::Bool(v)
    }
}
impl From<&str> for KwValue {
    fn from(v: &str) -> Self {
        KwValue::Str(v.to_string())
    }
}
impl From<String> for KwValue {
    fn from(v: String) -> Self {
        KwValue::Str(v)
    }
}

impl KwArgs {
    pub fn new() -> KwArgs {
        KwArgs::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<KwValue>) -> KwArgs {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, key: &str, value: impl Into<KwValue>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn remove(&mut self, key: &str) -> Option<KwValue> {
        self.0.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&KwValue> {
        self.0.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &KwValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        match self.0.get(key) {
            Some(KwValue::Int(v)) => Ok(*v),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "int",
            }),
            None => Err(Error::MissingKwarg {
                key: key.to_string(),
            }),
        }
    }

    pub fn opt_int(&self, key: &str) -> Result<Option<i64>> {
        match self.0.get(key) {
            Some(KwValue::Int(v)) => Ok(Some(*v)),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "int",
            }),
            None => Ok(None),
        }
    }

    /// Float lookup; integer values coerce.
    pub fn float(&self, key: &str) -> Result<f64> {
        match self.0.get(key) {
            Some(KwValue::Float(v)) => Ok(*v),
            Some(KwValue::Int(v)) => Ok(*v as f64),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "float",
            }),
            None => Err(Error::MissingKwarg {
                key: key.to_string(),
            }),
        }
    }

    pub fn opt_float(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            Some(KwValue::Float(v)) => Ok(Some(*v)),
            Some(KwValue::Int(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "float",
            }),
            None => Ok(None),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.0.get(key) {
            Some(KwValue::Bool(v)) => Ok(*v),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "bool",
            }),
            None => Ok(default),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.0.get(key) {
            Some(KwValue::Str(v)) => Ok(v),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "string",
            }),
            None => Err(Error::MissingKwarg {
                key: key.to_string(),
            }),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&str>> {
        match self.0.get(key) {
            Some(KwValue::Str(v)) => Ok(Some(v)),
            Some(_) => Err(Error::KwargType {
                key: key.to_string(),
                expected: "string",
            }),
            None => Ok(None),
        }
    }
}

/// Everything an agent sees during `forward`: the bound variable store and
/// the call's keyword arguments. The workspace itself is never a forward
/// argument; reads and writes go through these helpers.
pub struct Context<'a> {
    pub(crate) store: &'a mut dyn VarStore,
    pub(crate) kwargs: &'a KwArgs,
}

impl<'a> Context<'a> {
    pub fn new(store: &'a mut dyn VarStore, kwargs: &'a KwArgs) -> Context<'a> {
        Context { store, kwargs }
    }

    pub fn get(&self, name: &str, t: usize) -> Result<Tensor> {
        self.store.get(name, t)
    }

    pub fn set(&mut self, name: &str, t: usize, value: Tensor) -> Result<()> {
        self.store.set(name, t, value)
    }

    pub fn get_full(&self, name: &str) -> Result<Tensor> {
        self.store.full(name)
    }

    pub fn set_full(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.store.set_full(name, value)
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.store.batch_size()
    }

    pub fn time_extent(&self, name: &str) -> Option<usize> {
        self.store.time_extent(name)
    }

    pub fn kwargs(&self) -> &KwArgs {
        self.kwargs
    }

    /// The timestep kwarg `t`, required by timestep-anchored agents.
    pub fn t(&self) -> Result<usize> {
        let t = self.kwargs.int("t")?;
        if t < 0 {
            return Err(Error::KwargType {
                key: "t".to_string(),
                expected: "non-negative int",
            });
        }
        Ok(t as usize)
    }
}

/// A computational unit bound to one workspace for the duration of a forward
/// pass. Implementations read inputs and write outputs through the
/// [`Context`]; ownership rules guarantee an instance is never executing on
/// two workspaces at once.
pub trait Agent: Send {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()>;

    /// Reseeds every stochastic draw this agent (and its sub-agents) makes.
    /// Two identically seeded runs must produce bit-identical writes.
    fn seed(&mut self, _seed: u64) {}

    /// Every trainable parameter owned directly or by sub-agents, without
    /// duplicates.
    fn parameters(&self) -> Vec<Param> {
        Vec::new()
    }

    /// Value copy: parameters and internal state are duplicated, so the
    /// clone can run concurrently with the original.
    fn clone_agent(&self) -> Box<dyn Agent>;
}

impl Agent for Box<dyn Agent> {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        (**self).forward(ctx)
    }
    fn seed(&mut self, seed: u64) {
        (**self).seed(seed)
    }
    fn parameters(&self) -> Vec<Param> {
        (**self).parameters()
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        (**self).clone_agent()
    }
}

/// Entry points for running agents over a variable store.
pub trait AgentExt: Agent {
    /// Runs `forward` exactly once with the store bound. The binding is
    /// released on return, so the agent can then run on another workspace.
    fn execute(&mut self, store: &mut dyn VarStore, kwargs: &KwArgs) -> Result<()> {
        let mut ctx = Context { store, kwargs };
        self.forward(&mut ctx)
    }

    /// Re-executes over a workspace that already contains a trace. Identical
    /// to [`execute`](AgentExt::execute) except that an empty workspace is
    /// rejected: variables this agent writes are overwritten, everything
    /// else is left untouched.
    fn replay(&mut self, store: &mut dyn VarStore, kwargs: &KwArgs) -> Result<()> {
        if store.is_empty() {
            return Err(Error::EmptyWorkspace);
        }
        self.execute(store, kwargs)
    }
}

impl<T: Agent + ?Sized> AgentExt for T {}
