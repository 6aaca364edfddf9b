//! tabula: a sequential-decision framework built around a single idea — all
//! computation is expressed as agents reading and writing time-indexed,
//! batched tensor variables in a shared workspace.
//!
//! The crate provides:
//!
//! - [`Tensor`]: dense float32 arrays with reverse-mode autodiff and
//!   SGD/Adam optimizers ([`Optimizer`]);
//! - [`Workspace`]: the variable store, with slicing, detaching and a
//!   bit-exact binary format;
//! - [`Agent`] and the [`Sequential`] / [`Temporal`] containers for
//!   composing environments, policies, losses and data loaders;
//! - built-in batched environments ([`envs`]) including a differentiable
//!   one for model-based training;
//! - worker-pool execution of any agent over a shared-memory workspace
//!   partitioned along the batch dimension ([`parallel`]);
//! - a sliding-window [`ReplayBuffer`] over workspaces;
//! - reference training procedures ([`algorithms`]): policy gradient,
//!   advantage actor-critic, double Q-learning and behavioral cloning, all
//!   agnostic to the policy architecture.

pub mod agent;
pub mod algorithms;
pub mod envs;
pub mod error;
pub mod parallel;
pub mod replay;
pub mod tensor;
pub mod workspace;

pub use agent::{Agent, AgentExt, Context, KwArgs, KwValue, Sequential, Temporal};
pub use error::{Error, Result};
pub use replay::ReplayBuffer;
pub use tensor::{grad_enabled, no_grad, zero_grad, OptimKind, Optimizer, Param, Tensor};
pub use workspace::io::TrajectoryDataset;
pub use workspace::{VarStore, Workspace};
