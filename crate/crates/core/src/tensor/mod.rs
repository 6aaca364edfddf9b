//! Dense float32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: shape plus row-major `f32` storage
//! behind an `Arc`, so clones are cheap. Differentiation works through a
//! thread-local tape: while gradients are enabled, primitive
//! operations record themselves, and [`backward`](Tensor::backward) walks the
//! recording in reverse, accumulating gradients into the leaf tensors'
//! shared gradient slots.
//!
//! Trainable state lives in [`Param`], a shared mutable cell that vends leaf
//! tensors connected to its gradient slot. Optimizers update the cell in
//! place, so every agent holding the handle sees the new values on its next
//! forward pass.

mod ops;
mod optim;
pub(crate) mod tape;

pub use optim::{Optimizer, OptimKind};
pub use tape::{grad_enabled, no_grad};

use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};

/// Shared gradient buffer. All clones of a leaf tensor (and the `Param` that
/// vended it, if any) point at the same slot, so gradients accumulate across
/// backward passes until explicitly cleared.
#[derive(Clone, Debug)]
pub(crate) struct GradSlot(pub(crate) Arc<Mutex<Option<Vec<f32>>>>);

impl GradSlot {
    fn new() -> Self {
        GradSlot(Arc::new(Mutex::new(None)))
    }

    pub(crate) fn accumulate(&self, delta: &[f32]) {
        let mut guard = self.0.lock().unwrap();
        match guard.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    fn clear(&self) {
        *self.0.lock().unwrap() = None;
    }
}

/// Dense N-dimensional float32 tensor. Zero-dimensional shapes are scalars.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    pub(crate) grad_slot: Option<GradSlot>,
    pub(crate) node: Option<tape::NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Panics if `data.len() != product(shape)`; constructing a tensor with
    /// inconsistent metadata is a programming error, not a runtime condition.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
            grad_slot: None,
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![value; n])
    }

    /// Uniform random tensor in `[lo, hi)`, drawn row by row from `rng`.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Tensor {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Extracts the value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Whether this tensor participates in differentiation: either it is a
    /// leaf with a gradient slot, or it is the live output of a recorded op.
    pub fn requires_grad(&self) -> bool {
        self.grad_slot.is_some() || self.node.map(tape::node_is_live).unwrap_or(false)
    }

    /// Marks this tensor as a differentiable leaf by attaching a fresh
    /// gradient slot. Clones made afterwards share the slot.
    pub fn requires_grad_(mut self) -> Tensor {
        if self.grad_slot.is_none() {
            self.grad_slot = Some(GradSlot::new());
        }
        self
    }

    /// Current accumulated gradient, if any backward pass has reached this
    /// leaf since the last [`zero_grad`](Tensor::zero_grad).
    pub fn grad(&self) -> Option<Tensor> {
        let slot = self.grad_slot.as_ref()?;
        let guard = slot.0.lock().unwrap();
        guard
            .as_ref()
            .map(|buf| Tensor::from_vec(self.shape.clone(), buf.clone()))
    }

    pub fn zero_grad(&self) {
        if let Some(slot) = &self.grad_slot {
            slot.clear();
        }
    }

    /// Same data, no autodiff linkage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad_slot: None,
            node: None,
        }
    }

    /// Runs reverse-mode differentiation from this scalar loss, accumulating
    /// gradients into every reachable leaf's slot. Consumes the active tape.
    pub fn backward(&self) -> Result<()> {
        tape::backward(self)
    }

    pub(crate) fn with_node(mut self, node: Option<tape::NodeRef>) -> Tensor {
        self.node = node;
        self
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        let ellipsis = if self.data.len() > 8 { ", ..." } else { "" };
        write!(
            f,
            "Tensor(shape={:?}, data={:?}{}, requires_grad={})",
            self.shape,
            preview,
            ellipsis,
            self.requires_grad()
        )
    }
}

/// Clears the gradients of a set of leaf tensors or parameters.
pub fn zero_grad(params: &[Param]) {
    for p in params {
        p.zero_grad();
    }
}

/// Shared trainable parameter: a named, mutable value cell plus a gradient
/// slot. Cloning a `Param` clones the handle; both clones refer to the same
/// storage. Use [`deep_clone`](Param::deep_clone) for a value copy.
#[derive(Clone)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    value: Arc<Mutex<Vec<f32>>>,
    slot: GradSlot,
}

impl Param {
    pub fn new(name: impl Into<String>, init: Tensor) -> Param {
        Param {
            name: name.into(),
            shape: init.shape.clone(),
            value: Arc::new(Mutex::new(init.to_vec())),
            slot: GradSlot::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Snapshot of the current value as a differentiable leaf tensor. The
    /// returned tensor shares this parameter's gradient slot, so backward
    /// passes through it accumulate here.
    pub fn value(&self) -> Tensor {
        let data = self.value.lock().unwrap().clone();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            grad_slot: Some(self.slot.clone()),
            node: None,
        }
    }

    /// Snapshot of the current value without autodiff linkage.
    pub fn value_detached(&self) -> Tensor {
        let data = self.value.lock().unwrap().clone();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn grad(&self) -> Option<Tensor> {
        let guard = self.slot.0.lock().unwrap();
        guard
            .as_ref()
            .map(|buf| Tensor::from_vec(self.shape.clone(), buf.clone()))
    }

    pub fn zero_grad(&self) {
        self.slot.clear();
    }

    /// Overwrites the stored value (hard copy, e.g. target-network sync).
    pub fn assign(&self, source: &Tensor) -> Result<()> {
        if source.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: self.shape.clone(),
                rhs: source.shape().to_vec(),
            });
        }
        self.value.lock().unwrap().copy_from_slice(source.data());
        Ok(())
    }

    /// Value copy with fresh storage and a fresh (empty) gradient slot.
    pub fn deep_clone(&self) -> Param {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: Arc::new(Mutex::new(self.value.lock().unwrap().clone())),
            slot: GradSlot::new(),
        }
    }

    /// True when both handles point at the same underlying storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.value, &other.value)
    }

    /// Applies an in-place update given the current gradient. Returns an
    /// error if no gradient is present.
    pub(crate) fn update_with_grad(
        &self,
        mut f: impl FnMut(&mut [f32], &[f32]),
    ) -> Result<()> {
        let grad_guard = self.slot.0.lock().unwrap();
        let grad = grad_guard.as_ref().ok_or_else(|| Error::MissingGrad {
            param: self.name.clone(),
        })?;
        let mut value = self.value.lock().unwrap();
        f(&mut value, grad);
        Ok(())
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param('{}', shape={:?})", self.name, self.shape)
    }
}

/// Removes duplicate handles (same underlying storage) preserving order.
pub fn dedup_params(params: Vec<Param>) -> Vec<Param> {
    let mut out: Vec<Param> = Vec::with_capacity(params.len());
    for p in params {
        if !out.iter().any(|q| q.same_storage(&p)) {
            out.push(p);
        }
    }
    out
}
