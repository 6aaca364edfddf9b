//! Sliding-window replay buffer built on workspaces.
//!
//! [`put`](ReplayBuffer::put) splits a trajectory workspace into fixed-length
//! windows per batch item; [`sample`](ReplayBuffer::sample) re-batches
//! uniformly drawn windows into a fresh workspace, detached from autodiff.

use std::collections::{BTreeMap, VecDeque};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::workspace::io::TrajectoryDataset;
use crate::workspace::{VarStore, Workspace};

/// One stored window: per variable a `[L, 1, ...]` tensor.
struct StoredWindow {
    vars: BTreeMap<String, Tensor>,
}

pub struct ReplayBuffer {
    capacity: usize,
    window: usize,
    storage: VecDeque<StoredWindow>,
}

impl ReplayBuffer {
    /// `capacity` bounds the number of stored single-item windows of length
    /// `window`; the oldest windows are evicted first.
    pub fn new(capacity: usize, window: usize) -> ReplayBuffer {
        assert!(capacity > 0 && window > 0);
        ReplayBuffer {
            capacity,
            window,
            storage: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    /// Inserts every window `ws[b, o..o+L)` for each batch item `b` and each
    /// start `o` in `{0, S, 2S, ...}` up to `T - L`. Returns the number of
    /// windows inserted. The workspace must be gap-free with a uniform time
    /// extent of at least `L`.
    pub fn put(&mut self, ws: &Workspace, stride: usize) -> Result<usize> {
        assert!(stride > 0);
        let batch = ws.batch_size().ok_or(Error::EmptyWorkspace)?;
        let extent = ws.max_time_extent();
        if extent < self.window {
            return Err(Error::TrajectoryTooShort {
                extent,
                window: self.window,
            });
        }
        for (name, series) in ws.variables() {
            if series.time_extent() != extent {
                return Err(Error::TimeGap {
                    name: name.to_string(),
                    t: series.time_extent(),
                });
            }
        }
        // Full tensors up front; also catches gaps.
        let mut full_vars: Vec<(String, Tensor, usize)> = Vec::new();
        for name in ws.variable_names() {
            let tensor = ws.full(&name)?;
            let item: usize = tensor.shape()[2..].iter().product();
            full_vars.push((name, tensor, item));
        }
        if let Some(first) = self.storage.front() {
            let matches = first.vars.len() == full_vars.len()
                && full_vars.iter().all(|(name, tensor, _)| {
                    first
                        .vars
                        .get(name)
                        .map(|stored| stored.shape()[2..] == tensor.shape()[2..])
                        .unwrap_or(false)
                });
            if !matches {
                return Err(Error::VariableSetMismatch);
            }
        }

        let mut inserted = 0;
        for b in 0..batch {
            let mut start = 0;
            while start + self.window <= extent {
                let mut vars = BTreeMap::new();
                for (name, tensor, item) in &full_vars {
                    let mut data = Vec::with_capacity(self.window * item);
                    for t in start..start + self.window {
                        let base = (t * batch + b) * item;
                        data.extend_from_slice(&tensor.data()[base..base + item]);
                    }
                    let mut shape = vec![self.window, 1];
                    shape.extend_from_slice(&tensor.shape()[2..]);
                    vars.insert(name.clone(), Tensor::from_vec(shape, data));
                }
                self.storage.push_back(StoredWindow { vars });
                if self.storage.len() > self.capacity {
                    self.storage.pop_front();
                }
                inserted += 1;
                start += stride;
            }
        }
        Ok(inserted)
    }

    /// Uniform sample with replacement of `m` windows, re-batched into a
    /// `[L, m, ...]` workspace.
    pub fn sample(&self, m: usize, rng_seed: u64) -> Result<Workspace> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut rng = StdRng::seed_from_u64(rng_seed);
        let picks: Vec<usize> = (0..m)
            .map(|_| rng.gen_range(0..self.storage.len()))
            .collect();
        self.assemble(&picks)
    }

    /// Deterministically re-batches the given stored windows (used by tests
    /// to enumerate the whole buffer).
    pub fn gather_windows(&self, indices: &[usize]) -> Result<Workspace> {
        for &i in indices {
            if i >= self.storage.len() {
                return Err(Error::BatchIndexOutOfRange {
                    index: i,
                    batch_size: self.storage.len(),
                });
            }
        }
        self.assemble(indices)
    }

    fn assemble(&self, picks: &[usize]) -> Result<Workspace> {
        let mut out = Workspace::new();
        let names: Vec<String> = self.storage[0].vars.keys().cloned().collect();
        for name in names {
            for t in 0..self.window {
                let mut rows = Vec::new();
                let mut item_shape: &[usize] = &[];
                for &pick in picks {
                    let tensor = &self.storage[pick].vars[&name];
                    item_shape = &tensor.shape()[2..];
                    let item: usize = item_shape.iter().product();
                    rows.extend_from_slice(&tensor.data()[t * item..(t + 1) * item]);
                }
                let mut shape = vec![picks.len()];
                shape.extend_from_slice(item_shape);
                out.set(&name, t, Tensor::from_vec(shape, rows))?;
            }
        }
        Ok(out)
    }

    /// Dumps every stored window as a batch-1 workspace.
    pub fn to_dataset(&self) -> TrajectoryDataset {
        let mut ds = TrajectoryDataset::new();
        for window in &self.storage {
            let mut ws = Workspace::new();
            for (name, tensor) in &window.vars {
                for t in 0..self.window {
                    let item: usize = tensor.shape()[2..].iter().product();
                    let mut shape = vec![1];
                    shape.extend_from_slice(&tensor.shape()[2..]);
                    let data = tensor.data()[t * item..(t + 1) * item].to_vec();
                    ws.set(name, t, Tensor::from_vec(shape, data))
                        .expect("window tensors are well-formed");
                }
            }
            ds.push(ws);
        }
        ds
    }

    /// Rebuilds a buffer from a dataset of batch-1 windows.
    pub fn from_dataset(ds: &TrajectoryDataset, capacity: usize) -> Result<ReplayBuffer> {
        let first = ds.get(0).ok_or(Error::EmptyDataset)?;
        let window = first.max_time_extent();
        let mut rb = ReplayBuffer::new(capacity, window);
        for ws in ds.iter() {
            rb.put(ws, 1)?;
        }
        Ok(rb)
    }
}
