//! The shared variable store agents communicate through.
//!
//! A [`Workspace`] maps variable names (slash-namespaced strings such as
//! `env/env_obs`) to time-indexed series of batched tensors. Every write is
//! `[B, ...]`-shaped for a batch size `B` fixed by the first write; the time
//! axis grows on demand. Reading a slot that was never written is an error,
//! never an implicit zero, so ordering bugs between agents surface
//! immediately.

pub mod io;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named variable: per-timestep `[B, ...]` tensors plus the written mask
/// (encoded as `Option`).
#[derive(Clone, Default)]
pub struct VariableSeries {
    item_shape: Vec<usize>,
    slots: Vec<Option<Tensor>>,
}

impl VariableSeries {
    /// Per-item shape, i.e. the tensor shape with the batch axis removed.
    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    /// `1 + max timestep written`.
    pub fn time_extent(&self) -> usize {
        self.slots.len()
    }

    pub fn is_written(&self, t: usize) -> bool {
        self.slots.get(t).map(Option::is_some).unwrap_or(false)
    }

    /// Index of the first gap, if the series is not densely written.
    fn first_gap(&self) -> Option<usize> {
        self.slots.iter().position(Option::is_none)
    }
}

/// Read/write surface shared by plain workspaces and worker slices of a
/// shared-memory workspace, so agents run on either without changes.
pub trait VarStore {
    fn set(&mut self, name: &str, t: usize, value: Tensor) -> Result<()>;
    fn get(&self, name: &str, t: usize) -> Result<Tensor>;
    fn set_full(&mut self, name: &str, value: Tensor) -> Result<()>;
    fn full(&self, name: &str) -> Result<Tensor>;
    fn batch_size(&self) -> Option<usize>;
    fn time_extent(&self, name: &str) -> Option<usize>;
    fn variable_names(&self) -> Vec<String>;

    fn is_empty(&self) -> bool {
        self.variable_names().is_empty()
    }
}

#[derive(Clone, Default)]
pub struct Workspace {
    variables: BTreeMap<String, VariableSeries>,
    batch_size: Option<usize>,
    device: String,
}

impl Workspace {
    pub fn new() -> Workspace {
        Workspace {
            variables: BTreeMap::new(),
            batch_size: None,
            device: "cpu".to_string(),
        }
    }

    /// Validates a `[B, ...]` value against the workspace batch size and the
    /// variable's item shape, creating the series on first write.
    fn check_write(&mut self, name: &str, value: &Tensor) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Format("variable names must be nonempty".into()));
        }
        if value.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "workspace.set",
                lhs: value.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let batch = value.shape()[0];
        match self.batch_size {
            None => self.batch_size = Some(batch),
            Some(expected) if expected != batch => {
                return Err(Error::BatchSizeMismatch {
                    name: name.to_string(),
                    expected,
                    got: batch,
                });
            }
            _ => {}
        }
        let item_shape = &value.shape()[1..];
        if let Some(series) = self.variables.get(name) {
            if series.item_shape != item_shape {
                return Err(Error::ItemShapeMismatch {
                    name: name.to_string(),
                    expected: series.item_shape.clone(),
                    got: item_shape.to_vec(),
                });
            }
        } else {
            self.variables.insert(
                name.to_string(),
                VariableSeries {
                    item_shape: item_shape.to_vec(),
                    slots: Vec::new(),
                },
            );
        }
        Ok(())
    }

    pub fn variables(&self) -> impl Iterator<Item = (&str, &VariableSeries)> {
        self.variables.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn series(&self, name: &str) -> Option<&VariableSeries> {
        self.variables.get(name)
    }

    /// Largest time extent across all variables.
    pub fn max_time_extent(&self) -> usize {
        self.variables
            .values()
            .map(VariableSeries::time_extent)
            .max()
            .unwrap_or(0)
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    /// Metadata-only copy tagged with a different device name. Tensor storage
    /// stays host-resident and is shared with the source.
    pub fn to_device(&self, device: &str) -> Workspace {
        let mut out = self.clone();
        out.device = device.to_string();
        out
    }

    /// Drops every variable and forgets the batch size.
    pub fn clear(&mut self) {
        self.variables.clear();
        self.batch_size = None;
    }

    /// New workspace holding rows `batch_indices` over the time window
    /// `[t0, t1)`, deep-copied and detached. Every variable must be written
    /// on the whole window.
    pub fn subworkspace(
        &self,
        batch_indices: &[usize],
        t0: usize,
        t1: usize,
    ) -> Result<Workspace> {
        let batch_size = self.batch_size.ok_or(Error::EmptyWorkspace)?;
        for &index in batch_indices {
            if index >= batch_size {
                return Err(Error::BatchIndexOutOfRange { index, batch_size });
            }
        }
        let extent = self.max_time_extent();
        if t0 >= t1 || t1 > extent {
            return Err(Error::WindowOutOfRange { t0, t1, extent });
        }
        let mut out = Workspace::new();
        out.device = self.device.clone();
        for (name, series) in &self.variables {
            for t in t0..t1 {
                let tensor = series
                    .slots
                    .get(t)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| Error::UnwrittenTimestep {
                        name: name.clone(),
                        t,
                    })?;
                let rows = select_rows(tensor, batch_indices);
                out.set(name, t - t0, rows)?;
            }
        }
        Ok(out)
    }

    /// Registers a variable with zero written timesteps (used when reading
    /// files that contain empty series).
    pub(crate) fn register_empty(
        &mut self,
        name: &str,
        batch: usize,
        item_shape: &[usize],
    ) -> Result<()> {
        match self.batch_size {
            None => self.batch_size = Some(batch),
            Some(expected) if expected != batch => {
                return Err(Error::BatchSizeMismatch {
                    name: name.to_string(),
                    expected,
                    got: batch,
                });
            }
            _ => {}
        }
        self.variables.entry(name.to_string()).or_insert_with(|| {
            VariableSeries {
                item_shape: item_shape.to_vec(),
                slots: Vec::new(),
            }
        });
        Ok(())
    }

    /// Same contents with every tensor detached from autodiff.
    pub fn detach(&self) -> Workspace {
        let mut out = Workspace::new();
        out.device = self.device.clone();
        out.batch_size = self.batch_size;
        for (name, series) in &self.variables {
            out.variables.insert(
                name.clone(),
                VariableSeries {
                    item_shape: series.item_shape.clone(),
                    slots: series
                        .slots
                        .iter()
                        .map(|slot| slot.as_ref().map(Tensor::detach))
                        .collect(),
                },
            );
        }
        out
    }
}

/// Copies the given batch rows out of a `[B, ...]` tensor (detached).
fn select_rows(tensor: &Tensor, indices: &[usize]) -> Tensor {
    let item: usize = tensor.shape()[1..].iter().product();
    let data = tensor.data();
    let mut out = Vec::with_capacity(indices.len() * item);
    for &row in indices {
        out.extend_from_slice(&data[row * item..(row + 1) * item]);
    }
    let mut shape = tensor.shape().to_vec();
    shape[0] = indices.len();
    Tensor::from_vec(shape, out)
}

impl VarStore for Workspace {
    fn set(&mut self, name: &str, t: usize, value: Tensor) -> Result<()> {
        self.check_write(name, &value)?;
        let series = self.variables.get_mut(name).expect("series just ensured");
        if series.slots.len() <= t {
            series.slots.resize_with(t + 1, || None);
        }
        series.slots[t] = Some(value);
        Ok(())
    }

    fn get(&self, name: &str, t: usize) -> Result<Tensor> {
        let series = self
            .variables
            .get(name)
            .ok_or_else(|| Error::UnknownVariable {
                name: name.to_string(),
            })?;
        series
            .slots
            .get(t)
            .and_then(Option::as_ref)
            .cloned()
            .ok_or_else(|| Error::UnwrittenTimestep {
                name: name.to_string(),
                t,
            })
    }

    /// Writes all `T` timesteps of a `[T, B, ...]` tensor at once. The value
    /// is validated before any slot is touched.
    fn set_full(&mut self, name: &str, value: Tensor) -> Result<()> {
        if value.shape().len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "workspace.set_full",
                lhs: value.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let steps = value.shape()[0];
        let probe = value.slice0(0)?;
        self.check_write(name, &probe)?;
        for t in 0..steps {
            let slice = value.slice0(t)?;
            self.set(name, t, slice)?;
        }
        Ok(())
    }

    /// Stacks every written timestep into a `[T, B, ...]` tensor. Errors on
    /// the first gap.
    fn full(&self, name: &str) -> Result<Tensor> {
        let series = self
            .variables
            .get(name)
            .ok_or_else(|| Error::UnknownVariable {
                name: name.to_string(),
            })?;
        if let Some(t) = series.first_gap() {
            return Err(Error::TimeGap {
                name: name.to_string(),
                t,
            });
        }
        let slices: Vec<Tensor> = series
            .slots
            .iter()
            .map(|slot| slot.as_ref().expect("gap checked").clone())
            .collect();
        if slices.is_empty() {
            return Err(Error::UnwrittenTimestep {
                name: name.to_string(),
                t: 0,
            });
        }
        Tensor::stack(&slices)
    }

    fn batch_size(&self) -> Option<usize> {
        self.batch_size
    }

    fn time_extent(&self, name: &str) -> Option<usize> {
        self.variables.get(name).map(VariableSeries::time_extent)
    }

    fn variable_names(&self) -> Vec<String> {
        self.variables.keys().cloned().collect()
    }
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "Workspace(batch_size={:?}, device={})",
            self.batch_size, self.device
        )?;
        for (name, series) in &self.variables {
            writeln!(
                f,
                "  {name}: T={} item_shape={:?}",
                series.time_extent(),
                series.item_shape
            )?;
        }
        Ok(())
    }
}
