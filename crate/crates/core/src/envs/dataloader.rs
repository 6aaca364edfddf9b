//! Supervised data as an agent: each execute writes one batch of features
//! and labels into the workspace.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::agent::{Agent, Context};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory labeled dataset: `[N, feature_dim]` features and `[N]` labels.
#[derive(Clone)]
pub struct ArrayDataset {
    features: Vec<f32>,
    labels: Vec<f32>,
    feature_dim: usize,
    len: usize,
}

impl ArrayDataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<f32>) -> Result<ArrayDataset> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::EmptyDataset);
        }
        let feature_dim = features[0].len();
        let mut flat = Vec::with_capacity(features.len() * feature_dim);
        for row in &features {
            if row.len() != feature_dim {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: vec![feature_dim],
                    rhs: vec![row.len()],
                });
            }
            flat.extend_from_slice(row);
        }
        Ok(ArrayDataset {
            features: flat,
            len: labels.len(),
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn feature_row(&self, index: usize) -> &[f32] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }
}

/// Writes `data/x` (`[B, feature_dim]`) and `data/y` (`[B]`) at the executed
/// timestep; one execute consumes exactly one batch. Items are drawn from a
/// per-epoch shuffled ordering that reshuffles (seeded) at every epoch end,
/// so batches never come up short.
pub struct DataLoaderAgent {
    dataset: ArrayDataset,
    batch: usize,
    wrap: bool,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl DataLoaderAgent {
    pub fn new(dataset: ArrayDataset, batch: usize, wrap: bool) -> DataLoaderAgent {
        let mut loader = DataLoaderAgent {
            dataset,
            batch,
            wrap,
            seed: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        loader.reshuffle();
        loader
    }

    fn reshuffle(&mut self) {
        let mut rng = StdRng::seed_from_u64(self.seed.wrapping_add(self.epoch));
        self.order = (0..self.dataset.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let index = self.order[self.cursor];
        self.cursor += 1;
        index
    }
}

impl Agent for DataLoaderAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        if self.dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !self.wrap && self.batch > self.dataset.len() {
            return Err(Error::BatchExceedsDataset {
                batch: self.batch,
                len: self.dataset.len(),
            });
        }
        let dim = self.dataset.feature_dim();
        let mut x = Vec::with_capacity(self.batch * dim);
        let mut y = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let index = self.next_index();
            x.extend_from_slice(self.dataset.feature_row(index));
            y.push(self.dataset.labels[index]);
        }
        ctx.set("data/x", t, Tensor::from_vec(vec![self.batch, dim], x))?;
        ctx.set("data/y", t, Tensor::from_vec(vec![self.batch], y))?;
        Ok(())
    }

    fn seed(&mut self, seed: u64) {
        self.seed = seed;
        self.epoch = 0;
        self.reshuffle();
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(DataLoaderAgent {
            dataset: self.dataset.clone(),
            batch: self.batch,
            wrap: self.wrap,
            seed: self.seed,
            epoch: self.epoch,
            order: self.order.clone(),
            cursor: self.cursor,
        })
    }
}
