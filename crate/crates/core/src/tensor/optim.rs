//! Gradient-descent optimizers over shared parameters.

use crate::error::Result;
use crate::tensor::{dedup_params, Param};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// Applies SGD or bias-corrected Adam updates to a fixed set of parameters.
/// Moment buffers are allocated per parameter and shape-matched at
/// construction; the step counter strictly increases.
pub struct Optimizer {
    kind: OptimKind,
    lr: f32,
    params: Vec<Param>,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn sgd(lr: f32, params: Vec<Param>) -> Optimizer {
        Optimizer::new(OptimKind::Sgd, lr, params)
    }

    /// Adam with the conventional defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f32, params: Vec<Param>) -> Optimizer {
        Optimizer::new(
            OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            params,
        )
    }

    pub fn new(kind: OptimKind, lr: f32, params: Vec<Param>) -> Optimizer {
        let params = dedup_params(params);
        let (first, second) = match kind {
            OptimKind::Sgd => (Vec::new(), Vec::new()),
            OptimKind::Adam { .. } => (
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
                params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            ),
        };
        Optimizer {
            kind,
            lr,
            params,
            step_count: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// One update over every parameter. Errors if any parameter is missing a
    /// gradient; no parameter is modified in that case.
    pub fn step(&mut self) -> Result<()> {
        for p in &self.params {
            if p.grad().is_none() {
                return Err(crate::error::Error::MissingGrad {
                    param: p.name().to_string(),
                });
            }
        }
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgd => {
                for p in &self.params {
                    p.update_with_grad(|value, grad| {
                        for (v, g) in value.iter_mut().zip(grad) {
                            *v -= lr * g;
                        }
                    })?;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, p) in self.params.iter().enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    p.update_with_grad(|value, grad| {
                        for j in 0..value.len() {
                            let g = grad[j];
                            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                            let m_hat = m[j] / bc1;
                            let v_hat = v[j] / bc2;
                            value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Clears every parameter's accumulated gradient.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
