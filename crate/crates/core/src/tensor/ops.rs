//! Primitive tensor operations.
//!
//! Shape rules are strict: elementwise ops accept identical shapes plus the
//! single `[B, 1]` vs `[B, N]` column broadcast, and nothing else. Anything
//! off-contract is an error naming both shapes, never a silent coercion.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tape::{self, Broadcast, Op};
use crate::tensor::{numel, Tensor};

fn binary_layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        return Ok((Broadcast::None, a.shape().to_vec()));
    }
    if a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[0] == b.shape()[0] {
        if a.shape()[1] == 1 && b.shape()[1] > 1 {
            return Ok((Broadcast::LhsCol { cols: b.shape()[1] }, b.shape().to_vec()));
        }
        if b.shape()[1] == 1 && a.shape()[1] > 1 {
            return Ok((Broadcast::RhsCol { cols: a.shape()[1] }, a.shape().to_vec()));
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    bc: Broadcast,
    out_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let a_data = a.data();
    let b_data = b.data();
    match bc {
        Broadcast::None => a_data.iter().zip(b_data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LhsCol { cols } => {
            let mut out = Vec::with_capacity(numel(out_shape));
            for r in 0..a_data.len() {
                for c in 0..cols {
                    out.push(f(a_data[r], b_data[r * cols + c]));
                }
            }
            out
        }
        Broadcast::RhsCol { cols } => {
            let mut out = Vec::with_capacity(numel(out_shape));
            for r in 0..b_data.len() {
                for c in 0..cols {
                    out.push(f(a_data[r * cols + c], b_data[r]));
                }
            }
            out
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (bc, out_shape) = binary_layout("add", self, other)?;
        let data = binary_forward(self, other, bc, &out_shape, |x, y| x + y);
        let mut out = Tensor::from_vec(out_shape, data);
        if tape::grad_enabled() {
            let a = tape::input_node(self);
            let b = tape::input_node(other);
            if a.is_some() || b.is_some() {
                let node = tape::record(Op::Add { a, b, bc }, out.numel());
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (bc, out_shape) = binary_layout("sub", self, other)?;
        let data = binary_forward(self, other, bc, &out_shape, |x, y| x - y);
        let mut out = Tensor::from_vec(out_shape, data);
        if tape::grad_enabled() {
            let a = tape::input_node(self);
            let b = tape::input_node(other);
            if a.is_some() || b.is_some() {
                let node = tape::record(Op::Sub { a, b, bc }, out.numel());
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (bc, out_shape) = binary_layout("mul", self, other)?;
        let data = binary_forward(self, other, bc, &out_shape, |x, y| x * y);
        let mut out = Tensor::from_vec(out_shape, data);
        if tape::grad_enabled() {
            let a = tape::input_node(self);
            let b = tape::input_node(other);
            if a.is_some() || b.is_some() {
                let node = tape::record(
                    Op::Mul {
                        a,
                        b,
                        a_data: self.data_arc(),
                        b_data: other.data_arc(),
                        bc,
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    pub fn mul_scalar(&self, factor: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x * factor).collect();
        let mut out = Tensor::from_vec(self.shape().to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(Op::ScalarMul { a, factor }, out.numel());
                out = out.with_node(Some(node));
            }
        }
        out
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let a_data = self.data();
        let b_data = other.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..k {
                let aij = a_data[i * k + j];
                if aij == 0.0 {
                    continue;
                }
                let row = &b_data[j * n..(j + 1) * n];
                let out_row = &mut data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(row) {
                    *o += aij * b;
                }
            }
        }
        let mut out = Tensor::from_vec(vec![m, n], data);
        if tape::grad_enabled() {
            let a = tape::input_node(self);
            let b = tape::input_node(other);
            if a.is_some() || b.is_some() {
                let node = tape::record(
                    Op::Matmul {
                        a,
                        b,
                        a_data: self.data_arc(),
                        b_data: other.data_arc(),
                        m,
                        k,
                        n,
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        let mut out = Tensor::from_vec(self.shape().to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Relu {
                        a,
                        input: self.data_arc(),
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        out
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| x.tanh()).collect();
        let mut out = Tensor::from_vec(self.shape().to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Tanh {
                        a,
                        output: out.data_arc(),
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        out
    }

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.ln()).collect();
        let mut out = Tensor::from_vec(self.shape().to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Log {
                        a,
                        input: self.data_arc(),
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        out
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        let mut out = Tensor::from_vec(self.shape().to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Exp {
                        a,
                        output: out.data_arc(),
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        out
    }

    /// Softmax along the last axis, max-shifted for stability.
    pub fn softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        let row = *shape.last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![],
        })?;
        if row == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let data = self.data();
        let mut out_data = vec![0.0f32; data.len()];
        for r in 0..data.len() / row {
            let x = &data[r * row..(r + 1) * row];
            let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for c in 0..row {
                let e = (x[c] - max).exp();
                out_data[r * row + c] = e;
                sum += e;
            }
            for c in 0..row {
                out_data[r * row + c] /= sum;
            }
        }
        let mut out = Tensor::from_vec(shape.to_vec(), out_data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Softmax {
                        a,
                        output: out.data_arc(),
                        row,
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Picks one entry per row along the last axis. `indices` must have this
    /// tensor's shape minus the last axis; values are rounded to integers.
    pub fn gather(&self, indices: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: indices.shape().to_vec(),
            });
        }
        let row = shape[shape.len() - 1];
        let lead = &shape[..shape.len() - 1];
        if indices.shape() != lead {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: indices.shape().to_vec(),
            });
        }
        let mut idx = Vec::with_capacity(indices.numel());
        for &raw in indices.data() {
            let i = raw.round() as i64;
            if i < 0 || i as usize >= row {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: row,
                });
            }
            idx.push(i as usize);
        }
        let data = self.data();
        let out_data: Vec<f32> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| data[r * row + i])
            .collect();
        let mut out = Tensor::from_vec(lead.to_vec(), out_data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Gather {
                        a,
                        indices: idx,
                        row,
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Concatenates tensors along `axis`. All parts must share rank and every
    /// extent except the one being concatenated.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyContainer)?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::IndexOutOfRange {
                op: "concat",
                index: axis as i64,
                bound: rank,
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;

        let mut data = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let extent = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * extent * inner;
                data[dst_base..dst_base + extent * inner]
                    .copy_from_slice(&src[src_base..src_base + extent * inner]);
            }
            offset += extent;
        }
        let mut out = Tensor::from_vec(out_shape, data);
        if tape::grad_enabled() {
            let nodes: Vec<(Option<usize>, usize)> = parts
                .iter()
                .map(|p| (tape::input_node(p), p.shape()[axis]))
                .collect();
            if nodes.iter().any(|(n, _)| n.is_some()) {
                let node = tape::record(
                    Op::Concat {
                        parts: nodes,
                        outer,
                        inner,
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyContainer)?;
        let item = first.numel();
        let mut data = Vec::with_capacity(parts.len() * item);
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.data());
        }
        let mut out_shape = Vec::with_capacity(first.shape().len() + 1);
        out_shape.push(parts.len());
        out_shape.extend_from_slice(first.shape());
        let mut out = Tensor::from_vec(out_shape, data);
        if tape::grad_enabled() {
            let nodes: Vec<Option<usize>> = parts.iter().map(tape::input_node).collect();
            if nodes.iter().any(Option::is_some) {
                let node = tape::record(Op::Stack { parts: nodes, item }, out.numel());
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Selects one index along the leading axis, dropping that axis.
    pub fn slice0(&self, index: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::IndexOutOfRange {
                op: "slice0",
                index: index as i64,
                bound: shape.first().copied().unwrap_or(0),
            });
        }
        let item: usize = shape[1..].iter().product();
        let data = self.data()[index * item..(index + 1) * item].to_vec();
        let mut out = Tensor::from_vec(shape[1..].to_vec(), data);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(
                    Op::Slice0 {
                        a,
                        index,
                        item,
                        total: self.numel(),
                    },
                    out.numel(),
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let mut out = Tensor::from_vec(shape, self.to_vec());
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(Op::Reshape { a }, out.numel());
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Sum of every element, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f32 = self.data().iter().sum();
        let mut out = Tensor::scalar(total);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(Op::Sum { a }, 1);
                out = out.with_node(Some(node));
            }
        }
        out
    }

    /// Mean of every element, as a scalar tensor. Errors on empty tensors.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let total: f32 = self.data().iter().sum();
        let mut out = Tensor::scalar(total / n as f32);
        if tape::grad_enabled() {
            if let Some(a) = tape::input_node(self) {
                let node = tape::record(Op::Mean { a, n }, 1);
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Mean squared error against a same-shaped target, as a scalar.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if self.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let diff: Vec<f32> = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let n = diff.len() as f32;
        let loss = diff.iter().map(|d| d * d).sum::<f32>() / n;
        let mut out = Tensor::scalar(loss);
        if tape::grad_enabled() {
            let a = tape::input_node(self);
            let b = tape::input_node(target);
            if a.is_some() || b.is_some() {
                let node = tape::record(Op::MseLoss { a, b, diff }, 1);
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy between `[rows, classes]` logits and `[rows]` class
    /// indices (stored as floats, rounded on read).
    pub fn cross_entropy(&self, targets: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || targets.shape() != &shape[..1] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if rows == 0 || classes == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let mut target_idx = Vec::with_capacity(rows);
        for &raw in targets.data() {
            let i = raw.round() as i64;
            if i < 0 || i as usize >= classes {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: i,
                    bound: classes,
                });
            }
            target_idx.push(i as usize);
        }
        let data = self.data();
        let mut softmax = vec![0.0f32; rows * classes];
        let mut loss = 0.0f32;
        for r in 0..rows {
            let x = &data[r * classes..(r + 1) * classes];
            let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..classes {
                let e = (x[c] - max).exp();
                softmax[r * classes + c] = e;
                sum += e;
            }
            for c in 0..classes {
                softmax[r * classes + c] /= sum;
            }
            let log_sum = sum.ln() + max;
            loss += log_sum - x[target_idx[r]];
        }
        let mut out = Tensor::scalar(loss / rows as f32);
        if tape::grad_enabled() {
            if let Some(logits) = tape::input_node(self) {
                let node = tape::record(
                    Op::CrossEntropy {
                        logits,
                        softmax: Arc::new(softmax),
                        targets: target_idx,
                        classes,
                    },
                    1,
                );
                out = out.with_node(Some(node));
            }
        }
        Ok(out)
    }

    /// Index of the largest entry per row along the last axis (no autodiff).
    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        let shape = self.shape();
        let row = *shape.last().ok_or(Error::ShapeMismatch {
            op: "argmax",
            lhs: shape.to_vec(),
            rhs: vec![],
        })?;
        if row == 0 {
            return Err(Error::ShapeMismatch {
                op: "argmax",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let data = self.data();
        let mut out = Vec::with_capacity(data.len() / row);
        for r in 0..data.len() / row {
            let x = &data[r * row..(r + 1) * row];
            let mut best = 0;
            for c in 1..row {
                if x[c] > x[best] {
                    best = c;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}
