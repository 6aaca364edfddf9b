//! Thread-local recording tape for reverse-mode differentiation.
//!
//! The tape lives for one forward pass: primitive ops append nodes while
//! gradients are enabled, `backward` consumes the recording in exact reverse
//! order and bumps the generation counter, invalidating every node reference
//! handed out so far. Stale references are treated as constants by later
//! ops, so tensors kept across iterations behave like detached data.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{GradSlot, Tensor};

/// Reference to a node on the thread's tape, valid for one generation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NodeRef {
    generation: u64,
    index: usize,
}

/// How a binary elementwise op lined its operands up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Broadcast {
    /// Same shape on both sides.
    None,
    /// Left operand was a `[B, 1]` column expanded against `[B, N]`.
    LhsCol { cols: usize },
    /// Right operand was the `[B, 1]` column.
    RhsCol { cols: usize },
}

pub(crate) enum Op {
    Leaf {
        slot: GradSlot,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
        bc: Broadcast,
    },
    Sub {
        a: Option<usize>,
        b: Option<usize>,
        bc: Broadcast,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        a_data: Arc<Vec<f32>>,
        b_data: Arc<Vec<f32>>,
        bc: Broadcast,
    },
    ScalarMul {
        a: usize,
        factor: f32,
    },
    Matmul {
        a: Option<usize>,
        b: Option<usize>,
        a_data: Arc<Vec<f32>>,
        b_data: Arc<Vec<f32>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu {
        a: usize,
        input: Arc<Vec<f32>>,
    },
    Tanh {
        a: usize,
        output: Arc<Vec<f32>>,
    },
    Log {
        a: usize,
        input: Arc<Vec<f32>>,
    },
    Exp {
        a: usize,
        output: Arc<Vec<f32>>,
    },
    Softmax {
        a: usize,
        output: Arc<Vec<f32>>,
        row: usize,
    },
    Gather {
        a: usize,
        indices: Vec<usize>,
        row: usize,
    },
    Concat {
        /// Per part: optional input node, extent along the concat axis.
        parts: Vec<(Option<usize>, usize)>,
        outer: usize,
        inner: usize,
    },
    Stack {
        parts: Vec<Option<usize>>,
        item: usize,
    },
    Slice0 {
        a: usize,
        index: usize,
        item: usize,
        total: usize,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
        n: usize,
    },
    MseLoss {
        a: Option<usize>,
        b: Option<usize>,
        diff: Vec<f32>,
    },
    CrossEntropy {
        logits: usize,
        softmax: Arc<Vec<f32>>,
        targets: Vec<usize>,
        classes: usize,
    },
}

struct Node {
    op: Op,
    numel: usize,
}

struct TapeState {
    disabled: u32,
    generation: u64,
    nodes: Vec<Node>,
}

thread_local! {
    static TAPE: RefCell<TapeState> = const {
        RefCell::new(TapeState {
            disabled: 0,
            generation: 0,
            nodes: Vec::new(),
        })
    };
}

/// Whether operations on this thread currently record gradients.
pub fn grad_enabled() -> bool {
    TAPE.with(|t| t.borrow().disabled == 0)
}

/// Runs `f` with gradient recording disabled. Nesting is allowed; recording
/// resumes once the outermost guard exits.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| t.borrow_mut().disabled += 1);
    struct Reenable;
    impl Drop for Reenable {
        fn drop(&mut self) {
            TAPE.with(|t| t.borrow_mut().disabled -= 1);
        }
    }
    let _guard = Reenable;
    f()
}

pub(crate) fn node_is_live(node: NodeRef) -> bool {
    TAPE.with(|t| {
        let tape = t.borrow();
        node.generation == tape.generation && node.index < tape.nodes.len()
    })
}

/// Resolves a tensor to a node index on the current tape. Live outputs keep
/// their node; gradient-slot leaves are (re)registered; everything else is a
/// constant.
pub(crate) fn input_node(t: &Tensor) -> Option<usize> {
    TAPE.with(|state| {
        let mut tape = state.borrow_mut();
        if tape.disabled > 0 {
            return None;
        }
        if let Some(node) = t.node {
            if node.generation == tape.generation && node.index < tape.nodes.len() {
                return Some(node.index);
            }
        }
        t.grad_slot.as_ref().map(|slot| {
            let index = tape.nodes.len();
            tape.nodes.push(Node {
                op: Op::Leaf { slot: slot.clone() },
                numel: t.numel(),
            });
            index
        })
    })
}

/// Appends an op node and returns a reference for the output tensor.
pub(crate) fn record(op: Op, out_numel: usize) -> NodeRef {
    TAPE.with(|state| {
        let mut tape = state.borrow_mut();
        let index = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            numel: out_numel,
        });
        NodeRef {
            generation: tape.generation,
            index,
        }
    })
}

fn add_into(slot: &mut Option<Vec<f32>>, numel: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
    f(buf);
}

/// Reverse pass from a scalar loss. Consumes the tape: afterwards the thread
/// has a fresh, empty recording and all prior node references are dead.
pub(crate) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let root = match loss.node {
        Some(node) if node_is_live(node) => node.index,
        _ => return Err(Error::DetachedLoss),
    };

    let nodes: Vec<Node> = TAPE.with(|state| {
        let mut tape = state.borrow_mut();
        tape.generation += 1;
        std::mem::take(&mut tape.nodes)
    });

    let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
    grads[root] = Some(vec![1.0]);

    for index in (0..=root).rev() {
        let Some(gout) = grads[index].take() else {
            continue;
        };
        // Split-borrow: gradient writes always target strictly smaller indices
        // because the tape is in topological order.
        let (before, rest) = grads.split_at_mut(index);
        debug_assert!(rest.len() + before.len() == nodes.len());
        let node = &nodes[index];
        let input_numel = |idx: usize| nodes[idx].numel;
        match &node.op {
            Op::Leaf { slot } => slot.accumulate(&gout),
            Op::Add { a, b, bc } => {
                if let Some(a) = *a {
                    add_into(&mut before[a], input_numel(a), |g| {
                        accumulate_binary_side(g, &gout, *bc, true, 1.0);
                    });
                }
                if let Some(b) = *b {
                    add_into(&mut before[b], input_numel(b), |g| {
                        accumulate_binary_side(g, &gout, *bc, false, 1.0);
                    });
                }
            }
            Op::Sub { a, b, bc } => {
                if let Some(a) = *a {
                    add_into(&mut before[a], input_numel(a), |g| {
                        accumulate_binary_side(g, &gout, *bc, true, 1.0);
                    });
                }
                if let Some(b) = *b {
                    add_into(&mut before[b], input_numel(b), |g| {
                        accumulate_binary_side(g, &gout, *bc, false, -1.0);
                    });
                }
            }
            Op::Mul {
                a,
                b,
                a_data,
                b_data,
                bc,
            } => {
                if let Some(a) = *a {
                    add_into(&mut before[a], input_numel(a), |g| {
                        accumulate_mul_side(g, &gout, b_data, *bc, true);
                    });
                }
                if let Some(b) = *b {
                    add_into(&mut before[b], input_numel(b), |g| {
                        accumulate_mul_side(g, &gout, a_data, *bc, false);
                    });
                }
            }
            Op::ScalarMul { a, factor } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for (gi, go) in g.iter_mut().zip(&gout) {
                        *gi += factor * go;
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                a_data,
                b_data,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(a) = *a {
                    // dA = dC x B^T
                    add_into(&mut before[a], input_numel(a), |g| {
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += gout[i * n + c] * b_data[j * n + c];
                                }
                                g[i * k + j] += acc;
                            }
                        }
                    });
                }
                if let Some(b) = *b {
                    // dB = A^T x dC
                    add_into(&mut before[b], input_numel(b), |g| {
                        for i in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += a_data[r * k + i] * gout[r * n + j];
                                }
                                g[i * n + j] += acc;
                            }
                        }
                    });
                }
            }
            Op::Relu { a, input } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for i in 0..gout.len() {
                        if input[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Tanh { a, output } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for i in 0..gout.len() {
                        g[i] += gout[i] * (1.0 - output[i] * output[i]);
                    }
                });
            }
            Op::Log { a, input } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for i in 0..gout.len() {
                        g[i] += gout[i] / input[i];
                    }
                });
            }
            Op::Exp { a, output } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for i in 0..gout.len() {
                        g[i] += gout[i] * output[i];
                    }
                });
            }
            Op::Softmax { a, output, row } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    let rows = gout.len() / row;
                    for r in 0..rows {
                        let s = &output[r * row..(r + 1) * row];
                        let gy = &gout[r * row..(r + 1) * row];
                        let dot: f32 = s.iter().zip(gy).map(|(si, gi)| si * gi).sum();
                        for c in 0..*row {
                            g[r * row + c] += s[c] * (gy[c] - dot);
                        }
                    }
                });
            }
            Op::Gather { a, indices, row } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for (r, &idx) in indices.iter().enumerate() {
                        g[r * row + idx] += gout[r];
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total_axis: usize = parts.iter().map(|(_, extent)| extent).sum();
                let mut offset = 0;
                for (part, extent) in parts {
                    if let Some(p) = *part {
                        let extent = *extent;
                        add_into(&mut before[p], input_numel(p), |g| {
                            for o in 0..*outer {
                                for e in 0..extent {
                                    let src = (o * total_axis + offset + e) * inner;
                                    let dst = (o * extent + e) * inner;
                                    for i in 0..*inner {
                                        g[dst + i] += gout[src + i];
                                    }
                                }
                            }
                        });
                    }
                    offset += extent;
                }
            }
            Op::Stack { parts, item } => {
                for (k, part) in parts.iter().enumerate() {
                    if let Some(p) = *part {
                        add_into(&mut before[p], input_numel(p), |g| {
                            let src = &gout[k * item..(k + 1) * item];
                            for (gi, go) in g.iter_mut().zip(src) {
                                *gi += go;
                            }
                        });
                    }
                }
            }
            Op::Slice0 {
                a,
                index: slice_index,
                item,
                total,
            } => {
                debug_assert_eq!(input_numel(*a), *total);
                add_into(&mut before[*a], *total, |g| {
                    let dst = &mut g[slice_index * item..(slice_index + 1) * item];
                    for (gi, go) in dst.iter_mut().zip(&gout) {
                        *gi += go;
                    }
                });
            }
            Op::Reshape { a } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for (gi, go) in g.iter_mut().zip(&gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sum { a } => {
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                });
            }
            Op::Mean { a, n } => {
                let scale = 1.0 / *n as f32;
                add_into(&mut before[*a], input_numel(*a), |g| {
                    for gi in g.iter_mut() {
                        *gi += gout[0] * scale;
                    }
                });
            }
            Op::MseLoss { a, b, diff } => {
                let scale = 2.0 * gout[0] / diff.len() as f32;
                if let Some(a) = *a {
                    add_into(&mut before[a], input_numel(a), |g| {
                        for (gi, d) in g.iter_mut().zip(diff) {
                            *gi += scale * d;
                        }
                    });
                }
                if let Some(b) = *b {
                    add_into(&mut before[b], input_numel(b), |g| {
                        for (gi, d) in g.iter_mut().zip(diff) {
                            *gi -= scale * d;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                softmax,
                targets,
                classes,
            } => {
                let rows = targets.len();
                let scale = gout[0] / rows as f32;
                add_into(&mut before[*logits], input_numel(*logits), |g| {
                    for (r, &target) in targets.iter().enumerate() {
                        for c in 0..*classes {
                            let indicator = if c == target { 1.0 } else { 0.0 };
                            g[r * classes + c] += scale * (softmax[r * classes + c] - indicator);
                        }
                    }
                });
            }
        }
    }
    Ok(())
}

fn accumulate_binary_side(g: &mut [f32], gout: &[f32], bc: Broadcast, is_lhs: bool, sign: f32) {
    let reduce = match bc {
        Broadcast::None => None,
        Broadcast::LhsCol { cols } if is_lhs => Some(cols),
        Broadcast::RhsCol { cols } if !is_lhs => Some(cols),
        _ => None,
    };
    match reduce {
        None => {
            for (gi, go) in g.iter_mut().zip(gout) {
                *gi += sign * go;
            }
        }
        Some(cols) => {
            for (r, gi) in g.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += gout[r * cols + c];
                }
                *gi += sign * acc;
            }
        }
    }
}

fn accumulate_mul_side(g: &mut [f32], gout: &[f32], other: &[f32], bc: Broadcast, is_lhs: bool) {
    let self_is_col = matches!(
        (bc, is_lhs),
        (Broadcast::LhsCol { .. }, true) | (Broadcast::RhsCol { .. }, false)
    );
    let other_is_col = matches!(
        (bc, is_lhs),
        (Broadcast::LhsCol { .. }, false) | (Broadcast::RhsCol { .. }, true)
    );
    match bc {
        Broadcast::None => {
            for i in 0..gout.len() {
                g[i] += gout[i] * other[i];
            }
        }
        Broadcast::LhsCol { cols } | Broadcast::RhsCol { cols } => {
            if self_is_col {
                // This side is [B, 1]: reduce over the expanded axis.
                for (r, gi) in g.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..cols {
                        acc += gout[r * cols + c] * other[r * cols + c];
                    }
                    *gi += acc;
                }
            } else {
                debug_assert!(other_is_col);
                // This side is [B, N]; the other operand broadcasts per row.
                let rows = gout.len() / cols;
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] += gout[r * cols + c] * other[r];
                    }
                }
            }
        }
    }
}
