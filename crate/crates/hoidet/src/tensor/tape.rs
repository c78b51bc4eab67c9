//! Operation tape and the backward pass.
//!
//! Each recorded node stores its operator, parent indices and forward value.
//! Nodes are appended in execution order, so parents always precede children
//! and one reverse sweep propagates gradients. `backward` takes the tape by
//! value: a tape drives exactly one backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

use super::{NodeRef, Tensor, MASK_CUTOFF};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    Scale(f64),
    AddConst(f64),
    Exp,
    Log,
    Sigmoid,
    Relu,
    Matmul,
    Transpose,
    Sum,
    Mean,
    L1Norm,
    Dot,
    Concat { axis: usize },
    Reshape,
    Gather { idx: Vec<usize> },
    Softmax { axis: usize },
    LogSoftmax,
    LogSumExp,
    Normalize { eps: f64 },
    LayerNorm { eps: f64 },
    Linear,
    FocalBce { targets: Vec<f64>, alpha: f64, gamma: f64, norm: f64 },
}

pub(crate) struct Node {
    pub op: Op,
    pub parents: Vec<usize>,
    pub value: Vec<f64>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Register a differentiable leaf (a parameter or any tensor whose
    /// gradient is wanted). Returns a tracked copy.
    pub fn var(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    /// Register a non-differentiable leaf (inputs, masks, targets).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            needs_grad: requires_grad,
        });
        t.detached().with_node(
            NodeRef {
                tape: self.id,
                idx,
            },
            requires_grad,
        )
    }

    /// Resolve a tensor to a node index on this tape, adopting untracked
    /// tensors as constant leaves.
    pub(crate) fn adopt(&mut self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(n) if n.tape == self.id => Ok(n.idx),
            Some(_) => Err(Error::TapeMismatch),
            None => {
                let idx = self.nodes.len();
                self.nodes.push(Node {
                    op: Op::Leaf,
                    parents: vec![],
                    value: t.data().to_vec(),
                    shape: t.shape().to_vec(),
                    needs_grad: false,
                });
                Ok(idx)
            }
        }
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        parents: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let idx = self.nodes.len();
        let t = Tensor::new(&shape, value.clone()).expect("op produced consistent shape");
        self.nodes.push(Node {
            op,
            parents,
            value,
            shape,
            needs_grad,
        });
        t.with_node(
            NodeRef {
                tape: self.id,
                idx,
            },
            needs_grad,
        )
    }

    pub(crate) fn node_value(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients for
    /// untouched or constant subgraphs read back as zeros.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients> {
        let node = loss.node().ok_or(Error::BadLoss {
            shape: loss.shape().to_vec(),
        })?;
        if node.tape != self.id {
            return Err(Error::TapeMismatch);
        }
        if !loss.is_scalar() {
            return Err(Error::BadLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[node.idx].needs_grad {
            grads[node.idx] = Some(vec![1.0]);
        }
        for idx in (0..=node.idx).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            backprop_node(&self.nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Returns zeros when the loss
    /// did not depend on `t`; `None` when `t` never touched this tape.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        let shape = &self.shapes[node.idx];
        let data = match &self.grads[node.idx] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::new(shape, data).expect("gradient shape consistent"))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, delta: &[f64]) {
    if !nodes[idx].needs_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
    debug_assert_eq!(slot.len(), delta.len());
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

/// Reduce an upstream gradient onto a scalar parent (the only broadcasting
/// the engine permits).
fn reduce_if_scalar(parent_len: usize, g: &[f64]) -> Vec<f64> {
    if parent_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

fn backprop_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
    let node = &nodes[idx];
    let parents = &node.parents;
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            let (a, b) = (parents[0], parents[1]);
            let ga = expand_or_pass(nodes[a].value.len(), g);
            accumulate(grads, nodes, a, &reduce_if_scalar(nodes[a].value.len(), &ga));
            let gb = expand_or_pass(nodes[b].value.len(), g);
            accumulate(grads, nodes, b, &reduce_if_scalar(nodes[b].value.len(), &gb));
        }
        Op::Sub => {
            let (a, b) = (parents[0], parents[1]);
            accumulate(grads, nodes, a, g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            accumulate(grads, nodes, b, &neg);
        }
        Op::Mul => {
            let (a, b) = (parents[0], parents[1]);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let ga: Vec<f64> = if vb.len() == 1 {
                g.iter().map(|x| x * vb[0]).collect()
            } else if va.len() == 1 {
                vec![g.iter().zip(vb.iter()).map(|(x, y)| x * y).sum()]
            } else {
                g.iter().zip(vb.iter()).map(|(x, y)| x * y).collect()
            };
            accumulate(grads, nodes, a, &ga);
            let gb: Vec<f64> = if va.len() == 1 {
                g.iter().map(|x| x * va[0]).collect()
            } else if vb.len() == 1 {
                vec![g.iter().zip(va.iter()).map(|(x, y)| x * y).sum()]
            } else {
                g.iter().zip(va.iter()).map(|(x, y)| x * y).collect()
            };
            accumulate(grads, nodes, b, &gb);
        }
        Op::Div => {
            let (a, b) = (parents[0], parents[1]);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let ga: Vec<f64> = g.iter().zip(vb.iter()).map(|(x, y)| x / y).collect();
            accumulate(grads, nodes, a, &ga);
            let gb: Vec<f64> = g
                .iter()
                .zip(va.iter().zip(vb.iter()))
                .map(|(x, (num, den))| -x * num / (den * den))
                .collect();
            accumulate(grads, nodes, b, &gb);
        }
        Op::Minimum | Op::Maximum => {
            let take_min = matches!(node.op, Op::Minimum);
            let (a, b) = (parents[0], parents[1]);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            for i in 0..va.len() {
                // Ties route to the first operand for determinism.
                let first = if take_min { va[i] <= vb[i] } else { va[i] >= vb[i] };
                if first {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            accumulate(grads, nodes, a, &ga);
            accumulate(grads, nodes, b, &gb);
        }
        Op::Scale(c) => {
            let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
            accumulate(grads, nodes, parents[0], &ga);
        }
        Op::AddConst(_) => {
            accumulate(grads, nodes, parents[0], g);
        }
        Op::Exp => {
            let ga: Vec<f64> = g.iter().zip(node.value.iter()).map(|(x, y)| x * y).collect();
            accumulate(grads, nodes, parents[0], &ga);
        }
        Op::Log => {
            let va = &nodes[parents[0]].value;
            let ga: Vec<f64> = g.iter().zip(va.iter()).map(|(x, y)| x / y).collect();
            accumulate(grads, nodes, parents[0], &ga);
        }
        Op::Sigmoid => {
            let ga: Vec<f64> = g
                .iter()
                .zip(node.value.iter())
                .map(|(x, y)| x * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, parents[0], &ga);
        }
        Op::Relu => {
            let va = &nodes[parents[0]].value;
            let ga: Vec<f64> = g
                .iter()
                .zip(va.iter())
                .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                .collect();
            accumulate(grads, nodes, parents[0], &ga);
        }
        Op::Matmul => {
            let (a, b) = (parents[0], parents[1]);
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if nodes[a].needs_grad {
                let ga = super::ops::mm_nt(g, &nodes[b].value, m, n, k);
                accumulate(grads, nodes, a, &ga);
            }
            if nodes[b].needs_grad {
                let gb = super::ops::mm_tn(&nodes[a].value, g, m, k, n);
                accumulate(grads, nodes, b, &gb);
            }
        }
        Op::Transpose => {
            let a = parents[0];
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            // Gradient of transpose is the transpose of the gradient.
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            accumulate(grads, nodes, a, &ga);
        }
        Op::Sum => {
            let a = parents[0];
            let ga = vec![g[0]; nodes[a].value.len()];
            accumulate(grads, nodes, a, &ga);
        }
        Op::Mean => {
            let a = parents[0];
            let n = nodes[a].value.len() as f64;
            let ga = vec![g[0] / n; nodes[a].value.len()];
            accumulate(grads, nodes, a, &ga);
        }
        Op::L1Norm => {
            let a = parents[0];
            let ga: Vec<f64> = nodes[a]
                .value
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        g[0]
                    } else if v < 0.0 {
                        -g[0]
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, a, &ga);
        }
        Op::Dot => {
            let (a, b) = (parents[0], parents[1]);
            let ga: Vec<f64> = nodes[b].value.iter().map(|&v| g[0] * v).collect();
            accumulate(grads, nodes, a, &ga);
            let gb: Vec<f64> = nodes[a].value.iter().map(|&v| g[0] * v).collect();
            accumulate(grads, nodes, b, &gb);
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let out_shape = &node.shape;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total_axis = out_shape[axis];
            let mut offset = 0;
            for &p in parents {
                let len_p = nodes[p].shape[axis];
                if nodes[p].needs_grad {
                    let mut gp = vec![0.0; nodes[p].value.len()];
                    for o in 0..outer {
                        for k in 0..len_p {
                            let src = (o * total_axis + offset + k) * inner;
                            let dst = (o * len_p + k) * inner;
                            gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    accumulate(grads, nodes, p, &gp);
                }
                offset += len_p;
            }
        }
        Op::Reshape => {
            accumulate(grads, nodes, parents[0], g);
        }
        Op::Gather { idx: picks } => {
            let a = parents[0];
            let mut ga = vec![0.0; nodes[a].value.len()];
            for (out_i, &src) in picks.iter().enumerate() {
                ga[src] += g[out_i];
            }
            accumulate(grads, nodes, a, &ga);
        }
        Op::Softmax { axis } => {
            let a = parents[0];
            let (outer, len, inner) = super::ops::axis_split(&node.shape, *axis);
            let y = &node.value;
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for k in 0..len {
                        let p = (o * len + k) * inner + i;
                        dot += g[p] * y[p];
                    }
                    for k in 0..len {
                        let p = (o * len + k) * inner + i;
                        ga[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, a, &ga);
        }
        Op::LogSoftmax => {
            let a = parents[0];
            let cols = *node.shape.last().unwrap();
            let rows = node.value.len() / cols;
            let mut ga = vec![0.0; node.value.len()];
            for r in 0..rows {
                let row = &node.value[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                let gsum: f64 = grow.iter().sum();
                for c in 0..cols {
                    ga[r * cols + c] = grow[c] - row[c].exp() * gsum;
                }
            }
            accumulate(grads, nodes, a, &ga);
        }
        Op::LogSumExp => {
            let a = parents[0];
            let va = &nodes[a].value;
            let lse = node.value[0];
            let ga: Vec<f64> = va
                .iter()
                .map(|&v| {
                    if v <= MASK_CUTOFF {
                        0.0
                    } else {
                        g[0] * (v - lse).exp()
                    }
                })
                .collect();
            accumulate(grads, nodes, a, &ga);
        }
        Op::Normalize { eps } => {
            let a = parents[0];
            let va = &nodes[a].value;
            let cols = *node.shape.last().unwrap();
            let rows = va.len() / cols;
            let mut ga = vec![0.0; va.len()];
            for r in 0..rows {
                let x = &va[r * cols..(r + 1) * cols];
                let y = &node.value[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *eps {
                    let gy: f64 = grow.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = (grow[c] - y[c] * gy) / norm;
                    }
                } else {
                    for c in 0..cols {
                        ga[r * cols + c] = grow[c] / eps;
                    }
                }
            }
            accumulate(grads, nodes, a, &ga);
        }
        Op::LayerNorm { eps } => {
            let (x, gain, _bias) = (parents[0], parents[1], parents[2]);
            let vx = &nodes[x].value;
            let vgain = &nodes[gain].value;
            let cols = *node.shape.last().unwrap();
            let rows = vx.len() / cols;
            let mut gx = vec![0.0; vx.len()];
            let mut ggain = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            for r in 0..rows {
                let xr = &vx[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                let mu = xr.iter().sum::<f64>() / cols as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let sd = (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) / sd).collect();
                let dxhat: Vec<f64> = grow.iter().zip(vgain.iter()).map(|(a, b)| a * b).collect();
                let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                let m2 = dxhat
                    .iter()
                    .zip(xhat.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / cols as f64;
                for c in 0..cols {
                    gx[r * cols + c] = (dxhat[c] - m1 - xhat[c] * m2) / sd;
                    ggain[c] += grow[c] * xhat[c];
                    gbias[c] += grow[c];
                }
            }
            accumulate(grads, nodes, x, &gx);
            accumulate(grads, nodes, gain, &ggain);
            accumulate(grads, nodes, parents[2], &gbias);
        }
        Op::Linear => {
            let (x, w, b) = (parents[0], parents[1], parents[2]);
            let (rows, k) = (nodes[x].shape[0], nodes[x].shape[1]);
            let out = nodes[w].shape[1];
            if nodes[x].needs_grad {
                let gx = super::ops::mm_nt(g, &nodes[w].value, rows, out, k);
                accumulate(grads, nodes, x, &gx);
            }
            if nodes[w].needs_grad {
                let gw = super::ops::mm_tn(&nodes[x].value, g, rows, k, out);
                accumulate(grads, nodes, w, &gw);
            }
            if nodes[b].needs_grad {
                let mut gb = vec![0.0; out];
                for r in 0..rows {
                    for c in 0..out {
                        gb[c] += g[r * out + c];
                    }
                }
                accumulate(grads, nodes, b, &gb);
            }
        }
        Op::FocalBce {
            targets,
            alpha,
            gamma,
            norm,
        } => {
            let a = parents[0];
            let va = &nodes[a].value;
            let scale = g[0] / norm;
            let ga: Vec<f64> = va
                .iter()
                .zip(targets.iter())
                .map(|(&x, &t)| {
                    let p = super::ops::sigmoid_stable(x);
                    let q = 1.0 - p;
                    if t > 0.5 {
                        let ln_p = -super::ops::softplus(-x);
                        scale * alpha * q.powf(*gamma) * (gamma * p * ln_p - q)
                    } else {
                        let ln_q = -super::ops::softplus(x);
                        scale * (1.0 - alpha) * p.powf(*gamma) * (p - gamma * q * ln_q)
                    }
                })
                .collect();
            accumulate(grads, nodes, a, &ga);
        }
    }
}

/// Expand a scalar gradient over a parent of size `len`, or pass through.
fn expand_or_pass(len: usize, g: &[f64]) -> Vec<f64> {
    if g.len() == 1 && len != 1 {
        vec![g[0]; len]
    } else {
        g.to_vec()
    }
}
