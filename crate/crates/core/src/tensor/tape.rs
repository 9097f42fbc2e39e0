use std::sync::atomic::{AtomicU64, Ordering};

use super::elementwise::Broadcast;
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    pub(crate) idx: usize,
}

/// Kind of a recorded operation; used for reporting and gradient-check tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Conv2d,
    MaxPool,
    GlobalAvgPool,
    Dense,
    BatchNorm,
    Sum,
    Mean,
    Reshape,
    Bce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "max_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Dense => "dense",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        const ALL: [OpKind; 16] = [
            OpKind::Leaf,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Relu,
            OpKind::Sigmoid,
            OpKind::Conv2d,
            OpKind::MaxPool,
            OpKind::GlobalAvgPool,
            OpKind::Dense,
            OpKind::BatchNorm,
            OpKind::Sum,
            OpKind::Mean,
            OpKind::Reshape,
            OpKind::Bce,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add { a: usize, b: usize, bcast: Broadcast },
    Sub { a: usize, b: usize, bcast: Broadcast },
    Mul { a: usize, b: usize, bcast: Broadcast },
    Scale { a: usize, k: T },
    Relu { a: usize },
    Sigmoid { a: usize },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
        window: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool { input: usize },
    Dense {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    Bce { p: usize, targets: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as ops execute, so the record is topologically ordered
/// by construction. [`Tape::backward`] walks it once in reverse. The tape is
/// reusable: a second `backward` call discards the previous gradients and
/// recomputes them from scratch, and [`Tape::clear`] drops every node so the
/// allocation can serve the next batch. Vars from a cleared or different tape
/// are rejected.
pub struct Tape<T = f32> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes; outstanding vars become foreign.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Places a tensor on the tape as an input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.idx].op.kind()
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    ///
    /// `None` when `v` does not require a gradient or was not reached from the
    /// root.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if self.check(v).is_err() {
            return None;
        }
        self.grads
            .get(v.idx)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.idx].value.shape().to_vec(), g.clone()))
    }

    /// Makes the backward rule of `kind` wrong on purpose. Only exists so the
    /// gradient-check suite can prove it catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Distance of the recorded computation from its nearest non-smooth point:
    /// the smallest `|x|` fed to a ReLU and the smallest gap between a max-pool
    /// winner and its runner-up. Finite-difference checks are only meaningful
    /// when this exceeds the perturbation's effect.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { a } => {
                    for &x in self.val(*a).data() {
                        margin = margin.min(x.abs().as_f64());
                    }
                }
                Op::MaxPool {
                    input,
                    window,
                    stride,
                    pad,
                    ..
                } => {
                    margin = margin.min(super::pool::max_pool_margin(self.val(*input), *window, *stride, *pad));
                }
                _ => {}
            }
        }
        margin
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(crate) fn val(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    pub(crate) fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Reverse pass from a scalar root.
    ///
    /// Every node reachable from the root that requires a gradient ends up
    /// with one; contributions from multiple consumers add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        let root_value = &self.nodes[root.idx].value;
        if !root_value.is_scalar() {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[root.idx].requires_grad {
            grads[root.idx] = Some(vec![T::one()]);
        }
        let mut contribs = Vec::new();
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            contribs.clear();
            self.node_backward(i, &g, &mut contribs);
            if self.fault.is_some() && self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|x| *x = *x * T::lit(1.5));
                }
            }
            for (target, c) in contribs.drain(..) {
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T], out: &mut Vec<(usize, Vec<T>)>) {
        use super::{conv, dense, elementwise, norm, pool, reduce};
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bcast } => elementwise::add_backward(self, *a, *b, *bcast, g, false, out),
            Op::Sub { a, b, bcast } => elementwise::add_backward(self, *a, *b, *bcast, g, true, out),
            Op::Mul { a, b, bcast } => elementwise::mul_backward(self, *a, *b, *bcast, g, out),
            Op::Scale { a, k } => {
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|&x| x * *k).collect()));
                }
            }
            Op::Relu { a } => elementwise::relu_backward(self, *a, g, out),
            Op::Sigmoid { a } => elementwise::sigmoid_backward(self, *a, &node.value, g, out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => conv::conv2d_backward(self, *input, *kernel, *bias, *stride, *pad, g, out),
            Op::MaxPool { input, argmax, .. } => pool::max_pool_backward(self, *input, argmax, g, out),
            Op::GlobalAvgPool { input } => pool::global_avg_backward(self, *input, g, out),
            Op::Dense {
                input,
                weight,
                bias,
            } => dense::dense_backward(self, *input, *weight, *bias, g, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => norm::batch_norm_backward(
                self,
                norm::Saved {
                    input: *input,
                    gamma: *gamma,
                    beta: *beta,
                    xhat,
                    inv_std,
                    batch_stats: *batch_stats,
                },
                g,
                out,
            ),
            Op::Sum { a } => reduce::sum_backward(self, *a, g[0], false, out),
            Op::Mean { a } => reduce::sum_backward(self, *a, g[0], true, out),
            Op::Reshape { a } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Bce { p, targets } => reduce::bce_backward(self, *p, targets, g[0], out),
        }
    }
}
