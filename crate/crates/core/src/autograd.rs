//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] owns every value computed through it. Operations append a
//! node holding the output value and whatever context the backward pass
//! needs, so node order is a topological order by construction.
//! [`Graph::backward`] walks the nodes once in reverse, summing adjoints
//! into each input.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{basic, batchnorm, conv, loss, resize, ConvSpec};
use crate::tensor::{Real, Shape, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Sum,
    Relu,
    Concat,
    Conv,
    BatchNorm,
    Resize,
    SoftmaxCrossEntropy,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Concat(Var, Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        ctx: batchnorm::Saved<T>,
    },
    Resize(Var),
    SoftmaxCe {
        logits: Var,
        probs: Tensor<T>,
        target: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(_) => OpKind::Sum,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat(..) => OpKind::Concat,
            Op::Conv { .. } => OpKind::Conv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Resize(_) => OpKind::Resize,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    kinks: Option<u64>,
    visits: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            kinks: None,
            visits: 0,
        }
    }

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("var from another graph");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient of the last backward pass for a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Number of nodes whose adjoint was propagated in the last backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.visits
    }

    /// Starts hashing the active/inactive pattern of every relu evaluated
    /// from here on. Two evaluations with equal signatures lie on the same
    /// linear piece.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub(crate) fn record_kinks(&mut self, mask: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            for bit in mask {
                *h ^= bit as u64 + 1;
                *h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable {} does not belong to this graph",
                v.id
            )));
        }
        Ok(())
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    /// Records an operation output. Inputs must already be validated.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Propagates d`loss`/d`leaf` into every trainable leaf. Gradients from
    /// a previous pass are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.nodes[loss.id].value.shape();
        if shape != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        if !self.nodes[loss.id].requires_grad {
            return Err(Error::Contract(
                "loss is detached: no trainable leaf reaches it".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        let mut visits = 0;

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            visits += 1;
            if let Op::Leaf = node.op {
                grads[id] = Some(upstream);
                continue;
            }
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc.add(*b, upstream.clone());
                    acc.add(*a, upstream);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) =
                        basic::mul_backward(&upstream, self.val(*a), self.val(*b));
                    acc.add(*a, ga);
                    acc.add(*b, gb);
                }
                Op::Sum(x) => {
                    acc.add(*x, Tensor::full(self.val(*x).shape(), upstream.data()[0]));
                }
                Op::Relu(x) => {
                    acc.add(*x, basic::relu_backward(&upstream, self.val(*x)));
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = basic::concat_backward(
                        &upstream,
                        self.val(*a).shape(),
                        self.val(*b).shape(),
                    );
                    acc.add(*a, ga);
                    acc.add(*b, gb);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let grads = conv::backward(
                        &upstream,
                        self.val(*input),
                        self.val(*weight),
                        spec,
                        conv::Needs {
                            input: acc.wants(*input),
                            weight: acc.wants(*weight),
                            bias: bias.is_some_and(|b| acc.wants(b)),
                        },
                    );
                    if let Some(g) = grads.input {
                        acc.add(*input, g);
                    }
                    if let Some(g) = grads.weight {
                        acc.add(*weight, g);
                    }
                    if let (Some(b), Some(g)) = (bias, grads.bias) {
                        acc.add(*b, g);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    ctx,
                } => {
                    let (gx, gg, gb) = batchnorm::backward(
                        &upstream,
                        self.val(*input),
                        self.val(*gamma),
                        ctx,
                    );
                    acc.add(*input, gx);
                    acc.add(*gamma, gg);
                    acc.add(*beta, gb);
                }
                Op::Resize(x) => {
                    let s = self.val(*x).shape();
                    acc.add(*x, resize::bilinear_adjoint(&upstream, s.h, s.w));
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    target,
                } => {
                    acc.add(
                        *logits,
                        loss::softmax_ce_backward(upstream.data()[0], probs, target),
                    );
                }
            }
        }
        self.grads = grads;
        self.visits = visits;
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub(crate) fn op_of(&self, v: Var) -> &Op<T> {
        &self.nodes[v.id].op
    }
}

struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Real> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn add(&mut self, v: Var, delta: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}
