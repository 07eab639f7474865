use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Silu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// heads × T × T attention weights (upper triangle zero).
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Pick(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    SliceCol(NodeId, usize),
    MulCol(NodeId, NodeId),
    RowMerge(NodeId, NodeId, Vec<bool>),
    NormalizeRows(NodeId),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Arc<Tensor>,
    pub(crate) requires_grad: bool,
}

/// Define-by-run tape: every op is evaluated eagerly when recorded, so the
/// forward pass is the act of building the graph. A graph serves exactly one
/// forward pass; rebuild it to evaluate new leaf values.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Arc::new(value), true)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_ref())
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn push(&mut self, op: Op, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Id the next recorded node will receive; used in error reports.
    pub(crate) fn next_id(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }
}

/// Gradients of a scalar root with respect to every leaf of the graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` if `leaf` is not a leaf of the graph.
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}
