use crate::error::{GradError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Abs { x: Var },
    Min { a: Var, b: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Pow { x: Var, p: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Cosine { a: Var, b: Var, axis: usize },
    Conv2d { x: Var, w: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scalar-mul",
            Op::AddScalar { .. } => "add-scalar",
            Op::Abs { .. } => "abs",
            Op::Min { .. } => "elementwise-min",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Pow { .. } => "power",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log-softmax",
            Op::LayerNorm { .. } => "layer-normalize",
            Op::BatchNorm { .. } => "batch-normalize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Cosine { .. } => "cosine-similarity",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avg-pool2",
            Op::Upsample2 { .. } => "upsample2",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b }
            | Op::Min { a, b }
            | Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Abs { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Pow { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::AvgPool2 { x }
            | Op::Upsample2 { x } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Clone, Debug, Default)]
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node; fails if the forward produced non-finite values.
    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }
}
