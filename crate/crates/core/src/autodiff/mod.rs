//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and whatever the backward rule needs. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep. Build a fresh graph per
//! training step.

mod backward;
pub(crate) mod kernels;
mod ops;
#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::Activation;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel used by index maps for "no source" / "dropped".
pub(crate) const NONE: usize = usize::MAX;

pub(crate) struct LstmRecord {
    pub x: Var,
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub reverse: bool,
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    /// Post-activation gates `[batch × steps × 4H]`, order (i, f, g, o).
    pub gates: Vec<f64>,
    /// Cell states `[batch × steps × H]`.
    pub cells: Vec<f64>,
    /// `tanh` of the cell states.
    pub cells_tanh: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SnrKind {
    Plain,
    ScaleInvariant,
}

pub(crate) struct SnrRecord {
    pub est: Var,
    pub kind: SnrKind,
    pub rows: usize,
    pub len: usize,
    pub eps: f64,
    pub reference: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    PointwiseLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
        fin: usize,
        fout: usize,
        cols: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        k: Var,
        stride: usize,
        n: usize,
        p: usize,
        l: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Prelu {
        x: Var,
        a: Var,
        channels: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        dims: Vec<usize>,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        outer: usize,
        inner: usize,
        dim: usize,
        start: usize,
        len: usize,
    },
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    ScatterMean {
        x: Var,
        dst: Vec<usize>,
        inv_count: Vec<f64>,
    },
    Sum(Var),
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    Lstm(Box<LstmRecord>),
    Snr(Box<SnrRecord>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::PointwiseLinear { .. } => "pointwise_linear",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Softmax { .. } => "softmax",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Prelu { .. } => "prelu",
            Op::Concat { .. } => "concat",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::ScatterMean { .. } => "scatter_mean",
            Op::Sum(_) => "sum",
            Op::Select { .. } => "select",
            Op::Lstm(_) => "lstm",
            Op::Snr(r) => match r.kind {
                SnrKind::Plain => "snr",
                SnrKind::ScaleInvariant => "si_snr",
            },
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } | Op::PointwiseLinear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Conv1d { x, k, .. } => vec![*x, *k],
            Op::Softmax { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterMean { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::Prelu { x, a, .. } => vec![*x, *a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Lstm(r) => vec![r.x, r.w_ih, r.w_hh, r.bias],
            Op::Snr(r) => vec![r.est],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// The tape. See the module docs.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients
    /// from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(id))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
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

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "variable {} does not belong to this graph",
                v.0
            )))
        }
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
