//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! creation order, which is also a topological order. [`Tape::backward`]
//! walks the records in exact reverse and accumulates plain numeric
//! gradients into leaves. [`Tape::grad_of_grad`] instead expresses the
//! gradient itself as new tape records, so a later `backward` can
//! differentiate through it; only a closed subset of ops supports that.

mod backward;
pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{Planes, Window};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Abs,
    Pow(f64),
    Sqrt,
    /// `0.5 / y` for `y > 0`, else 0: the sqrt derivative with the
    /// zero-norm subgradient pinned to 0.
    HalfRecip,
    Exp,
    Sum,
    SumAxis(usize),
    Conv2d(Window),
    ConvInputGrad(Window, Planes),
    ConvWeightGrad(Window),
    MaxPool(Rc<Vec<usize>>),
    Linear,
    MatMul,
    Transpose,
    Reshape,
    Softmax(usize),
    Upsample2x,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Replicate { height: usize, width: usize },
    ChannelSum,
    ChannelAffine,
    MaskNorm { invalid: Rc<Vec<bool>>, inv_std: Rc<Vec<f64>> },
    Embedding(Rc<Vec<usize>>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Pow(_) => "pow",
            Op::Sqrt => "sqrt",
            Op::HalfRecip => "half_recip",
            Op::Exp => "exp",
            Op::Sum => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::Conv2d(_) => "conv2d",
            Op::ConvInputGrad(..) => "conv2d_input_grad",
            Op::ConvWeightGrad(_) => "conv2d_weight_grad",
            Op::MaxPool(_) => "max_pool2d",
            Op::Linear => "linear",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Softmax(_) => "softmax",
            Op::Upsample2x => "upsample_nearest2x",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Replicate { .. } => "spatial_replicate",
            Op::ChannelSum => "channel_sum",
            Op::ChannelAffine => "channel_affine",
            Op::MaskNorm { .. } => "mask_normalize",
            Op::Embedding(_) => "embedding",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Rc<Tensor>>>,
    backward_done: bool,
}

/// Ordered record of primitive operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input. Gradients are collected only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the last `backward` with respect to a leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        inner.grads.get(var.id).and_then(|g| g.as_ref()).map(|g| (**g).clone())
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_done = false;
    }

    /// Plain-text listing, one record per line, for diffing two runs.
    pub fn dump(&self) -> String {
        let inner = self.inner.borrow();
        let mut out = String::new();
        for (id, node) in inner.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{id}\t{}\tinputs={:?}\tshape={:?}{}",
                node.op.name(),
                node.inputs,
                node.value.shape(),
                if node.requires_grad { "\tgrad" } else { "" }
            );
        }
        out
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, leaf_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = if inputs.is_empty() {
            leaf_grad
        } else {
            inputs.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        inner.nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Copy of the value as a new constant leaf; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("vars belong to different tapes".into()))
        }
    }
}
