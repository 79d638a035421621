//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes at least one tensor with `requires_grad`
//! records itself (its kind, its inputs and a vector-Jacobian closure) on the
//! result. [`Tensor::backward`] walks that record in reverse topological order
//! and accumulates gradients into each reachable node. Operations whose inputs
//! are all constants record nothing, which is also how [`Tensor::detach`] cuts
//! the graph.

mod gemm;
mod ops;
mod optim;

pub use optim::{clip_scale, global_grad_norm, poly_lr, sgd_step, sgd_step_scaled, Parameter};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Kind of the operation that produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    AddBroadcast,
    MatMul,
    Conv2d,
    Relu,
    Sigmoid,
    Softmax,
    Mean,
    Sum,
    Concat,
    Reshape,
    Transpose,
    ScalarMul,
    AddScalar,
    Log,
    ClampMin,
    CosineSimilarity,
    GatherRows,
    AvgPool2d,
}

/// Vector-Jacobian product: given the output gradient and a mask of which
/// inputs need a gradient, returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct OpRecord {
    kind: OpKind,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<OpRecord>,
}

/// A node in the differentiation graph. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_kind())
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor. Fails if `product(shape) != data.len()` or a dim is zero.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), Arc::new(data), requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive dims")
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![1], Arc::new(vec![v]), false, None)
    }

    fn raw(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Option<OpRecord>) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Builds an op result, recording the producer only if some input needs
    /// gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: impl Into<Arc<Vec<f64>>>,
        kind: OpKind,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let data = data.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| OpRecord { kind, inputs, backward });
        Self::raw(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape()))),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.op.as_ref().map(|op| op.kind)
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Same values, no producer, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.data_arc(), false, None)
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Nodes reachable through recorded ops, in topological order (inputs
    /// before consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for inp in op.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Populates `grad` of every reachable tensor with `requires_grad`, with
    /// d(self)/d(tensor). `self` must hold exactly one value.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let needs: Vec<bool> = op.inputs.iter().map(Tensor::requires_grad).collect();
                let input_grads = (op.backward)(&g, &needs);
                debug_assert_eq!(input_grads.len(), op.inputs.len());
                for ((inp, ig), need) in op.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(ig), true) = (ig, need) else {
                        continue;
                    };
                    debug_assert_eq!(ig.len(), inp.numel(), "{:?}", op.kind);
                    match pending.get_mut(&inp.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(inp.id(), ig);
                        }
                    }
                }
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }
}
