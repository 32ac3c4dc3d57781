//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a handle (cheap to clone) onto a graph node holding
//! row-major contiguous data, an optional gradient accumulator, and the
//! operation that produced it. Calling [`Tensor::backward`] on a scalar
//! walks the graph once in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them.
//!
//! Forward and backward on one graph are single-threaded at the graph
//! level; individual kernels may fan out over rayon (see [`crate::exec`])
//! while staying bitwise deterministic. Distinct graphs can live on
//! distinct threads.

mod backward;
pub(crate) mod kernels;
pub(crate) mod ops;

pub use ops::DropoutMode;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

/// The operation that produced a tensor, holding the parent handles and
/// whatever the backward pass needs.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Binary {
        a: Tensor<T>,
        b: Tensor<T>,
        kind: BinaryKind,
    },
    /// y = a * mul + add
    Affine {
        a: Tensor<T>,
        mul: T,
    },
    Unary {
        a: Tensor<T>,
        kind: UnaryKind,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Softmax {
        a: Tensor<T>,
        axis: usize,
    },
    /// Population standard deviation over all non-batch axes.
    StdAll {
        a: Tensor<T>,
        batch_axes: Vec<usize>,
    },
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
    },
    AvgPool2d {
        x: Tensor<T>,
        kernel: usize,
        stride: usize,
    },
    ReduceMean {
        a: Tensor<T>,
        axes: Vec<usize>,
    },
    SumAll {
        a: Tensor<T>,
    },
    Reshape {
        a: Tensor<T>,
    },
    Permute {
        a: Tensor<T>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
    },
    Dropout {
        a: Tensor<T>,
        mask: Vec<T>,
    },
    PixelShuffle {
        a: Tensor<T>,
        factor: usize,
    },
    PixelUnshuffle {
        a: Tensor<T>,
        factor: usize,
    },
    ChannelShuffle {
        a: Tensor<T>,
        groups: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
}

pub(crate) struct Node<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: AtomicBool,
    grad: RwLock<Option<Vec<T>>>,
    op: Op<T>,
}

/// Handle onto a graph node. Cloning shares the node.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={}, grad={})",
            self.id(),
            self.shape(),
            T::DTYPE,
            self.requires_grad()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad: AtomicBool::new(requires_grad),
                grad: RwLock::new(None),
                op,
            }),
        }
    }

    /// New leaf tensor owning `data` interpreted row-major with `shape`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                msg: format!("shape holds {} elements, data holds {}", numel, data.len()),
            });
        }
        Ok(Self::from_op(shape.to_vec(), data, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_op(shape.to_vec(), vec![T::ZERO; numel], Op::Leaf)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_op(shape.to_vec(), vec![value; numel], Op::Leaf)
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Self {
        Self::from_op(vec![], vec![value], Op::Leaf)
    }

    /// Mark a leaf as requiring gradient accumulation; consumes and
    /// returns the handle for builder-style use.
    pub fn with_grad(self) -> Result<Self> {
        self.set_requires_grad(true)?;
        Ok(self)
    }

    /// Toggle gradient tracking on a leaf (parameters being frozen or
    /// thawed). Interior nodes would invalidate already-built graphs, so
    /// only leaves may be flipped.
    pub fn set_requires_grad(&self, on: bool) -> Result<()> {
        if !matches!(self.node.op, Op::Leaf) {
            return Err(Error::Contract(
                "requires_grad can only be toggled on leaf tensors".into(),
            ));
        }
        self.node.requires_grad.store(on, Ordering::Relaxed);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.load(Ordering::Relaxed)
    }

    pub(crate) fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub(crate) fn data_ref(&self) -> parking_lot::RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.read().clone()
    }

    /// Extract the single value of a one-element tensor.
    pub fn to_scalar(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "to_scalar on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data.read()[0])
    }

    /// Replace a leaf's data in place (optimizer updates). Length must match.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if !matches!(self.node.op, Op::Leaf) {
            return Err(Error::Contract("set_data only on leaf tensors".into()));
        }
        if data.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "set_data",
                shape: self.shape().to_vec(),
                msg: format!("replacement has {} elements", data.len()),
            });
        }
        *self.node.data.write() = data;
        Ok(())
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.read().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.write() = None;
    }

    /// Copy of the data as a fresh leaf outside the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_op(self.shape().to_vec(), self.to_vec(), Op::Leaf)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut lock = self.node.grad.write();
        match &mut *lock {
            Some(v) => {
                for (a, b) in v.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => *lock = Some(g.to_vec()),
        }
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        self.node.op.parents()
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively into every requires-grad tensor reachable through
    /// differentiable edges; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::ONE]);
        for t in order.iter().rev() {
            let g = match grads.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            t.accumulate_grad(&g);
            t.node.op.backward(t, &g, &mut grads)?;
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph; parents precede children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![a.clone(), b.clone()],
            Op::Affine { a, .. }
            | Op::Unary { a, .. }
            | Op::Softmax { a, .. }
            | Op::StdAll { a, .. }
            | Op::ReduceMean { a, .. }
            | Op::SumAll { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Dropout { a, .. }
            | Op::PixelShuffle { a, .. }
            | Op::PixelUnshuffle { a, .. }
            | Op::ChannelShuffle { a, .. } => vec![a.clone()],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::AvgPool2d { x, .. } => vec![x.clone()],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

/// Add a gradient contribution for `t` into the sweep's accumulator,
/// skipping tensors outside the requires-grad subgraph.
pub(crate) fn add_grad<T: Scalar>(
    grads: &mut HashMap<usize, Vec<T>>,
    t: &Tensor<T>,
    g: Vec<T>,
) {
    if !t.requires_grad() {
        return;
    }
    debug_assert_eq!(g.len(), t.numel());
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                *a = *a + *b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::from_vec(vec![1.0f32, 2.0], &[3]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap().with_grad().unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::from_vec(vec![1.0f64, -2.0, 3.0, 0.5], &[2, 2])
            .unwrap()
            .with_grad()
            .unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3])
            .unwrap()
            .with_grad()
            .unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3])
            .unwrap()
            .with_grad()
            .unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0, 12.0]);
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let x = Tensor::from_vec(vec![2.0f64], &[1]).unwrap().with_grad().unwrap();
        let d = x.mul(&x).unwrap().detach();
        let loss = d.mul(&d).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn set_requires_grad_rejected_on_interior_nodes() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(y.set_requires_grad(true).is_err());
    }
}
