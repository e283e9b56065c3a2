//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value. Operations on tensors that require
//! gradients record a [`Node`] holding the parents and a backward closure;
//! [`Tensor::backward`] walks the recorded graph in reverse topological order,
//! accumulates gradients into every reachable tensor that requires them, and
//! frees the graph.
//!
//! Reductions and matrix products accumulate in ascending index order so that
//! results are bitwise reproducible for a fixed input.

mod io;
mod kernels;
mod ops;
pub(crate) mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::scalar::Real;

pub use io::{read_tensors, write_tensors, TensorFileError, NamedTensor, TENSOR_MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: isize, rank: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in {op} input")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// Record of the operation that produced a tensor.
pub(crate) struct Node<T: Real> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: Arc<[T]>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Mutex<Option<Node<T>>>,
}

/// Shared handle to an immutable n-dimensional array.
pub struct Tensor<T: Real = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape);
        if self.numel() <= 16 {
            s.field("data", &&self.inner.data[..]);
        }
        s.field("requires_grad", &self.inner.requires_grad);
        if let Some(op) = self.op_name() {
            s.field("op", &op);
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<[T]>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: Mutex::new(node),
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::build(shape.to_vec(), data.into(), false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`backward`](Self::backward).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.requires_grad())
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v].into(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)].into(), false, None)
    }

    /// Returns a leaf sharing this tensor's data with gradient tracking enabled.
    pub fn requires_grad(self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), true, None)
    }

    /// Returns a constant leaf sharing this tensor's data.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), false, None)
    }

    /// Creates the output of a user-defined differentiable operation.
    ///
    /// `backward` receives the output gradient and the parents and must
    /// return one entry per parent (`None` where no gradient is needed).
    pub fn custom<F>(op: &'static str, shape: &[usize], data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Result<Self>
    where
        F: Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_op(op, shape.to_vec(), data, parents, backward))
    }

    /// Output of a recorded operation; the node is dropped when no parent needs gradients.
    pub(crate) fn from_op<F>(op: &'static str, shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        Self::from_op_shared(op, shape, data.into(), parents, backward)
    }

    pub(crate) fn from_op_shared<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Arc<[T]>,
        parents: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    pub(crate) fn shared_data(&self) -> Arc<[T]> {
        Arc::clone(&self.inner.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Name of the recording op, if this tensor still has a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.lock().expect("node lock").as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner.data, &other.inner.data)
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const () as usize
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients accumulate: calling `backward` on two losses built from the
    /// same leaves adds both contributions into the leaves' `grad`. The graph
    /// below the root is freed afterwards, so each recorded graph supports one
    /// sweep.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.inner.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.inner.node.lock().expect("node lock").take();
            if let Some(node) = node {
                let parent_grads = (node.backward)(&g, &node.parents);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.inner.requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "grad size from op {}", node.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            let mut slot = t.inner.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order DFS over tensors that require gradients.
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
            let parents: Vec<Tensor<T>> = t
                .inner
                .node
                .lock()
                .expect("node lock")
                .as_ref()
                .map(|n| n.parents.iter().filter(|p| p.inner.requires_grad).cloned().collect())
                .unwrap_or_default();
            stack.push((t, true));
            for p in parents.into_iter().rev() {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}
