//! Dense N-d tensors with reverse-mode automatic differentiation.
//!
//! Every value flowing through the network is a [`Tensor`]: a contiguous
//! row-major buffer plus a shape. Ops build a DAG of nodes; calling
//! [`Tensor::backward`] on a scalar loss walks that graph in reverse
//! topological order (see [`Tape`]) and accumulates gradients into every
//! reachable leaf that was created with `requires_grad`.
//!
//! The element type is generic: `f64` for gradient checking (central finite
//! differences are unreliable in single precision), `f32` for training.

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

mod conv;
mod norm;
mod ops;
mod shape;

pub use conv::{bilinear_upsample2x, conv2d, im2col, maxpool2x2};
pub use norm::{bce_with_logits, layer_norm, softmax};
pub use shape::{broadcast_shapes, concat};

use crate::error::TensorError;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + std::iter::Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Convert an `f64` constant into the element type.
#[inline]
pub fn c<E: Element>(x: f64) -> E {
    E::from_f64(x).expect("constant not representable in element type")
}

/// Widen an element to `f64` (for reporting and oracles).
#[inline]
pub fn fl<E: Element>(x: E) -> f64 {
    x.to_f64().expect("element not representable as f64")
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient function of a recorded op: given the upstream gradient and the
/// op's own output data, return one gradient contribution per parent
/// (`None` for parents that do not need a gradient).
pub(crate) type GradFn<E> = Box<dyn Fn(&[E], &[E]) -> Vec<Option<Vec<E>>>>;

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    grad_fn: Option<GradFn<E>>,
}

/// A shared handle to a tensor node. Cloning is cheap and aliases the same
/// buffer; tensors are immutable after construction except for gradient
/// accumulation and explicit optimizer updates between passes.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_len<E: Element>(data: &[E], shape: &[usize]) -> Result<(), TensorError> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(TensorError::InvalidShape {
            op: "new",
            msg: format!("data length {} does not match shape {:?} (numel {})", data.len(), shape, numel),
        });
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    fn from_parts(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        grad_fn: Option<GradFn<E>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                grad_fn,
            }),
        }
    }

    /// Leaf tensor that does not take gradients.
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(&data, shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), true, Vec::new(), None))
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![v], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(vec![v; numel], shape.to_vec(), false, Vec::new(), None)
    }

    /// Interior node produced by an op. Skips recording when no parent
    /// requires a gradient, so inference builds no graph behind constants.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        grad_fn: GradFn<E>,
    ) -> Self {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Self::from_parts(data, shape, true, parents, Some(grad_fn))
        } else {
            Self::from_parts(data, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// Borrow the underlying buffer.
    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutably borrow the buffer. Intended for optimizer updates between
    /// passes; mutating a tensor referenced by a live graph invalidates any
    /// gradients later computed through it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replace the buffer contents (shape-checked). Optimizer use only.
    pub fn set_data(&self, data: Vec<E>) -> Result<(), TensorError> {
        check_len(&data, &self.inner.shape)?;
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Leaf copy of this tensor's current values, detached from the graph.
    pub fn detached(&self) -> Tensor<E> {
        Self::from_parts(self.to_vec(), self.inner.shape.to_vec(), false, Vec::new(), None)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every `requires_grad` leaf reachable from this node; interior node
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.inner.shape.clone() });
        }
        let tape = Tape::from_root(self);
        self.accumulate_grad(&[E::one()]);
        for node in tape.nodes() {
            let Some(grad_fn) = node.inner.grad_fn.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let grad = {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let contribs = {
                let out = node.inner.data.borrow();
                grad_fn(&grad, &out)
            };
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                if let Some(cg) = contrib {
                    if parent.inner.requires_grad {
                        parent.accumulate_grad(&cg);
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// The ordered record of ops reachable from a loss node, in reverse
/// topological order. Node ids increase monotonically at creation time, so
/// descending id order is a valid reverse topological order of the DAG.
pub struct Tape<E: Element> {
    nodes: Vec<Tensor<E>>,
}

impl<E: Element> Tape<E> {
    pub fn from_root(root: &Tensor<E>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        Tape { nodes }
    }

    pub fn nodes(&self) -> &[Tensor<E>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

// ── Random initialization ────────────────────────────────────────────

use rand::Rng;

impl<E: Element> Tensor<E> {
    /// Gaussian-initialized parameter (mean 0).
    pub fn param_randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| c::<E>(rng.sample(dist))).collect();
        Self::from_parts(data, shape.to_vec(), true, Vec::new(), None)
    }

    /// Kaiming-uniform parameter: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn param_kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| c::<E>(rng.gen_range(-bound..bound))).collect();
        Self::from_parts(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn param_zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(vec![E::zero(); numel], shape.to_vec(), true, Vec::new(), None)
    }
}
