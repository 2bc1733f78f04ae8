//! Dense `f64` tensors with dynamic reverse-mode differentiation.
//!
//! Every differentiable operation records its parents and a pullback closure
//! on the output node. [`Tensor::backward`] walks the recorded graph in
//! reverse topological order and accumulates gradients into the leaves that
//! were created with `requires_grad`. Values are row-major `ndarray` arrays in
//! standard layout; 5-D activations use the axis order `N, C, T, H, W`.

mod conv;
pub mod gradcheck;
mod nn;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use conv::{Conv3dSpec, MacTally};
pub use nn::BatchNormMode;

/// Value storage for tensors and gradients.
pub type Array = ArrayD<f64>;

type Pullback = Box<dyn Fn(&Array, &[Tensor]) -> Vec<Option<Array>>>;

struct Node {
    value: RefCell<Array>,
    grad: RefCell<Option<Array>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    pullback: Option<Pullback>,
}

/// Reference-counted handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CORRUPT_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording while alive.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Runs subsequent operations without recording pullbacks until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Test hook: when set, `backward` seeds the loss gradient with 1.01 instead
/// of 1, so every analytic gradient is off by one percent.
#[doc(hidden)]
pub fn set_corrupt_backward(on: bool) {
    CORRUPT_BACKWARD.with(|c| c.set(on));
}

impl Tensor {
    /// Constant tensor (never receives a gradient).
    pub fn new(value: Array) -> Tensor {
        Tensor::leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(value: Array) -> Tensor {
        Tensor::leaf(value, true)
    }

    fn leaf(value: Array, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            value: RefCell::new(standard(value)),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            pullback: None,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        let value = Array::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::shape(e.to_string()))?;
        Ok(Tensor::new(value))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(Array::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::new(Array::ones(IxDyn(shape)))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(Array::from_elem(IxDyn(&[]), v))
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        Tensor::new(Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi)))
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
        Tensor::new(Array::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng)))
    }

    /// Records an operation result. The pullback is dropped when recording is
    /// disabled or no parent needs a gradient.
    pub(crate) fn from_op(value: Array, parents: Vec<Tensor>, pullback: Pullback) -> Tensor {
        let requires_grad = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let (parents, pullback) = if requires_grad {
            (parents, Some(pullback))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            value: RefCell::new(standard(value)),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            pullback,
        }))
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.pullback.is_none()
    }

    pub fn value(&self) -> Ref<'_, Array> {
        self.0.value.borrow()
    }

    /// Mutable access to the stored values. Intended for optimizers,
    /// checkpoint loading and finite-difference probes on leaves.
    pub fn value_mut(&self) -> RefMut<'_, Array> {
        self.0.value.borrow_mut()
    }

    pub fn to_array(&self) -> Array {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.value().ndim()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor with shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().iter().copied().collect()
    }

    pub fn grad(&self) -> Option<Array> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_array())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a scalar loss. Gradients accumulate into the
    /// `grad` buffers of reachable leaves; callers zero them between steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let seed = if CORRUPT_BACKWARD.with(|c| c.get()) { 1.01 } else { 1.0 };
        let mut pending: HashMap<usize, Array> = HashMap::new();
        pending.insert(self.key(), Array::from_elem(self.value().raw_dim(), seed));

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.pullback {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => *acc += &grad,
                        None => *slot = Some(grad),
                    }
                }
                Some(pullback) => {
                    let parent_grads = pullback(&grad, &node.0.parents);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        let g = standard(g);
                        debug_assert_eq!(g.shape(), parent.value().shape());
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => *acc += &g,
                            None => {
                                pending.insert(parent.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients (parents first).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in &node.0.parents {
                if parent.requires_grad() && !visited.contains(&parent.key()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Checks that `axis` is valid for a tensor of rank `ndim`.
pub(crate) fn check_axis(axis: usize, ndim: usize, op: &str) -> Result<()> {
    if axis >= ndim {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for rank {ndim}")));
    }
    Ok(())
}
