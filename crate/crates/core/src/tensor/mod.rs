//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Just enough machinery for the models in this crate: a 3-layer MLP, the
//! m-200-1 discriminators, and a small stride-1 convolutional path. Tensors
//! are 64-bit floats in row-major order. Each tensor produced by an operation
//! keeps a reference to that operation and its inputs, so calling
//! [`Tensor::backward`] on a scalar loss fills the `grad` buffer of every
//! reachable tensor with `d loss / d tensor`.
//!
//! Gradients accumulate additively: a tensor used twice in a graph receives
//! the sum of both contributions, and parameter leaves keep accumulating
//! across `backward` calls until [`Tensor::zero_grad`] (or an optimizer step)
//! clears them. Each graph is meant to be backpropagated once.
//!
//! Everything here is single-threaded by construction (`Rc`, not `Arc`);
//! independent training runs get independent graphs and may proceed on
//! separate threads with no shared state.

mod adam;
mod checkpoint;
pub(crate) mod ops;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ops::Op;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Smallest argument ever handed to a logarithm anywhere in the stack.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("optimizer state holds {expected} parameters, got {got}")]
    OptimizerMismatch { expected: usize, got: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Vec<f64>,
    pub(crate) op: Option<Op>,
    pub(crate) requires_grad: bool,
}

/// Dense n-dimensional tensor with a gradient slot and an autodiff node.
///
/// Cloning is shallow: clones share storage and gradients.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        let grad = vec![0.0; data.len()];
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad,
                op: None,
                requires_grad,
            })),
        })
    }

    /// Leaf tensor that does not take gradients (inputs, masks, constants).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        Self::from_parts(data, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        Self::from_parts(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(vec![0.0; n], shape, false).expect("consistent by construction")
    }

    /// Trainable tensor filled with zeros (bias init).
    pub fn zeros_param(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(vec![0.0; n], shape, true).expect("consistent by construction")
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![v], &[1], false).expect("consistent by construction")
    }

    /// Trainable tensor with i.i.d. N(0, std^2) entries.
    pub fn randn_param<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::from_parts(data, shape, true).expect("consistent by construction")
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: &[usize], op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(Tensor::requires_grad);
        let grad = vec![0.0; data.len()];
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad,
                // Constant subgraphs need no node; the result acts as a leaf.
                op: requires_grad.then_some(op),
                requires_grad,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the value buffer.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the gradient buffer.
    pub fn grad(&self) -> Vec<f64> {
        self.inner.borrow().grad.clone()
    }

    /// Read the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a scalar tensor.
    ///
    /// Panics if the tensor is not scalar; use only on known-scalar results.
    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert!(b.data.len() == 1, "item() on non-scalar shape {:?}", b.shape);
        b.data[0]
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grad.iter_mut() {
            *g = 0.0;
        }
    }

    /// Leaf copy of the current values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let b = self.inner.borrow();
        Tensor::from_parts(b.data.clone(), &b.shape, false).expect("consistent by construction")
    }

    /// In-place parameter update (optimizer use).
    pub(crate) fn apply_update(&self, f: impl FnOnce(&mut [f64], &mut [f64])) {
        let mut b = self.inner.borrow_mut();
        let Inner { data, grad, .. } = &mut *b;
        f(data, grad);
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds this tensor's gradient with 1 and propagates through every
    /// recorded operation in reverse topological order. Gradients of leaves
    /// add to whatever the buffers already hold.
    pub fn backward(&self) -> Result<(), TensorError> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar(self.shape()));
        }
        let order = self.topo_order();
        self.inner.borrow_mut().grad[0] = 1.0;
        for node in order.iter().rev() {
            let inner = node.inner.borrow();
            if let Some(op) = &inner.op {
                op.backward(&inner.grad, &inner.data);
            }
        }
        Ok(())
    }

    /// Post-order over the graph rooted here. Iterative so deep graphs
    /// (long training chains) cannot blow the stack.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner>> = HashSet::new();
        // (node, inputs already pushed?)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let inputs = match &node.inner.borrow().op {
                Some(op) => op.inputs(),
                None => Vec::new(),
            };
            stack.push((node, true));
            for input in inputs {
                if !visited.contains(&Rc::as_ptr(&input.inner)) {
                    stack.push((input, false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.inner.borrow();
        write!(f, "Tensor(shape={:?}", b.shape)?;
        if b.data.len() <= 8 {
            write!(f, ", data={:?}", b.data)?;
        }
        write!(f, ", grad={})", b.requires_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_checked_against_shape() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).is_ok());
    }

    #[test]
    fn grad_buffer_matches_data() {
        let t = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.grad().len(), t.data().len());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(t.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn sum_of_params_gives_unit_grads() {
        let w = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = w.sum();
        loss.backward().unwrap();
        assert_eq!(w.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_grads_are_two_w() {
        // loss = sum(w*w) at w=[1,2] -> grads [2,4]
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_across_backwards() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        w.sum().backward().unwrap();
        w.sum().backward().unwrap();
        assert_eq!(w.grad(), vec![2.0]);
        w.zero_grad();
        assert_eq!(w.grad(), vec![0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        let d = w.detach();
        assert!(!d.requires_grad());
        let loss = d.mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad(), vec![0.0]);
    }
}
