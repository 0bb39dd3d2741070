//! Minimal N-d tensor with reverse-mode differentiation.
//!
//! Covers exactly what the separator and the silent-source detector need:
//! 1-d/2-d convolutions and the 1-d transposed convolution, GLU, elementwise
//! activations, a fused bidirectional LSTM with hand-written
//! backpropagation-through-time, max-pooling, batch normalization, dropout,
//! the loss heads, Adam, and weight rescaling.
//!
//! Tensors are reference-counted nodes of a dynamically built backward graph.
//! Calling [`backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them. A graph is single-threaded; compute kernels may still
//! fan work out internally (see [`kernels`]), with a per-output-element
//! arithmetic order that does not depend on thread count.
//!
//! Storage is `f32` by default; every operation is generic over [`Scalar`]
//! so gradient tests can run the identical graph in `f64` shadow precision.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod kernels;
mod lstm;
mod ops;
mod param;

pub use adam::Adam;
pub use checkpoint::{read_container, write_container, ParamRecord, CONTAINER_MAGIC};
pub use conv::{conv1d, conv2d, conv_transpose1d, maxpool2d};
pub use lstm::{bilstm_forward, BiLstm, LstmLayerParams};
pub use ops::{batchnorm2d, bce_with_logits_loss, concat, dropout, glu, l1_loss, mse_loss, BatchNorm};
pub use param::{he_init, rescale_param, Param};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor: `f32` for real work, `f64` for shadow-precision
/// gradient verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + 'static
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, other: Self) -> Self {
                self.max(other)
            }
            fn min(self, other: Self) -> Self {
                self.min(other)
            }
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
    static GRAD_ENABLED: RefCell<bool> = const { RefCell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut c = c.borrow_mut();
        *c += 1;
        *c
    })
}

/// Run `f` without recording backward nodes (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| std::mem::replace(&mut *g.borrow_mut(), false));
    let out = f();
    GRAD_ENABLED.with(|g| *g.borrow_mut() = prev);
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| *g.borrow())
}

/// Arguments handed to a node's gradient rule.
pub(crate) struct BwdArgs<'a, S: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [S],
    /// The node's forward output values.
    pub out: &'a [S],
    /// Parent tensors, in the order given at construction.
    pub parents: &'a [Tensor<S>],
    /// Gradient accumulator: `sink(i, f)` lets the rule add into parent i's
    /// local gradient buffer.
    pub sink: &'a mut dyn FnMut(usize, &mut dyn FnMut(&mut [S])),
}

type BwdFn<S> = Box<dyn Fn(&mut BwdArgs<'_, S>)>;

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    rule: BwdFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    node: Option<Node<S>>,
}

/// N-dimensional array of [`Scalar`]s participating in a backward graph.
/// Cloning is cheap (shared reference).
pub struct Tensor<S: Scalar = f32> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<S: Scalar> Tensor<S> {
    fn build(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, node: Option<Node<S>>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} does not match {} elements", data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor (not tracked by the graph).
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Trainable leaf: participates in gradient accumulation.
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Self {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![S::ZERO; shape.iter().product()])
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(&[], vec![v])
    }

    /// Result of an operation; records a backward node when gradients are
    /// enabled and some parent requires them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        rule: impl Fn(&mut BwdArgs<'_, S>) + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Self::build(shape, data, true, Some(Node { parents, rule: Box::new(rule) }))
        } else {
            Self::build(shape, data, false, None)
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
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the forward values.
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    /// Copy the forward values out.
    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the stored values (optimizer updates, test perturbations).
    pub fn set_data(&self, new: &[S]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    /// Apply `f` to the stored values in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> S {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[S]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }
}

/// Gradient-pass statistics; `nodes_visited` counts backward rules invoked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub nodes_visited: usize,
}

/// Propagate d`loss`/dx into every tensor reachable from `loss` that requires
/// gradients. Each graph node's rule runs exactly once; repeated calls
/// accumulate (a second backward doubles the stored gradients).
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<BackwardStats> {
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.inner.requires_grad {
        return Ok(BackwardStats { nodes_visited: 0 });
    }

    // reverse topological order by iterative postorder DFS
    let mut order: Vec<Tensor<S>> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Tensor<S>, usize)> = vec![(loss.clone(), 0)];
    while let Some((t, child_idx)) = stack.pop() {
        if child_idx == 0 {
            if visited.contains_key(&t.inner.id) {
                continue;
            }
            visited.insert(t.inner.id, ());
        }
        let nparents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
        if child_idx < nparents {
            let parent = t.inner.node.as_ref().unwrap().parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if !visited.contains_key(&parent.inner.id) && parent.inner.requires_grad {
                stack.push((parent, 0));
            }
        } else {
            order.push(t);
        }
    }

    // local gradient buffers, keyed by node id
    let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
    grads.insert(loss.inner.id, vec![S::ONE]);

    let mut visited_rules = 0usize;
    for t in order.iter().rev() {
        let Some(grad) = grads.remove(&t.inner.id) else { continue };
        if let Some(node) = t.inner.node.as_ref() {
            visited_rules += 1;
            let out = t.inner.data.borrow();
            let parents = &node.parents;
            let mut sink = |i: usize, add: &mut dyn FnMut(&mut [S])| {
                let p = &parents[i];
                if !p.inner.requires_grad {
                    return;
                }
                let buf = grads
                    .entry(p.inner.id)
                    .or_insert_with(|| vec![S::ZERO; p.inner.data.borrow().len()]);
                add(buf);
            };
            let mut args = BwdArgs { grad: &grad, out: &out, parents, sink: &mut sink };
            (node.rule)(&mut args);
        }
        t.accumulate_grad(&grad);
    }
    Ok(BackwardStats { nodes_visited: visited_rules })
}

impl<S: Scalar> Tensor<S> {
    /// Convenience method form of [`backward`].
    pub fn backward(&self) -> Result<BackwardStats> {
        backward(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_gradient() {
        // loss = sum(w * x) => dloss/dw = x
        let w = Tensor::<f32>::leaf(&[3], vec![1.0, 2.0, 3.0]);
        let x = Tensor::<f32>::from_vec(&[3], vec![4.0, 5.0, 6.0]);
        let loss = w.mul(&x).sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn repeated_backward_doubles_grads() {
        let w = Tensor::<f32>::leaf(&[2], vec![1.0, -1.0]);
        let loss = w.mul(&w).sum_all();
        loss.backward().unwrap();
        let g1 = w.grad().unwrap();
        loss.backward().unwrap();
        let g2 = w.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let w = Tensor::<f32>::leaf(&[2], vec![1.0, 2.0]);
        assert!(matches!(w.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn dag_nodes_visited_once() {
        // diamond: y = a + a, z = y * y, each op node must fire exactly once
        let a = Tensor::<f32>::leaf(&[1], vec![3.0]);
        let y = a.add(&a);
        let z = y.mul(&y).sum_all();
        let stats = z.backward().unwrap();
        assert_eq!(stats.nodes_visited, 3); // add, mul, sum
        assert_eq!(a.grad().unwrap()[0], 24.0); // z = 4a^2, dz/da = 8a
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::<f32>::leaf(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| w.mul(&w).sum_all());
        assert!(!y.requires_grad());
        assert_eq!(y.backward().unwrap().nodes_visited, 0);
        assert!(w.grad().is_none());
    }
}
