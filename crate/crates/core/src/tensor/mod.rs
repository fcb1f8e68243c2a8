//! Minimal dense tensor with reverse-mode differentiation.
//!
//! Tensors are contiguous row-major buffers with a shape, an optional
//! gradient buffer and a flag marking them as differentiation leaves.
//! Forward operators record the graph implicitly: every non-leaf tensor
//! holds the [`Op`] that produced it together with handles to its inputs,
//! so a backward pass is a reverse topological walk from the loss.
//!
//! Training runs in `f32`; gradient checking instantiates the same code in
//! `f64` (see [`gradcheck`]). Operators are pure functions of their inputs
//! (batch-norm running statistics being the one documented exception) and
//! parallelize internally only over disjoint output slices, so results are
//! bitwise identical regardless of thread count.

mod backward;
pub mod gradcheck;
mod ops;

pub(crate) use backward::{CustomGrad, Op};
pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport};
pub use ops::Activation;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use num_traits::Float;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum<Self> + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Errors raised by tensor constructors and operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Element count does not match the product of the extents.
    DataLength { shape: Vec<usize>, len: usize },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operator received arguments outside its domain.
    InvalidArgument { op: &'static str, detail: String },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarBackward { numel: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { shape, len } => {
                write!(f, "data of length {len} does not fill shape {shape:?}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape {left:?} is incompatible with {right:?}")
            }
            TensorError::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonScalarBackward { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque tensor identity used by the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

struct TensorInner<E: Element> {
    id: TensorId,
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    grad: RwLock<Option<Vec<E>>>,
    requires_grad: bool,
    op: Option<Op<E>>,
}

/// Dense N-dimensional value array with optional gradient tracking.
///
/// Cloning a `Tensor` is cheap: it copies a shared handle, not the data.
/// The layout convention for images is batch x channels x height x width.
pub struct Tensor<E: Element = f32> {
    inner: Arc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id.0)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with operator recording disabled on this thread.
///
/// Inference paths use this to keep forward passes from retaining the graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl<E: Element> Tensor<E> {
    fn make(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Leaf tensor that does not take part in differentiation.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self::make(shape, data, false, None))
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self::make(shape, data, true, None))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::make(shape, vec![E::zero(); numel], false, None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::make(shape, vec![value; numel], false, None)
    }

    pub fn scalar(value: E) -> Self {
        Self::make(vec![], vec![value], false, None)
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Self {
        let requires = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if requires {
            Self::make(shape, data, true, Some(op))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.inner.op.as_ref()
    }

    pub(crate) fn read(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.inner.data.read().unwrap()
    }

    pub fn clone_data(&self) -> Vec<E> {
        self.read().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.read()[0]
    }

    /// Mutates the raw buffer in place (optimizer steps, running statistics).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        let mut guard = self.inner.data.write().unwrap();
        f(&mut guard);
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut guard = self.inner.grad.write().unwrap();
        match guard.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b = *b + *v;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Detached copy: same values, fresh leaf, no gradient tracking.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::make(self.inner.shape.clone(), self.clone_data(), false, None)
    }

    /// All elements finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.read().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_len() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(!t.requires_grad());
    }

    #[test]
    fn param_accumulates_grad() {
        let p = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[0.5, 0.5]);
        p.accumulate_grad(&[1.0, 0.0]);
        assert_eq!(p.grad().unwrap(), vec![1.5, 0.5]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let a = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let inside = no_grad(|| a.relu().unwrap());
        assert!(!inside.requires_grad());
        let outside = a.relu().unwrap();
        assert!(outside.requires_grad());
    }
}
