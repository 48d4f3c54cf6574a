//! Dense `f32` tensor handle.
//!
//! A [`Tensor`] is a cheaply cloneable handle (`Arc`) onto an n-dimensional
//! row-major `f32` buffer. Values are written once by the operation that
//! produces the tensor and treated as immutable afterwards; the two sanctioned
//! exceptions are optimizer updates and checkpoint loading, which overwrite
//! *leaf* parameter tensors in place between training steps via
//! [`Tensor::write_data`].
//!
//! Trainable leaves additionally carry an optional gradient buffer which the
//! backward pass fills and the optimizer consumes.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    trainable: AtomicBool,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Handle to a dense row-major `f32` tensor. Cloning copies the handle, not
/// the buffer; two clones observe the same storage and the same identity.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    ///
    /// Rejects shape/data length disagreements and non-finite values: every
    /// successfully constructed tensor holds only finite numbers.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("tensor data contains non-finite values".into()));
        }
        Ok(Self::new_unchecked(shape.to_vec(), data))
    }

    /// Internal constructor for op outputs whose values were already validated.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                trainable: AtomicBool::new(false),
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    /// Unique identity of this tensor's storage (shared by handle clones).
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Read access to the value buffer.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.inner.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    /// Overwrites the value buffer in place (optimizer updates, checkpoint
    /// loading, batch-norm running statistics). Never called by tape ops.
    pub fn write_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut guard = self.inner.data.write().expect("tensor data lock poisoned");
        f(&mut guard);
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.trainable.store(trainable, Ordering::Relaxed);
    }

    /// Clone of the accumulated gradient, if a backward pass produced one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock poisoned").take()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Adds `delta` into the gradient buffer, creating it if absent.
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Copy of this tensor's values under a new shape with the same element
    /// count. The copy is a fresh tensor with its own identity.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape(),
                self.len(),
                shape,
                numel
            )));
        }
        Ok(Self::new_unchecked(shape.to_vec(), self.to_vec()))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("trainable", &self.trainable())
            .finish()
    }
}
