use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::dtype::{Dtype, Scalar};
use crate::error::{Error, Result};

/// Position of a recorded operation's output on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Cell<Option<NodeRef>>,
}

/// Dense row-major N-dimensional array. Cloning is cheap (shared storage).
///
/// Data is immutable for the lifetime of any computation graph that refers
/// to it; only the optimizer rewrites parameter data, between tapes. The
/// gradient buffer accumulates across `backward` calls until `zero_grad`.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            T::DTYPE,
            self.shape(),
            self.requires_grad()
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArg(format!(
            "zero-dim extent in shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidArg(format!(
            "shape {shape:?} implies {numel} elements, data has {len}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    /// Constant tensor; no gradient tracking.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// Leaf tensor with gradient tracking (a parameter or gradcheck input).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false)
    }

    /// Output of a recorded op; shape is trusted by construction.
    pub(crate) fn new_internal(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::build(shape, data, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar {
                numel: self.numel(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the data in place. Only valid between tapes (optimizer
    /// steps, checkpoint load, finite-difference perturbation).
    pub fn set_data(&self, new: &[T]) -> Result<()> {
        let mut d = self.inner.data.borrow_mut();
        if d.len() != new.len() {
            return Err(Error::InvalidArg(format!(
                "set_data: length {} != tensor numel {}",
                new.len(),
                d.len()
            )));
        }
        d.copy_from_slice(new);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, &b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_node(&self, node: NodeRef) {
        self.inner.node.set(Some(node));
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.inner.node.get()
    }

    /// True when both handles alias the same storage.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::from_vec(&[2, 0, 3], vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let p = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        p.accumulate_grad(&[1.0, 1.0, 1.0]);
        p.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(p.grad().unwrap(), vec![1.5, 1.5, 1.5]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn item_requires_scalar() {
        let x = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        assert!(matches!(x.item(), Err(Error::NotScalar { numel: 4 })));
    }
}
