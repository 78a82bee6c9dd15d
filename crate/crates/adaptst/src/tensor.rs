use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient slot.
///
/// Handles are cheap to clone and share storage: the tape records handles to
/// operands and results, and `backward` accumulates into the shared grad
/// slots, so parameters referenced by both the model and the tape receive
/// their gradients without copying. Gradients sum across backward calls;
/// callers zero them between optimizer steps.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Inner<T>>>,
}

struct Inner<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                expected: "shape product equal to value count",
                got: shape,
            });
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values,
                grad: None,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values: vec![T::zero(); numel],
                grad: None,
            })),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: vec![],
                values: vec![v],
                grad: None,
            })),
        }
    }

    /// Seeded normal init. Samples in f64 before narrowing so f32 and f64
    /// models draw the same underlying sequence.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                values,
                grad: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.borrow().shape.is_empty()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::BadShape {
                op,
                expected: "2-D tensor",
                got: s,
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn values(&self) -> Vec<T> {
        self.inner.borrow().values.clone()
    }

    pub fn with_values<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        debug_assert!(inner.values.len() == 1);
        inner.values[0]
    }

    pub fn set_values(&self, values: Vec<T>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len(), "set_values numel mismatch");
        inner.values = values;
    }

    /// Mutate one element in place (finite-difference probes).
    pub fn nudge(&self, idx: usize, delta: T) {
        let mut inner = self.inner.borrow_mut();
        inner.values[idx] += delta;
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// grad += delta, allocating a zero grad slot on first use.
    pub fn accumulate_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.values.len();
        assert_eq!(n, delta.len(), "accumulate_grad numel mismatch");
        let grad = inner.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Read grad (or zeros when absent) without holding the borrow.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        let inner = self.inner.borrow();
        match &inner.grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); inner.values.len()],
        }
    }

    /// Apply an optimizer update reading values and grad together.
    /// Returns false (and does nothing) when no grad is set.
    pub fn update(&self, f: impl FnOnce(&mut [T], &[T])) -> bool {
        let mut inner = self.inner.borrow_mut();
        let Inner { values, grad, .. } = &mut *inner;
        match grad {
            Some(g) => {
                f(values, g);
                true
            }
            None => false,
        }
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Narrow to f32 for checkpoint payloads.
    pub fn values_f32(&self) -> Vec<f32> {
        self.inner.borrow().values.iter().map(|v| v.as_f32()).collect()
    }

    pub fn load_f32(&self, values: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len(), "load_f32 numel mismatch");
        inner.values = values.iter().map(|&v| T::from_f32(v)).collect();
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("has_grad", &inner.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_and_zeros() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.5, 1.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn handles_share_storage() {
        let a = Tensor::<f32>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = a.clone();
        b.accumulate_grad(&[1.0, 1.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert!(a.ptr_eq(&b));
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::<f64>::scalar(4.0);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.0);
    }
}
