//! Dense row-major tensors and the scalar abstraction shared by f32 training
//! and f64 gradient checking.

use super::BackendError;

/// Float scalar usable by the graph. Training runs `f32`; gradient checks may
/// instantiate the same graph in `f64`.
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional row-major array.
///
/// Integer-element tensors (`Tensor<i32>`, `Tensor<u8>`) can never carry a
/// gradient: the gradient accessors are only defined for `T: Real`, so the
/// invariant holds at compile time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, BackendError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(BackendError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat index for a `[N, C, H, W]` tensor.
    #[inline(always)]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// Flat index for a `[H, W]` tensor.
    #[inline(always)]
    pub fn idx2(&self, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        y * self.shape[1] + x
    }
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }
}

impl<F: Real> Tensor<F> {
    /// Marks the tensor as requiring gradients, allocating a zeroed gradient
    /// buffer of the same shape.
    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![F::zero(); self.data.len()]);
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Converts element type, preserving shape. Used to lift f32 parameters
    /// into an f64 graph for gradient checking.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0f32; 5]).unwrap_err();
        assert!(matches!(err, BackendError::LengthMismatch { len: 5, .. }));
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(!t.requires_grad());
        t.enable_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(3.5f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.len(), 1);
    }
}
