//! Dense row-major tensors.
//!
//! Activations are rank-4 `[n, c, h, w]`; parameters keep whatever rank they
//! were declared with. This is intentionally a thin container: the heavy
//! kernels in `nn` operate on raw slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rank-4 dims as (n, c, h, w). Panics if the tensor is not rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn fill(&mut self, value: S) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: S) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// self += other, elementwise. Shapes must match.
    pub fn add_assign_t(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign_t shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Sum of squared differences against another tensor, accumulated in f64.
    pub fn sq_diff_sum(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "sq_diff_sum shape mismatch");
        let mut acc = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = a.to_f64() - b.to_f64();
            acc += d * d;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }

    pub fn clamp_in_place(&mut self, lo: S, hi: S) {
        for v in &mut self.data {
            *v = v.clamp_s(lo, hi);
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}
