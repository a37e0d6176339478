//! Dense row-major f64 arrays plus the elementwise activations the layers use.
//!
//! Layout is row-major (last axis fastest) and fixed so that serialized
//! weights are unambiguous. Tensors are value-like: all operations here are
//! pure and safe to run from multiple threads on separate instances.

use serde::{Deserialize, Serialize};

/// Dense N-dimensional array of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Panics if `product(shape) != data.len()`; a mismatch is a programmer
    /// error, not a recoverable condition.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::new(vec![values.len()], values.to_vec())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of the same total length.
    pub fn reshaped(self, shape: Vec<usize>) -> Self {
        Self::new(shape, self.data)
    }

    /// Elementwise map; shape is preserved.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Elementwise max(0, x).
pub fn relu(t: &Tensor) -> Tensor {
    t.map(relu_scalar)
}

/// Elementwise derivative of [`relu`]: 1 where x > 0, else 0.
///
/// The value at exactly 0 is 0 (subgradient choice).
pub fn relu_grad(t: &Tensor) -> Tensor {
    t.map(relu_grad_scalar)
}

/// Elementwise logistic sigmoid, strictly inside (0, 1).
pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn relu_grad_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic sigmoid.
///
/// Computed as `1/(1+exp(-x))` for x >= 0 and `exp(x)/(1+exp(x))` otherwise,
/// then nudged off the closed endpoints so the result is strictly in (0, 1)
/// even deep in saturation.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0f64.next_down())
}

/// Derivative of the sigmoid at pre-activation `x`.
pub fn sigmoid_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_at_sign_boundaries() {
        let t = Tensor::from_slice(&[-1.0, 0.0, 3.0]);
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn relu_zero_fixed_point() {
        let t = Tensor::zeros(vec![2, 3]);
        assert_eq!(relu(&t), t);
    }

    #[test]
    fn relu_identity_on_positives() {
        let t = Tensor::from_slice(&[2.5]);
        assert_eq!(relu(&t).data(), &[2.5]);
    }

    #[test]
    fn relu_grad_definition() {
        let t = Tensor::from_slice(&[-1.0, 0.0, 3.0]);
        assert_eq!(relu_grad(&t).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_grad_all_negative() {
        let t = Tensor::from_slice(&[-5.0, -0.1, -1e-9]);
        assert_eq!(relu_grad(&t).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_grad_strictly_positive() {
        let t = Tensor::from_slice(&[1e-12]);
        assert_eq!(relu_grad(&t).data(), &[1.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn sigmoid_complement_identity() {
        for x in [-5.0, -1.0, 2.0] {
            let lhs = sigmoid_scalar(-x);
            let rhs = 1.0 - sigmoid_scalar(x);
            assert!((lhs - rhs).abs() < 1e-15, "x={x}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let v = sigmoid_scalar(100.0);
        assert!(v > 1.0 - 1e-12 && v < 1.0);
        let w = sigmoid_scalar(-700.0);
        assert!(w > 0.0 && w < 1e-300);
    }

    #[test]
    #[should_panic]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn elementwise_ops_preserve_shape(data in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let n = data.len();
            let t = Tensor::new(vec![n], data);
            let (r, g, s) = (relu(&t), relu_grad(&t), sigmoid(&t));
            prop_assert_eq!(r.shape(), t.shape());
            prop_assert_eq!(g.shape(), t.shape());
            prop_assert_eq!(s.shape(), t.shape());
        }

        #[test]
        fn relu_grad_matches_finite_difference(x in -10.0f64..10.0) {
            // Away from the kink the subgradient is the true derivative.
            prop_assume!(x.abs() > 1e-3);
            let h = 1e-6;
            let fd = (relu_scalar(x + h) - relu_scalar(x - h)) / (2.0 * h);
            prop_assert!((fd - relu_grad_scalar(x)).abs() < 1e-9);
        }

        #[test]
        fn sigmoid_is_monotone(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assume!(a < b);
            prop_assert!(sigmoid_scalar(a) < sigmoid_scalar(b));
        }

        #[test]
        fn sigmoid_stays_open_interval(x in -700.0f64..700.0) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
