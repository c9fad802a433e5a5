use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where the cached input was strictly positive. The
/// subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, cached_input: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(cached_input, |g, x| if x > T::zero() { g } else { T::zero() })
}

pub fn tanh_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.tanh())
}

/// Backward pass of tanh expressed through the cached forward output.
pub fn tanh_backward<T: Scalar>(upstream: &Tensor<T>, cached_output: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(cached_output, |g, y| g * (T::one() - y * y))
}
