//! Hand-differentiated layer primitives.
//!
//! Every primitive exists as a pair of pure functions (`*_forward` /
//! `*_backward`) plus, where it owns weights, a layer struct that holds
//! [`Parameter`]s and accumulates gradients into them.

mod activation;
mod batchnorm;
mod conv;
mod init;
mod linear;
mod loss;

pub use activation::{relu_backward, relu_forward, tanh_backward, tanh_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d};
pub use init::xavier_init;
pub use linear::{linear_backward, linear_forward, Linear};
pub use loss::l2_loss;

use crate::tensor::{Scalar, Shape, Tensor};

/// Whether batch normalization uses batch statistics (and updates the
/// running averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Receives the L2 weight penalty during optimization.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape, decay: bool) -> Self {
        Self::new(name, Tensor::zeros(shape), decay)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (acc, &v) in self.grad.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }
}
