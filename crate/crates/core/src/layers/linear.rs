//! Fully connected layer on flattened batch items.

use rand::Rng;

use super::{init::xavier_init, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [out, inp, kh, kw] = weights.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "linear weights must be (out, in, 1, 1), got {:?}",
            weights.shape()
        )));
    }
    if input.item_len() != inp {
        return Err(Error::shape(format!(
            "input items have {} features, weights expect {inp}",
            input.item_len()
        )));
    }
    Ok((input.batch(), inp, out))
}

/// `y = W x + b` for every batch item; the input is flattened per item and
/// the output has shape (batch, out, 1, 1).
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (n, inp, out) = check(input, weights)?;
    let mut y = Tensor::zeros([n, out, 1, 1]);
    let beta = match bias {
        Some(b) => {
            if b.len() != out {
                return Err(Error::shape(format!("bias has {} entries for {out} outputs", b.len())));
            }
            for row in y.data_mut().chunks_exact_mut(out) {
                row.copy_from_slice(b);
            }
            T::one()
        }
        None => T::zero(),
    };
    T::gemm(false, true, n, out, inp, T::one(), input.data(), weights.data(), beta, y.data_mut());
    Ok(y)
}

/// Returns (input grad shaped like `cached_input`, weight grad, bias grad).
pub fn linear_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let mut wg = Tensor::zeros(weights.shape());
    let mut bg = vec![T::zero(); weights.shape()[0]];
    let xg = linear_backward_into(upstream, cached_input, weights, wg.data_mut(), &mut bg)?;
    Ok((xg, wg, bg))
}

fn linear_backward_into<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) -> Result<Tensor<T>> {
    let (n, inp, out) = check(cached_input, weights)?;
    if upstream.batch() != n || upstream.item_len() != out {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match linear output ({n}, {out})",
            upstream.shape()
        )));
    }
    let dy = upstream.data();
    for row in dy.chunks_exact(out) {
        for (g, &v) in bias_grad.iter_mut().zip(row) {
            *g += v;
        }
    }
    T::gemm(true, false, out, inp, n, T::one(), dy, cached_input.data(), T::one(), weight_grad);
    let mut xg = Tensor::zeros(cached_input.shape());
    T::gemm(false, false, n, inp, out, T::one(), dy, weights.data(), T::zero(), xg.data_mut());
    Ok(xg)
}

#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: Parameter::new("weight", xavier_init([outputs, inputs, 1, 1], rng)?, true),
            bias: Parameter::zeros("bias", [1, outputs, 1, 1], false),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        linear_forward(input, &self.weight.value, Some(self.bias.value.data()))
    }

    pub fn backward(&mut self, upstream: &Tensor<T>, cached_input: &Tensor<T>) -> Result<Tensor<T>> {
        linear_backward_into(
            upstream,
            cached_input,
            &self.weight.value,
            self.weight.grad.data_mut(),
            self.bias.grad.data_mut(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut w = Tensor::<f32>::zeros([4, 4, 1, 1]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let x = Tensor::new([2, 1, 2, 2], (0..8).map(|v| v as f32 - 3.5).collect()).unwrap();
        let y = linear_forward(&x, &w, Some(&[0.0; 4])).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), [2, 4, 1, 1]);
    }

    #[test]
    fn matches_row_column_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = xavier_init([3, 5, 1, 1], &mut rng).unwrap();
        let x = Tensor::new([2, 5, 1, 1], (0..10).map(|v| (v as f64 * 0.37).cos()).collect()).unwrap();
        let b = [0.5, -1.0, 0.25];
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut acc = b[o];
                for i in 0..5 {
                    acc += w.data()[o * 5 + i] * x.data()[r * 5 + i];
                }
                assert!((y.data()[r * 3 + o] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let w = Tensor::<f32>::zeros([3, 5, 1, 1]);
        let x = Tensor::<f32>::zeros([2, 4, 1, 1]);
        assert!(matches!(linear_forward(&x, &w, None), Err(Error::Shape(_))));
    }
}
