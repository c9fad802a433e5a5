//! 2-D batch normalization over (batch, height, width) per channel.

use super::{Mode, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNormState<T = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    /// Set once the running statistics hold real data, either from a
    /// training-mode pass or from explicit assignment.
    pub initialized: bool,
}

/// Values saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running statistics not yet initialized.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new("gamma", Tensor::full([1, channels, 1, 1], T::one()), false),
            beta: Parameter::zeros("beta", [1, channels, 1, 1], false),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(BN_MOMENTUM),
            epsilon: T::lit(BN_EPSILON),
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn set_running_stats(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::shape("running statistics length does not match channels"));
        }
        if var.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::param("running variance must be finite and non-negative"));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.initialized = true;
        Ok(())
    }
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let [n, c, h, w] = input.shape();
    if c != state.channels() {
        return Err(Error::shape(format!(
            "input has {c} channels, batch norm has {}",
            state.channels()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(input.shape());
    let gamma = state.gamma.value.data().to_vec();
    let beta = state.beta.value.data().to_vec();

    match mode {
        Mode::Inference => {
            if !state.initialized {
                return Err(Error::Configuration(
                    "batch norm inference requested before running statistics were initialized"
                        .into(),
                ));
            }
            for ch in 0..c {
                let inv = T::one() / (state.running_var[ch] + state.epsilon).sqrt();
                let scale = gamma[ch] * inv;
                let shift = beta[ch] - state.running_mean[ch] * scale;
                for b in 0..n {
                    let src = input.plane(b, ch);
                    for (o, &x) in out.plane_mut(b, ch).iter_mut().zip(src) {
                        *o = x * scale + shift;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Training => {
            let count = (n * hw) as f64;
            let mut normalized = Tensor::zeros(input.shape());
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                // statistics accumulated in f64 regardless of T
                let mut sum = 0.0f64;
                for b in 0..n {
                    sum += input.plane(b, ch).iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += input
                        .plane(b, ch)
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let inv = 1.0 / (var + state.epsilon.to_f64().unwrap()).sqrt();
                let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
                for b in 0..n {
                    let src = input.plane(b, ch);
                    let xh = normalized.plane_mut(b, ch);
                    for (d, &x) in xh.iter_mut().zip(src) {
                        *d = (x - mean_t) * inv_t;
                    }
                    let xh = normalized.plane(b, ch).to_vec();
                    for (o, x) in out.plane_mut(b, ch).iter_mut().zip(xh) {
                        *o = gamma[ch] * x + beta[ch];
                    }
                }
                inv_std.push(inv_t);

                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let m = state.momentum;
                state.running_mean[ch] = m * state.running_mean[ch] + (T::one() - m) * mean_t;
                state.running_var[ch] = m * state.running_var[ch] + (T::one() - m) * T::lit(unbiased);
            }
            state.initialized = true;
            Ok((out, Some(BatchNormCache { normalized, inv_std })))
        }
    }
}

/// Exact gradient of the training-mode map, including the dependence of the
/// batch statistics on the input. Returns (input, gamma, beta) gradients; the
/// parameter gradients are also accumulated into `state`.
pub fn batchnorm_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cache: Option<&BatchNormCache<T>>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let cache = cache.ok_or_else(|| {
        Error::Contract("batch norm backward requires a training-mode forward cache".into())
    })?;
    upstream.expect_same_shape(&cache.normalized, "batchnorm_backward")?;
    let [n, c, h, w] = upstream.shape();
    let m = T::from_usize(n * h * w).unwrap();
    let mut input_grad = Tensor::zeros(upstream.shape());
    let mut gamma_grad = vec![T::zero(); c];
    let mut beta_grad = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for b in 0..n {
            for (&dy, &xh) in upstream.plane(b, ch).iter().zip(cache.normalized.plane(b, ch)) {
                sum_dy += dy;
                sum_dy_xh += dy * xh;
            }
        }
        gamma_grad[ch] = sum_dy_xh;
        beta_grad[ch] = sum_dy;
        let k = state.gamma.value.data()[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let dy = upstream.plane(b, ch);
            let xh = cache.normalized.plane(b, ch);
            let dx: Vec<T> = dy
                .iter()
                .zip(xh)
                .map(|(&g, &x)| k * (m * g - sum_dy - x * sum_dy_xh))
                .collect();
            input_grad.plane_mut(b, ch).copy_from_slice(&dx);
        }
    }
    state.gamma.accumulate(&gamma_grad);
    state.beta.accumulate(&beta_grad);
    Ok((input_grad, gamma_grad, beta_grad))
}
