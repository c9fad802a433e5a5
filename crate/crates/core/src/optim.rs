//! ADAM with a gradient-coupled L2 weight penalty, and the constant-rate
//! training loop built on it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{l2_loss, Mode, Parameter};
use crate::models::Network;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty added to the gradient of convolution/linear weights.
    pub weight_penalty: f64,
    pub minibatch: usize,
    pub total_iterations: usize,
    pub seed: u64,
    /// Loss is recorded every `log_every` iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_penalty: 1e-4,
            minibatch: 100,
            total_iterations: 90_000,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Iteration budget used for the MLP baseline.
    pub const MLP_ITERATIONS: usize = 900_000;

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::param("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || self.weight_penalty < 0.0 {
            return Err(Error::param(
                "learning rate and epsilon must be positive, weight penalty non-negative",
            ));
        }
        if self.minibatch == 0 || self.log_every == 0 {
            return Err(Error::param("minibatch and log interval must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&mut Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    pub fn for_network(network: &mut Network<T>) -> Self {
        Self::new(&network.parameters_mut())
    }
}

/// One bias-corrected ADAM update over `params`, then zeroes their
/// gradients. A non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if p.value.shape() != m.shape() {
            return Err(Error::shape(format!("moment shape mismatch for '{}'", p.name)));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' element {i} at step {}; update skipped",
                p.name,
                state.step_count + 1
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - config.beta1), T::lit(1.0 - config.beta2));
    let correction1 = T::lit(1.0 - config.beta1.powi(t));
    let correction2 = T::lit(1.0 - config.beta2.powi(t));
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.epsilon);
    let penalty = T::lit(config.weight_penalty);

    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let decay = p.decay && config.weight_penalty > 0.0;
        let Parameter { value, grad, .. } = &mut **p;
        for (((theta, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = if decay { *g + penalty * *theta } else { *g };
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Supplies normalized (input, target) minibatches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// (iteration, minibatch loss) pairs; iterations are 1-based.
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in &self.points {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }
}

/// Runs `config.total_iterations` ADAM steps at a constant learning rate.
pub fn training_loop(
    network: &mut Network<f32>,
    source: &mut dyn BatchSource,
    config: &TrainConfig,
) -> Result<LossTrace> {
    config.validate()?;
    let mut state = AdamState::for_network(network);
    let mut trace = LossTrace::default();
    network.zero_grad();
    for iteration in 1..=config.total_iterations {
        let (input, target) = source.next_batch()?;
        let prediction = network.forward(&input, Mode::Training)?;
        let (loss, grad) = l2_loss(&prediction, &target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        network.backward(&grad)?;
        adam_step(&mut network.parameters_mut(), &mut state, config)?;
        if iteration % config.log_every == 0 {
            log::debug!("iteration {iteration}: loss {loss:.6}");
            trace.points.push((iteration, loss));
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_param(theta: f64, grad: f64, decay: bool) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::full([1, 1, 1, 1], theta), decay);
        p.grad.data_mut()[0] = grad;
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0, 1.0, true);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&[&mut p]);
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        let delta = p.value.data()[0];
        assert!((delta.abs() - 1e-4).abs() <= 1e-4 * 1e-3);
        assert!(delta < 0.0);
        assert_eq!(st.step_count, 1);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_zero_weight_alone() {
        let mut p = scalar_param(0.0, 0.0, true);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&[&mut p]);
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        assert_eq!(p.value.data()[0], 0.0);
    }

    #[test]
    fn two_steps_match_hand_trace() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(0.0, 1.0, true);
        let mut st = AdamState::new(&[&mut p]);
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        p.grad.data_mut()[0] = 1.0;
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();

        // hand evaluation, including the weight penalty on the second step
        let (lr, b1, b2, eps, wd) = (1e-4, 0.9f64, 0.999f64, 1e-8, 1e-4);
        let mut theta = 0.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            let g = 1.0 + wd * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let got = p.value.data()[0];
        assert!(((got - theta) / theta).abs() <= 1e-9, "{got} vs {theta}");
    }

    #[test]
    fn penalty_skips_non_decay_parameters() {
        let cfg = TrainConfig {
            weight_penalty: 0.5,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(2.0, 0.0, false);
        let mut st = AdamState::new(&[&mut p]);
        adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
        assert_eq!(p.value.data()[0], 2.0);
        let mut q = scalar_param(2.0, 0.0, true);
        let mut st = AdamState::new(&[&mut q]);
        adam_step(&mut [&mut q], &mut st, &cfg).unwrap();
        assert!(q.value.data()[0] < 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar_param(1.0, f64::NAN, true);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&[&mut p]);
        assert!(matches!(adam_step(&mut [&mut p], &mut st, &cfg), Err(Error::NonFinite(_))));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            minibatch: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    struct FixedBatches {
        input: Tensor<f32>,
        target: Tensor<f32>,
        served: usize,
    }

    impl FixedBatches {
        fn new(seed: u64) -> Self {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let input: Vec<f32> = (0..4 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            // residual target: a smooth copy of the noise
            let target = input.iter().map(|v| 0.5 * v).collect();
            Self {
                input: Tensor::new([4, 1, 8, 8], input).unwrap(),
                target: Tensor::new([4, 1, 8, 8], target).unwrap(),
                served: 0,
            }
        }
    }

    impl BatchSource for FixedBatches {
        fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
            self.served += 1;
            Ok((self.input.clone(), self.target.clone()))
        }
    }

    fn small_net() -> Network<f32> {
        crate::models::build_network(&crate::models::NetworkSpec::dncnn(1, 1).with_features(4), 3).unwrap()
    }

    fn flat(net: &Network<f32>) -> Vec<f32> {
        net.parameters().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
    }

    #[test]
    fn zero_iterations_leave_network_untouched() {
        let mut net = small_net();
        let before = flat(&net);
        let mut src = FixedBatches::new(0);
        let cfg = TrainConfig { total_iterations: 0, ..TrainConfig::default() };
        let trace = training_loop(&mut net, &mut src, &cfg).unwrap();
        assert!(trace.points.is_empty());
        assert_eq!(src.served, 0);
        assert_eq!(flat(&net), before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { total_iterations: 20, log_every: 5, ..TrainConfig::default() };
        let run = || {
            let mut net = small_net();
            let trace = training_loop(&mut net, &mut FixedBatches::new(1), &cfg).unwrap();
            (flat(&net), trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            total_iterations: 200,
            log_every: 1,
            ..TrainConfig::default()
        };
        let mut net = small_net();
        let trace = training_loop(&mut net, &mut FixedBatches::new(2), &cfg).unwrap();
        let first = trace.points[0].1;
        let last = trace.points.last().unwrap().1;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(trace.to_csv().starts_with("iteration,loss\n1,"));
    }

    proptest! {
        #[test]
        fn zero_gradients_without_penalty_change_nothing(
            theta in prop::collection::vec(-10.0f64..10.0, 1..6),
            steps in 1usize..5,
        ) {
            let cfg = TrainConfig { weight_penalty: 0.0, ..TrainConfig::default() };
            let mut p = Parameter::new("w", Tensor::new([1, 1, 1, theta.len()], theta.clone()).unwrap(), true);
            let mut st = AdamState::new(&[&mut p]);
            for _ in 0..steps {
                adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
            }
            prop_assert_eq!(p.value.data(), &theta[..]);
        }

        #[test]
        fn constant_magnitude_steps_are_bounded(
            magnitude in 1e-6f64..1e3,
            signs in prop::collection::vec(any::<bool>(), 1..40),
        ) {
            let cfg = TrainConfig { weight_penalty: 0.0, ..TrainConfig::default() };
            let mut p = scalar_param(0.0, 0.0, true);
            let mut st = AdamState::new(&[&mut p]);
            for s in signs {
                let before = p.value.data()[0];
                p.grad.data_mut()[0] = if s { magnitude } else { -magnitude };
                adam_step(&mut [&mut p], &mut st, &cfg).unwrap();
                let delta = (p.value.data()[0] - before).abs();
                prop_assert!(delta <= 2.0 * cfg.learning_rate);
            }
        }
    }
}
