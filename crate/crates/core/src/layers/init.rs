use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Uniform Xavier initialization on `[-sqrt(3/fan_in), sqrt(3/fan_in)]`,
/// i.e. variance `1/fan_in`, where fan_in = in_ch * kh * kw.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Result<Tensor<T>> {
    let fan_in = shape[1] * shape[2] * shape[3];
    if fan_in == 0 {
        return Err(Error::param(format!("shape {shape:?} has zero fan-in")));
    }
    let bound = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::param(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}
