use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Squared-error loss summed over each item and averaged over the batch:
/// `sum((p - t)^2) / (2 * batch)`, with gradient `(p - t) / batch`.
pub fn l2_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            prediction.shape(),
            target.shape()
        )));
    }
    let batch = prediction.batch().max(1);
    let inv = T::one() / T::from_usize(batch).unwrap();
    let mut sum = 0.0f64;
    let grad = prediction.zip_map(target, |p, t| (p - t) * inv)?;
    for (&p, &t) in prediction.data().iter().zip(target.data()) {
        let d = p.to_f64().unwrap() - t.to_f64().unwrap();
        sum += d * d;
    }
    Ok((sum / (2.0 * batch as f64), grad))
}
