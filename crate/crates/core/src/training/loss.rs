//! Regression loss over masked multi-agent predictions.

use trajformer_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{Batch, COORDS};

/// Per-element weights `[S × T × 2]`: each supervised sample's squared
/// errors are averaged over its valid agents, frames and coordinates, then
/// samples are averaged.
pub fn mse_weights(batch: &Batch, steps: usize) -> Result<Tensor> {
    let supervised = batch.supervised.iter().filter(|&&s| s).count();
    if supervised == 0 {
        return Err(Error::Contract("no supervised samples in batch".into()));
    }
    let per_sample: Vec<f64> = (0..batch.samples)
        .map(|k| {
            if batch.supervised[k] {
                1.0 / (batch.valid_agents(k) * steps * COORDS * supervised) as f64
            } else {
                0.0
            }
        })
        .collect();
    let block = steps * COORDS;
    Ok(Tensor::from_fn([batch.sequences(), steps, COORDS], |i| {
        per_sample[batch.sequence_sample[i / block]]
    }))
}

/// Weighted squared error between `predictions` and the batch's ground truth.
pub fn mse_loss(tape: &mut Tape, predictions: Var, batch: &Batch) -> Result<Var> {
    let shape = tape.shape(predictions).to_vec();
    if shape != batch.truth.shape() {
        return Err(trajformer_autodiff::TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: shape,
            rhs: batch.truth.shape().to_vec(),
        }
        .into());
    }
    let truth = tape.constant(batch.truth.clone());
    let weights = tape.constant(mse_weights(batch, shape[1])?);
    let diff = tape.sub(predictions, truth)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted))
}

/// Mean squared error of one sample's `[T × n × 2]` prediction over the
/// agents flagged in `mask`.
pub fn mse_value(prediction: &Tensor, truth: &Tensor, mask: &[bool]) -> Result<f64> {
    let s = prediction.shape();
    if s != truth.shape() || s.len() != 3 || s[1] != mask.len() || s[2] != COORDS {
        return Err(Error::Contract(format!(
            "mse over {:?} vs {:?} with {} mask flags",
            s,
            truth.shape(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Contract("every agent masked".into()));
    }
    let (p, t) = (prediction.data(), truth.data());
    let mut total = 0.0;
    for f in 0..s[0] {
        for i in (0..s[1]).filter(|&i| mask[i]) {
            for c in 0..COORDS {
                let at = (f * s[1] + i) * COORDS + c;
                total += (p[at] - t[at]).powi(2);
            }
        }
    }
    Ok(total / (valid * s[0] * COORDS) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let t = Tensor::from_fn([25, 2, 2], |k| k as f64 * 0.01);
        assert_eq!(mse_value(&t, &t, &[true, true]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_error_two_gives_four() {
        let t = Tensor::zeros([25, 2, 2]);
        let p = Tensor::full([25, 2, 2], 2.0);
        assert_eq!(mse_value(&p, &t, &[true, true]).unwrap(), 4.0);
    }

    #[test]
    fn masked_agent_excluded() {
        let t = Tensor::zeros([25, 2, 2]);
        let p = Tensor::from_fn([25, 2, 2], |k| if (k / 2) % 2 == 1 { 9.0 } else { 1.0 });
        assert_eq!(mse_value(&p, &t, &[true, false]).unwrap(), 1.0);
        assert!(mse_value(&p, &t, &[false, false]).is_err());
    }
}
