//! Training losses, CTC decoding and prediction confidence.

mod ctc;
mod decode;

pub use ctc::{
    collapse, ctc_loss, ctc_loss_batch, enumerate_sequences, is_feasible, min_frames, CtcResult,
    BLANK,
};
pub use decode::{
    beam_confidence, beam_decode, class_confidence, confidence_from_masses, edit_distance,
    greedy_decode, word_error_rate, BeamHypothesis,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `-log softmax(logits)[target]` and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let v = logits.numel();
    if logits.rank() != 1 || target >= v {
        return Err(Error::Contract(format!(
            "target {target} for logits {:?}",
            logits.shape()
        )));
    }
    let x = logits.data();
    let lz = crate::tensor::log_sum_exp(x);
    let mut grad: Vec<f64> = x.iter().map(|xi| (xi - lz).exp()).collect();
    grad[target] -= 1.0;
    Ok((lz - x[target], Tensor::new(&[v], grad)?))
}
