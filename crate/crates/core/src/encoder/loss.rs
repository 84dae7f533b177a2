use ndarray::Array1;

use super::{EncoderError, Scalar};

/// Numerically stable softmax, computed in `f64`.
pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum = exp.sum();
    exp / sum
}

/// Softmax cross-entropy: `(−log p[label], p − onehot(label))`.
pub fn cross_entropy_loss<F: Scalar>(logits: &Array1<F>, label: usize) -> Result<(f64, Array1<F>), EncoderError> {
    let classes = logits.len();
    if label >= classes {
        return Err(EncoderError::LabelOutOfRange { label, classes });
    }
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label].as_f64();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let p = (v.as_f64() - lse).exp();
            F::from_f64(if i == label { p - 1.0 } else { p })
        })
        .collect();
    Ok((loss, grad))
}
