use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax of `[B, K]` logits, max-subtracted for stability.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.dims() {
        [_, k] => k,
        _ => {
            return Err(Error::shape(format!(
                "softmax expects [B, K], got {:?}",
                logits.shape()
            )))
        }
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of softmax(logits) against class indices, with the
/// gradient `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, k) = match *logits.dims() {
        [b, k] => (b, k),
        _ => {
            return Err(Error::shape(format!(
                "expected [B, K] logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if labels.len() != batch {
        return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    let inv_b = T::lit(1.0 / batch as f64);
    for (row, &label) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum_exp.ln();
        loss -= (row[label] - max - log_sum).to_f64().unwrap();
        for (j, v) in row.iter_mut().enumerate() {
            let p = (*v - max - log_sum).exp();
            let target = if j == label { T::one() } else { T::zero() };
            *v = (p - target) * inv_b;
        }
    }
    Ok((T::lit(loss / batch as f64), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Tensor::<f64>::full(&[3, 6], 0.7).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut logits = Tensor::<f64>::zeros(&[1, 6]).unwrap();
        logits.set(&[0, 2], 1000.0);
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(loss.is_finite() && grad.all_finite());
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 6]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[6]),
            Err(Error::LabelOutOfRange { label: 6, classes: 6 })
        ));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = Tensor::<f64>::uniform(&[5, 6], -30.0, 30.0, 3).unwrap();
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks_exact(6) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::<f64>::uniform(&[4, 6], -3.0, 3.0, 9).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!(loss >= 0.0);
        for row in grad.data().chunks_exact(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
