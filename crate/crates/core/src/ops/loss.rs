use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::attention::softmax_rows;
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy of `logits (N x K)` against class indices,
/// together with its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<(E, Tensor<E>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for a batch of {n}", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = logits.data().to_vec();
    let mut loss = E::zero();
    for (row, (logit_row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        // log-sum-exp with the row max factored out
        let max = logit_row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = max + logit_row.iter().map(|&v| (v - max).exp()).sum::<E>().ln();
        loss += lse - logit_row[label];
        softmax_rows(&mut probs[row * k..(row + 1) * k], k);
    }
    let inv_n = E::one() / E::from_usize(n).unwrap();
    for (row, &label) in labels.iter().enumerate() {
        probs[row * k + label] -= E::one();
    }
    probs.iter_mut().for_each(|p| *p *= inv_n);
    Ok((loss * inv_n, Tensor::new([n, k], probs)?))
}

struct CrossEntropyBackward<E: Element> {
    grad: Tensor<E>,
}

impl<E: Element> Backward<E> for CrossEntropyBackward<E> {
    fn backward(&self, dy: &Tensor<E>, _: &[&Tensor<E>], _: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let g = dy.item()?;
        Ok(vec![Some(self.grad.map(|v| v * g))])
    }
}

/// Records the cross-entropy loss on the tape as a scalar.
pub fn cross_entropy<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (loss, grad) = softmax_cross_entropy(tape.value(logits), labels)?;
    Ok(tape.push(Tensor::scalar(loss), &[logits], CrossEntropyBackward { grad }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros([3, 6]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        for row in grad.data().chunks(6) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let mut logits = Tensor::<f64>::zeros([1, 6]);
        logits.data_mut()[2] = 30.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = Tensor::new([1, 2], vec![1.0f64, 2.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        // -ln(e / (e + e^2)) = ln(1 + e)
        let want = (1.0 + 1f64.exp()).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 1.3133).abs() < 1e-4);
        // the larger logit as the target: ln(1 + e) - 1
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - ((1.0 + 1f64.exp()).ln() - 1.0)).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Tensor::<f32>::zeros([1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Data(_))));
    }
}
