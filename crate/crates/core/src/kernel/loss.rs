use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy of `(batch, classes)` logits and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.per_sample();
    if labels.len() != s.n {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Input(format!(
                "label {label} outside [0, {k}) at row {n}"
            )));
        }
        let row = logits.sample(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += if row[label] == max {
            // keeps tiny losses representable when the label dominates
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != label)
                .map(|(_, v)| (v - max).exp())
                .sum();
            rest.ln_1p()
        } else {
            log_z - row[label]
        };
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

/// Cross-entropy of `logits` against `labels`; back-propagates through `tape`
/// and accumulates every parameter gradient into `store`.
pub fn backprop_loss(
    tape: &Tape,
    logits: Var,
    labels: &[usize],
    store: &mut ParamStore,
) -> Result<f64> {
    let (loss, seed) = softmax_cross_entropy(tape.value(logits), labels)?;
    let grads = tape.backward(logits, seed)?;
    for (id, g) in tape.param_grads(&grads) {
        if !g.all_finite() {
            let name = store.get(id).map(|s| s.name.clone()).unwrap_or_default();
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        store.accumulate_grad(id, g.data());
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Shape4;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::full(Shape4::new(3, 10, 1, 1), 0.7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = Tensor::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);
        assert!((grad.data()[0] + grad.data()[1]).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for mag in [1.0, 10.0, 100.0, 700.0] {
            let logits = Tensor::from_vec(Shape4::new(1, 3, 1, 1), vec![0.0, mag, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let logits = Tensor::zeros(Shape4::new(1, 2, 1, 1));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::Input(_))
        ));
    }
}
