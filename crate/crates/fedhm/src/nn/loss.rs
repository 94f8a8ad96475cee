//! Classification loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-softmax of the true class.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::dimension("loss expects (batch, classes) logits"));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::dimension(format!(
            "{} labels for batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for i in 0..batch {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[i]]) * inv_batch;
        for j in 0..classes {
            let p = (row[j] - log_denom).exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            grad.data_mut()[i * classes + j] = (p - onehot) * inv_batch;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_drives_loss_to_zero() {
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_is_positive_unless_point_mass() {
        let logits = Tensor::new(&[1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn matches_log_sum_exp_oracle() {
        let logits = Tensor::new(
            &[2, 3],
            vec![0.3, -1.2, 2.1, -0.5, 0.9, 0.05],
        )
        .unwrap();
        let labels = [2usize, 1];
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();

        // independent computation straight from the definition
        let mut want = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..3).map(|j| logits.at2(i, j)).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += (lse - row[lab]) / 2.0;
        }
        assert!((loss - want).abs() < 1e-12);

        for i in 0..2 {
            let row: Vec<f64> = (0..3).map(|j| logits.at2(i, j)).collect();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = row[j].exp() / denom;
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                assert!((grad.at2(i, j) - (p - onehot) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
