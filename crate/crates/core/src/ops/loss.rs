//! Softmax cross-entropy head.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits, `(softmax(logits) − onehot(labels)) / batch`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = *logits.dims() else {
        return Err(shape_err!("logits must be [n, classes], got {:?}", logits.dims()));
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid!("label {bad} outside [0, {classes})"));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut loss = T::zero();
    for (b, (row, g)) in logits
        .data()
        .chunks(classes)
        .zip(grad.data_mut().chunks_mut(classes))
        .enumerate()
    {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let log_z = z.ln() + mx;
        loss = loss + (log_z - row[labels[b]]);
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_n;
        }
        g[labels[b]] = g[labels[b]] - inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Predicted class per row; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.dims()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::full(&[3, 10], 0.7);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let logits = Tensor::<f64>::from_fn(&[4, 5], |i| ((i * 7) % 11) as f64 * 0.3 - 1.0);
        let labels = [1, 0, 4, 2];
        let (_, g) = softmax_xent(&logits, &labels).unwrap();
        for b in 0..4 {
            let row: Vec<f64> = (0..5).map(|j| logits.at(&[b, j])).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..5 {
                let onehot = if j == labels[b] { 1.0 } else { 0.0 };
                let want = (row[j].exp() / z - onehot) / 4.0;
                assert!((g.at(&[b, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 10]);
        assert!(softmax_xent(&logits, &[10]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax(&t), vec![1, 0]);
    }
}
