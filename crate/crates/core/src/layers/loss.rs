use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Row-wise softmax of (N, K) logits, stabilized by the row max.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let k = s.c * s.spatial_len();
    let mut out = Tensor::zeros(s);
    for (row, dst) in logits.data().chunks(k.max(1)).zip(out.data_mut().chunks_mut(k.max(1))) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(exps) {
            *d = T::from_f64(e / z);
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let k = s.c * s.spatial_len();
    if labels.len() != s.n {
        return Err(Error::DimensionMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for {} rows", labels.len(), s.n),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    if s.n == 0 {
        return Ok((0.0, Tensor::zeros(s)));
    }
    let n = s.n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(Shape::matrix(s.n, k));
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let shifted: Vec<f64> = row.iter().map(|v| v.as_f64() - max).collect();
        let log_z = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
        loss += log_z - shifted[labels[i]];
        for j in 0..k {
            let p = (shifted[j] - log_z).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + j] = T::from_f64((p - target) / n);
        }
    }
    Ok((loss / n, grad.reshape(s)?))
}
