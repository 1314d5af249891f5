//! Mean next-token negative log-likelihood.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returns the mean of `−log softmax(logits)[target]` over rows and
/// `∂loss/∂logits = (softmax − onehot) / rows`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(shape_err("cross_entropy", rows, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    logits.ensure_finite("cross_entropy")?;
    let mut dlogits = Tensor::zeros(logits.shape());
    let inv_rows = 1.0 / rows as f64;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum_exp: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t].as_f64();
        for (d, v) in dlogits.row_mut(r).iter_mut().zip(row) {
            *d = T::of((v.as_f64() - log_z).exp() * inv_rows);
        }
        let dt = &mut dlogits.row_mut(r)[t];
        *dt = *dt - T::of(inv_rows);
    }
    let loss = total * inv_rows;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, dlogits))
}
