use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over rows, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels", logits.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Err(Error::Protocol("cross-entropy over zero rows".into()));
    }
    let n_way = logits.cols();
    let inv_n = 1.0 / logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), n_way);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= n_way {
            return Err(Error::Index {
                what: "class label",
                index: label,
                bound: n_way,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = (p - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            location: "softmax_cross_entropy loss".into(),
        });
    }
    Ok((loss.max(0.0), grad))
}
