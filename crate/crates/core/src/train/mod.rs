//! Losses, optimisation, gradient checking, and the training loop.

mod gradcheck;
mod optim;
mod trainer;

pub use gradcheck::*;
pub use optim::*;
pub use trainer::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits: [n, k]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.rows_cols();
    if logits.ndim() != 2 || rows != targets.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {:?}, {} targets", logits.shape(), targets.len()),
        ));
    }
    if rows == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(Error::VocabOverflow { id: t, vocab: cols });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / rows as f64)
}
