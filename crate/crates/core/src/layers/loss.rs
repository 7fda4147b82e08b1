//! Binary cross-entropy on logits.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound on probabilities inside the logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BceOutput<T: Scalar = f32> {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradient of the mean loss with respect to each logit.
    pub grad: Tensor<T>,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-[w y log p + (1 - y) log(1 - p)]` with `p = sigmoid(logit)`.
///
/// The log terms are evaluated as softplus of the logit, then capped at
/// `-ln(PROB_CLAMP)`; a capped term contributes no gradient.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], pos_weight: f64) -> Result<BceOutput<T>> {
    let n = logits.len();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logits", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(format!("label {bad} is not 0 or 1")));
    }
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    let cap = -PROB_CLAMP.ln();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&z, &y) in logits.data().iter().zip(labels) {
        let z = z.to_f64();
        let p = stable_sigmoid(z);
        let g = if y == 1 {
            let term = softplus(-z);
            if term >= cap {
                total += pos_weight * cap;
                0.0
            } else {
                total += pos_weight * term;
                pos_weight * (p - 1.0)
            }
        } else {
            let term = softplus(z);
            if term >= cap {
                total += cap;
                0.0
            } else {
                total += term;
                p
            }
        };
        grad.push(T::from_f64(g / n as f64));
    }
    Ok(BceOutput { loss: total / n as f64, grad: Tensor::from_vec(logits.dims().to_vec(), grad)? })
}
