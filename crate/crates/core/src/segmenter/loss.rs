use crate::error::{Error, Result};
use crate::tensor::{Grid, PROB_EPS};

/// Mean binary cross-entropy over pixels. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &Grid, truth: &Grid) -> Result<f64> {
    let shape = |g: &Grid| (g.height() * g.width(), g.channels());
    if (probs.height(), probs.width(), probs.channels())
        != (truth.height(), truth.width(), truth.channels())
    {
        return Err(Error::shape("bce_loss", shape(probs), shape(truth)));
    }
    if truth.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("bce_loss truth must be binary"));
    }
    let n = probs.data().len().max(1) as f64;
    let total: f64 = probs
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / n)
}
