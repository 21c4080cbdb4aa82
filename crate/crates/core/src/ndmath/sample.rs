use super::{Rng, Scalar};
use crate::error::{Error, Result};

/// Index drawn from `softmax(logits / temperature)` with its log-probability
/// under that distribution.
pub fn sample_categorical<T: Scalar>(logits: &[T], temperature: f64, rng: &mut Rng) -> Result<(usize, f64)> {
    let logp = log_softmax_tempered(logits, temperature)?;
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        last = i;
        cum += lp.exp();
        if u < cum {
            return Ok((i, lp));
        }
    }
    // rounding left `cum` just below one
    Ok((last, logp[last]))
}

/// Highest logit, lowest index on ties, with its log-probability at
/// `temperature`.
pub fn argmax_categorical<T: Scalar>(logits: &[T], temperature: f64) -> Result<(usize, f64)> {
    let logp = log_softmax_tempered(logits, temperature)?;
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if v.to_acc() > logits[best].to_acc() {
            best = i;
        }
    }
    Ok((best, logp[best]))
}

pub(crate) fn log_softmax_tempered<T: Scalar>(logits: &[T], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Sampling("empty logit vector".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Sampling(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|v| v.is_nan() || v.to_acc() == f64::INFINITY) {
        return Err(Error::numeric("sample_categorical"));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_acc() / temperature).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::Sampling("all logits are -inf".into()));
    }
    let lse = mx + scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(scaled.iter().map(|v| v - lse).collect())
}
