//! Numerical kernel: matrices, softmax / cross-entropy, order statistics and
//! seeded sampling.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::RngStream;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy logarithm.
pub const LOSS_FLOOR: f64 = 1e-12;

/// `log Σ exp(x)` with max-subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|v| v - lse).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    Ok(out)
}

/// Softmax over a slice already known to be finite.
pub(crate) fn softmax_inplace(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("non-finite value at position {i}"))),
        None => Ok(()),
    }
}

/// `-ln(probs[label] + LOSS_FLOOR)`, clamped at zero.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::invalid(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(cross_entropy_of(*p))
}

#[inline]
pub(crate) fn cross_entropy_of(p: f64) -> f64 {
    (-(p + LOSS_FLOOR).ln()).max(0.0)
}

/// Median of a non-empty list; even lengths average the two middle values.
pub fn median_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    check_finite(values)?;
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if values.len() % 2 == 1 {
        Ok(upper)
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lower + upper))
    }
}

/// Weighted draw of `count` distinct indices.
///
/// Equivalent to successive draws with renormalization, realized with
/// Gumbel-top-k keys. Zero-weight entries are never drawn.
pub fn sample_without_replacement(
    weights: &[f64],
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let log_weights: Vec<f64> = weights
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
        .collect();
    sample_without_replacement_log(&log_weights, count, rng)
}

/// As [`sample_without_replacement`], taking log-weights so that weights far
/// below `f64::MIN_POSITIVE` remain drawable. `-inf` marks a zero weight.
pub fn sample_without_replacement_log(
    log_weights: &[f64],
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let positive = log_weights.iter().filter(|w| w.is_finite()).count();
    if positive == 0 {
        return Err(Error::invalid("all sampling weights are zero"));
    }
    if count > positive {
        return Err(Error::invalid(format!(
            "cannot draw {count} distinct indices from {positive} positive weights"
        )));
    }
    // A key is drawn for every entry so the stream position does not depend
    // on the weight values.
    let mut keyed: Vec<(f64, usize)> = log_weights
        .iter()
        .enumerate()
        .map(|(i, &lw)| {
            let gumbel = -(-rng.next_open01().ln()).ln();
            (lw + gumbel, i)
        })
        .filter(|(k, _)| k.is_finite())
        .collect();
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count, |a, b| b.0.total_cmp(&a.0));
        keyed.truncate(count);
    }
    keyed.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

pub fn standard_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal(`mean`, `stdev`) restricted to `[low, high]`.
///
/// Rejection sampling; when the interval carries almost no mass the draw
/// switches to inverse-CDF sampling. `stdev == 0` is a point mass at `mean`
/// clamped into the interval.
pub fn truncated_normal(
    mean: f64,
    stdev: f64,
    low: f64,
    high: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(low < high) {
        return Err(Error::invalid(format!("empty interval [{low}, {high}]")));
    }
    if !mean.is_finite() || !stdev.is_finite() || stdev < 0.0 {
        return Err(Error::invalid("mean and stdev must be finite, stdev >= 0"));
    }
    if stdev == 0.0 {
        return Ok(mean.clamp(low, high));
    }
    const MAX_REJECTIONS: usize = 64;
    for _ in 0..MAX_REJECTIONS {
        let x = mean + stdev * standard_normal(rng);
        if (low..=high).contains(&x) {
            return Ok(x);
        }
    }
    let normal = Normal::new(mean, stdev).map_err(|e| Error::invalid(e.to_string()))?;
    let (a, b) = (normal.cdf(low), normal.cdf(high));
    let x = if b > a {
        normal.inverse_cdf(a + (b - a) * rng.next_open01())
    } else if low > mean {
        low
    } else {
        high
    };
    Ok(x.clamp(low, high))
}
