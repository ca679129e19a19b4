//! Plain-slice numeric helpers shared by the no-grad paths (generation,
//! distribution surgery, evaluation).
//!
//! Masked logit entries use `f64::NEG_INFINITY` as the sentinel so that the
//! corresponding probabilities are exactly zero after softmax.

use crate::error::{CoreError, Result};

/// Numerically stable log softmax over one logit row.
///
/// `-inf` inputs map to `-inf` outputs (probability zero). A row whose
/// entries are all `-inf` has no distribution to normalize and is rejected.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(CoreError::DegenerateDistribution(
            "all logits are -inf".into(),
        ));
    }
    let mut sum = 0.0;
    for &v in logits {
        if v.is_finite() {
            sum += (v - max).exp();
        }
    }
    let log_z = max + sum.ln();
    Ok(logits
        .iter()
        .map(|&v| if v.is_finite() { v - log_z } else { f64::NEG_INFINITY })
        .collect())
}

/// Softmax over one logit row; see [`log_softmax`] for the `-inf` convention.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let ls = log_softmax(logits)?;
    Ok(ls
        .iter()
        .map(|&v| if v.is_finite() { v.exp() } else { 0.0 })
        .collect())
}

/// Index of the maximum entry, ties broken by the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// log(sigmoid(x)) computed without overflow on either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// sigmoid(x) computed without overflow on either tail.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_has_probability_zero() {
        let p = softmax(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_masked_row_is_degenerate() {
        let r = log_softmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(r, Err(CoreError::DegenerateDistribution(_))));
    }

    #[test]
    fn log_softmax_matches_high_precision_values() {
        // softmax([1,2,3]) evaluated with 50-digit arithmetic and frozen here.
        let expect = [
            0.090030573170380458,
            0.244728471054797652,
            0.665240955774821890,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[5.0]), 0);
    }

    #[test]
    fn log_sigmoid_tails_are_stable() {
        assert!((log_sigmoid(0.0) - (-(2.0f64).ln())).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) - (-800.0)).abs() < 1e-9);
    }
}
