use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::lm::TokenId;

/// BLEU settings: n-gram orders 1..=max_order with modified precision,
/// add-one smoothing on zero-count higher-order precisions, and the standard
/// brevity penalty exp(1 - r/c) when the candidate is shorter.
#[derive(Debug, Clone, Copy)]
pub struct BleuConfig {
    pub max_order: usize,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { max_order: 4 }
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU score of a candidate against one reference, in [0, 1].
pub fn bleu(candidate: &[TokenId], reference: &[TokenId], cfg: &BleuConfig) -> Result<f64> {
    if cfg.max_order == 0 {
        return Err(CoreError::Metric("BLEU order must be at least 1".into()));
    }
    if reference.is_empty() {
        return Err(CoreError::Metric("BLEU reference is empty".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=cfg.max_order {
        let cand_total = candidate.len().saturating_sub(n - 1);
        let ref_total = reference.len().saturating_sub(n - 1);
        if cand_total == 0 || ref_total == 0 {
            // order not measurable for these lengths
            continue;
        }
        let ref_counts = ngram_counts(reference, n);
        let mut matched = 0usize;
        for (gram, count) in ngram_counts(candidate, n) {
            if let Some(&r) = ref_counts.get(gram) {
                matched += count.min(r);
            }
        }
        let precision = if matched == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            // add-one smoothing on zero-count higher orders
            1.0 / (cand_total as f64 + 1.0)
        } else {
            matched as f64 / cand_total as f64
        };
        log_sum += precision.ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let geo_mean = (log_sum / orders as f64).exp();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(brevity * geo_mean)
}
