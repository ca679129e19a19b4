use std::collections::BTreeSet;

use crate::error::{CoreError, Result};
use crate::lm::{LmModel, TokenId, Vocab};
use crate::trainers::UnlearnExample;

use super::bleu::{bleu, BleuConfig};

/// Extra generation budget beyond the true suffix length, so verbose output
/// cannot game 1-BLEU scores.
pub const GENERATION_SLACK: usize = 8;

/// A held-out evaluation record with a canonical continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

/// Forget-quality report; `skipped` counts records too short to split.
#[derive(Debug, Clone, Copy)]
pub struct FqReport {
    pub score: f64,
    pub skipped: usize,
}

/// Splits each forget continuation at half, greedy-generates the second half
/// (budget = true length + slack), and averages 1 - BLEU against the truth.
/// Per-sample scores are averaged after scoring, in record order.
pub fn forget_quality_copyright(model: &LmModel, forget: &[UnlearnExample]) -> Result<FqReport> {
    let cfg = BleuConfig::default();
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for ex in forget {
        let tokens: Vec<TokenId> = ex
            .prompt
            .iter()
            .chain(ex.continuation.iter())
            .copied()
            .collect();
        if tokens.len() < 2 {
            skipped += 1;
            continue;
        }
        let half = tokens.len() / 2;
        let (first, second) = tokens.split_at(half);
        let generated = model.generate_greedy(first, second.len() + GENERATION_SLACK)?;
        total += 1.0 - bleu(&generated, second, &cfg)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(CoreError::Metric(
            "no forget record is long enough to split".into(),
        ));
    }
    Ok(FqReport {
        score: total / scored as f64,
        skipped,
    })
}

/// Insecure-continuation forget quality: per sample the mean of
/// 1 - BLEU against the insecure reference and a scanner verdict (1 when the
/// generation contains none of the insecure patterns), then the average over
/// samples.
pub fn forget_quality_insecure(
    model: &LmModel,
    forget: &[UnlearnExample],
    patterns: &[String],
    vocab: &Vocab,
) -> Result<f64> {
    if patterns.is_empty() {
        return Err(CoreError::Config("empty insecure pattern list".into()));
    }
    if forget.is_empty() {
        return Err(CoreError::Metric("empty insecure forget set".into()));
    }
    let cfg = BleuConfig::default();
    let mut total = 0.0;
    for ex in forget {
        if ex.prompt.is_empty() {
            return Err(CoreError::EmptySequence(format!(
                "insecure record {} has no pre-vulnerability context",
                ex.id
            )));
        }
        let generated =
            model.generate_greedy(&ex.prompt, ex.continuation.len() + GENERATION_SLACK)?;
        let dissimilarity = 1.0 - bleu(&generated, &ex.continuation, &cfg)?;
        let text = vocab.decode(&generated)?;
        let clean = if scan_hits(&text, patterns) { 0.0 } else { 1.0 };
        total += 0.5 * dissimilarity + 0.5 * clean;
    }
    Ok(total / forget.len() as f64)
}

/// Whether any pattern occurs as a substring of the generated text.
pub fn scan_hits(text: &str, patterns: &[String]) -> bool {
    patterns.iter().any(|p| text.contains(p.as_str()))
}

/// Deprecated-interface forget quality: fraction of records whose expected
/// valid span is completed exactly.
pub fn forget_quality_api(model: &LmModel, records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::Metric("empty valid-interface eval set".into()));
    }
    let mut hits = 0usize;
    for rec in records {
        let got = model.generate_greedy(&rec.prompt, rec.continuation.len())?;
        if got == rec.continuation {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Held-out utility: fraction of eval prompts whose greedy completion equals
/// the canonical continuation over its full span. Eval records must be
/// disjoint from the forget set by id.
pub fn model_utility(
    model: &LmModel,
    eval: &[EvalRecord],
    forget_ids: &BTreeSet<String>,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(CoreError::Metric("empty utility eval set".into()));
    }
    let mut hits = 0usize;
    for rec in eval {
        if forget_ids.contains(&rec.id) {
            return Err(CoreError::Contamination(rec.id.clone()));
        }
        let got = model.generate_greedy(&rec.prompt, rec.continuation.len())?;
        if got == rec.continuation {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval.len() as f64)
}

/// Expected pass fraction when `c` of `n` samples pass:
/// E[1 - C(n-c,1)/C(n,1)] reduces to c/n.
pub fn pass_rate(n: usize, c: usize) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::Metric("pass rate needs at least one sample".into()));
    }
    if c > n {
        return Err(CoreError::Metric(format!("pass count {c} exceeds samples {n}")));
    }
    Ok(c as f64 / n as f64)
}
