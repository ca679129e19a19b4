//! Output-distribution surgery: build a fixed supervisory distribution from
//! the initial model's logits and fit the current model to it with a
//! soft-target loss.
//!
//! The construction pipeline is mask-the-forget-token, renormalize,
//! nucleus-truncate the tail, then redistribute with an optional penalty on
//! the forget token. The order is fixed: truncating before masking could keep
//! the forget token inside the nucleus, so no public entry point allows it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::lm::{LmModel, TokenId, BOS};
use crate::numeric;

/// Per-position binary mask selecting exactly one forget token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForgetMask {
    token: TokenId,
    vocab: usize,
}

impl ForgetMask {
    pub fn new(token: TokenId, vocab: usize) -> Result<Self> {
        if token >= vocab {
            return Err(CoreError::Vocabulary { id: token, vocab });
        }
        Ok(Self { token, vocab })
    }

    pub fn token(&self) -> TokenId {
        self.token
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

/// Loss used to fit the model's distribution to the cached target.
/// The divergence variants require non-negative targets, hence `alpha == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetLossKind {
    #[default]
    Ce,
    Kl,
    Js,
}

impl TargetLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "kl" => Ok(Self::Kl),
            "js" => Ok(Self::Js),
            other => Err(CoreError::Config(format!("unknown target loss {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Kl => "kl",
            Self::Js => "js",
        }
    }
}

/// Nucleus threshold and forget-token penalty for target construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgeryConfig {
    pub top_p: f64,
    pub alpha: f64,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        Self {
            top_p: 0.8,
            alpha: 0.0,
        }
    }
}

impl SurgeryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !self.alpha.is_finite() || self.alpha < -1.0 {
            return Err(CoreError::Config(format!(
                "alpha must be finite and at least -1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Fixed supervisory distribution for one forget position.
///
/// Kept (nucleus) tokens carry non-negative probabilities; the forget token
/// carries `-alpha * p_orig(forget)`; everything else is exactly zero. The
/// provenance hash ties the target to the model it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDist {
    vocab: usize,
    /// (token, probability) for nucleus members, ascending by token id.
    kept: Vec<(TokenId, f64)>,
    forget_token: TokenId,
    forget_value: f64,
    provenance: String,
}

impl TargetDist {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn kept(&self) -> &[(TokenId, f64)] {
        &self.kept
    }

    pub fn forget_token(&self) -> TokenId {
        self.forget_token
    }

    pub fn forget_value(&self) -> f64 {
        self.forget_value
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Total mass: `1 - alpha * p_orig(forget)` up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.kept.iter().map(|(_, p)| p).sum::<f64>() + self.forget_value
    }

    /// Dense vector over the vocabulary; off-nucleus entries are exactly 0.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for &(t, p) in &self.kept {
            out[t] = p;
        }
        out[self.forget_token] += self.forget_value;
        out
    }
}

/// Teacher-forced logits and probabilities of the model at forget position
/// `t` (1-based) of `continuation`, conditioned on the prompt and the true
/// prefix.
pub fn collect_distribution(
    model: &LmModel,
    prompt: &[TokenId],
    continuation: &[TokenId],
    t: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t < 1 || t > continuation.len() {
        return Err(CoreError::Config(format!(
            "position {t} outside 1..={}",
            continuation.len()
        )));
    }
    let mut seq = vec![BOS];
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&continuation[..t - 1]);
    let logits = model.forward_logits(&model.pad_context(&seq))?;
    let probs = numeric::softmax(logits.data())?;
    Ok((logits.data().to_vec(), probs))
}

/// Masks the forget token's logit to `-inf` and renormalizes.
/// Relative probabilities of the kept tokens are preserved.
pub fn forget_eliminate(logits: &[f64], mask: ForgetMask) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.len() != mask.vocab {
        return Err(CoreError::DimensionMismatch {
            left: vec![logits.len()],
            right: vec![mask.vocab],
        });
    }
    let mut masked = logits.to_vec();
    masked[mask.token] = f64::NEG_INFINITY;
    let probs = numeric::softmax(&masked).map_err(|_| {
        CoreError::DegenerateDistribution(
            "forget elimination removed the only finite logit".into(),
        )
    })?;
    Ok((masked, probs))
}

/// Keeps the smallest set of tokens, in descending probability order (ties
/// broken by ascending token id), whose cumulative mass reaches `top_p`;
/// all other logits become `-inf`.
pub fn nucleus_truncate(masked_logits: &[f64], probs: &[f64], top_p: f64) -> Result<Vec<f64>> {
    if masked_logits.len() != probs.len() {
        return Err(CoreError::DimensionMismatch {
            left: vec![masked_logits.len()],
            right: vec![probs.len()],
        });
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(CoreError::Config(format!(
            "top_p must lie in (0, 1], got {top_p}"
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("probabilities are never NaN")
            .then(a.cmp(&b))
    });
    let mut out = vec![f64::NEG_INFINITY; masked_logits.len()];
    let mut cumulative = 0.0;
    for &i in &order {
        if probs[i] <= 0.0 {
            break;
        }
        out[i] = masked_logits[i];
        cumulative += probs[i];
        if cumulative >= top_p {
            break;
        }
    }
    Ok(out)
}

/// Builds the target distribution from one position's raw logits, truncated
/// logits, original probabilities, and forget mask.
pub fn build_target(
    logits: &[f64],
    truncated_logits: &[f64],
    probs: &[f64],
    mask: ForgetMask,
    alpha: f64,
    provenance: &str,
) -> Result<TargetDist> {
    if logits.len() != mask.vocab || truncated_logits.len() != mask.vocab {
        return Err(CoreError::DimensionMismatch {
            left: vec![logits.len()],
            right: vec![mask.vocab],
        });
    }
    let kept_probs = numeric::softmax(truncated_logits)?;
    let kept: Vec<(TokenId, f64)> = kept_probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > 0.0 && i != mask.token)
        .map(|(i, &p)| (i, p))
        .collect();
    Ok(TargetDist {
        vocab: mask.vocab,
        kept,
        forget_token: mask.token,
        forget_value: -alpha * probs[mask.token],
        provenance: provenance.to_string(),
    })
}

/// The full fixed-order construction for one position:
/// collect -> eliminate -> truncate -> redistribute.
pub fn build_position_target(
    model: &LmModel,
    prompt: &[TokenId],
    continuation: &[TokenId],
    t: usize,
    cfg: &SurgeryConfig,
    provenance: &str,
) -> Result<TargetDist> {
    cfg.validate()?;
    let (logits, probs) = collect_distribution(model, prompt, continuation, t)?;
    let mask = ForgetMask::new(continuation[t - 1], logits.len())?;
    let (masked, p_n) = forget_eliminate(&logits, mask)?;
    let truncated = nucleus_truncate(&masked, &p_n, cfg.top_p)?;
    build_target(&logits, &truncated, &probs, mask, cfg.alpha, provenance)
}

/// Immutable map from (example id, 1-based position) to the target built
/// from the initial model. Built once, then read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedTargets {
    model_hash: String,
    config: SurgeryConfig,
    entries: BTreeMap<(String, usize), TargetDist>,
}

impl CachedTargets {
    /// Builds targets for every continuation position of every example.
    pub fn build(
        model: &LmModel,
        examples: &[(String, Vec<TokenId>, Vec<TokenId>)],
        cfg: &SurgeryConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let hash = model.hash();
        let mut entries = BTreeMap::new();
        for (id, prompt, continuation) in examples {
            if continuation.is_empty() {
                return Err(CoreError::EmptySequence(format!(
                    "continuation of example {id}"
                )));
            }
            for t in 1..=continuation.len() {
                let target = build_position_target(model, prompt, continuation, t, cfg, &hash)?;
                entries.insert((id.clone(), t), target);
            }
        }
        Ok(Self {
            model_hash: hash,
            config: *cfg,
            entries,
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn config(&self) -> &SurgeryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, example_id: &str, position: usize) -> Result<&TargetDist> {
        self.entries
            .get(&(example_id.to_string(), position))
            .ok_or_else(|| CoreError::StaleCache {
                example_id: example_id.to_string(),
                position,
            })
    }

    /// Serialized container: header line then one line per position with the
    /// sparse entries as exact bit payloads. Deterministic byte-for-byte.
    pub fn to_string_lossless(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Header<'a> {
            format: &'a str,
            version: u32,
            model_hash: &'a str,
            top_p: f64,
            alpha: f64,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            example_id: &'a str,
            position: usize,
            vocab: usize,
            forget_token: TokenId,
            forget_value_bits: String,
            entries: Vec<(TokenId, String)>,
        }
        let mut out = serde_json::to_string(&Header {
            format: "target-cache",
            version: 1,
            model_hash: &self.model_hash,
            top_p: self.config.top_p,
            alpha: self.config.alpha,
        })?;
        out.push('\n');
        for ((id, pos), t) in &self.entries {
            let line = Line {
                example_id: id,
                position: *pos,
                vocab: t.vocab,
                forget_token: t.forget_token,
                forget_value_bits: format!("{:016x}", t.forget_value.to_bits()),
                entries: t
                    .kept
                    .iter()
                    .filter(|(_, p)| *p != 0.0)
                    .map(|(tok, p)| (*tok, format!("{:016x}", p.to_bits())))
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_str_lossless(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            model_hash: String,
            top_p: f64,
            alpha: f64,
        }
        #[derive(Deserialize)]
        struct Line {
            example_id: String,
            position: usize,
            vocab: usize,
            forget_token: TokenId,
            forget_value_bits: String,
            entries: Vec<(TokenId, String)>,
        }
        let parse_bits = |s: &str| -> Result<f64> {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|e| CoreError::CheckpointFormat(format!("bad bits payload: {e}")))
        };
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| {
            CoreError::CheckpointFormat("empty target cache".into())
        })?)?;
        if header.format != "target-cache" || header.version != 1 {
            return Err(CoreError::CheckpointFormat(format!(
                "unsupported container {}@{}",
                header.format, header.version
            )));
        }
        let mut entries = BTreeMap::new();
        for line in lines {
            let l: Line = serde_json::from_str(line)?;
            let mut kept = Vec::with_capacity(l.entries.len());
            for (tok, bits) in &l.entries {
                kept.push((*tok, parse_bits(bits)?));
            }
            entries.insert(
                (l.example_id, l.position),
                TargetDist {
                    vocab: l.vocab,
                    kept,
                    forget_token: l.forget_token,
                    forget_value: parse_bits(&l.forget_value_bits)?,
                    provenance: header.model_hash.clone(),
                },
            );
        }
        Ok(Self {
            model_hash: header.model_hash,
            config: SurgeryConfig {
                top_p: header.top_p,
                alpha: header.alpha,
            },
            entries,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_string_lossless()?)?;
        Ok(())
    }

    /// Loads a cache and verifies it was built from the expected model.
    pub fn load_verified(path: &std::path::Path, expected_model_hash: &str) -> Result<Self> {
        let cache = Self::from_str_lossless(&std::fs::read_to_string(path)?)?;
        if cache.model_hash != expected_model_hash {
            return Err(CoreError::CacheHashMismatch {
                cache_hash: cache.model_hash,
                model_hash: expected_model_hash.to_string(),
            });
        }
        Ok(cache)
    }
}

/// Soft-target loss of the current model against cached targets, on a tape.
///
/// `rows` pairs each logit row with its target. Reduction is the mean over
/// positions within an example, then the mean over examples.
pub fn soft_target_loss(
    tape: &mut Tape,
    logits: Var,
    rows: &[(&TargetDist, usize)],
    n_examples: usize,
    kind: TargetLossKind,
    alpha: f64,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(CoreError::EmptyLoss);
    }
    if kind != TargetLossKind::Ce && alpha != 0.0 {
        return Err(CoreError::Config(format!(
            "loss {:?} requires a non-negative target, so alpha must be 0 (got {alpha})",
            kind.name()
        )));
    }
    let vocab = rows[0].0.vocab();
    let mut dense = Vec::with_capacity(rows.len() * vocab);
    let mut seg = Vec::with_capacity(rows.len());
    let mut seg_counts = vec![0usize; n_examples];
    for (t, example_idx) in rows {
        dense.extend(t.to_dense());
        seg.push(*example_idx);
        seg_counts[*example_idx] += 1;
    }
    let targets = tape.constant(vec![rows.len(), vocab], dense);
    let logp = tape.log_softmax(logits)?;

    let per_pos = match kind {
        TargetLossKind::Ce => {
            // -sum_i target_i * log p_i per position
            let weighted = tape.mul(logp, targets)?;
            let sums = tape.row_sum(weighted)?;
            tape.neg(sums)
        }
        TargetLossKind::Kl => {
            // sum_i t_i (ln t_i - ln p_i) with 0 ln 0 = 0
            let entropies: Vec<f64> = rows
                .iter()
                .map(|(t, _)| {
                    t.kept()
                        .iter()
                        .map(|&(_, p)| if p > 0.0 { p * p.ln() } else { 0.0 })
                        .sum()
                })
                .collect();
            let ent = tape.constant(vec![rows.len()], entropies);
            let weighted = tape.mul(logp, targets)?;
            let sums = tape.row_sum(weighted)?;
            let neg_ce = tape.neg(sums);
            tape.add(neg_ce, ent)?
        }
        TargetLossKind::Js => {
            // 0.5 KL(t || m) + 0.5 KL(p || m), m = (t + p) / 2
            let p = tape.exp(logp);
            let sum_tp = tape.add(p, targets)?;
            let m = tape.scale(sum_tp, 0.5);
            let ln_m = tape.ln(m)?;
            let entropies: Vec<f64> = rows
                .iter()
                .map(|(t, _)| {
                    t.kept()
                        .iter()
                        .map(|&(_, p)| if p > 0.0 { p * p.ln() } else { 0.0 })
                        .sum()
                })
                .collect();
            let ent = tape.constant(vec![rows.len()], entropies);
            let t_lnm = tape.mul(targets, ln_m)?;
            let t_lnm_sum = tape.row_sum(t_lnm)?;
            let neg_t_lnm = tape.neg(t_lnm_sum);
            let kl_t_m = tape.add(ent, neg_t_lnm)?;
            let diff = tape.sub(logp, ln_m)?;
            let p_diff = tape.mul(p, diff)?;
            let kl_p_m = tape.row_sum(p_diff)?;
            let total = tape.add(kl_t_m, kl_p_m)?;
            tape.scale(total, 0.5)
        }
    };

    // mean over positions within each example, then mean over examples
    let per_example = tape.segment_sum(per_pos, &seg, n_examples)?;
    let inv_counts: Vec<f64> = seg_counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
        .collect();
    let inv = tape.constant(vec![n_examples], inv_counts);
    let means = tape.mul(per_example, inv)?;
    Ok(tape.mean_all(means))
}

/// Value of the soft-target loss for one example against the cache.
/// Verifies the cache covers every continuation position.
pub fn prod_loss(
    model: &LmModel,
    example_id: &str,
    prompt: &[TokenId],
    continuation: &[TokenId],
    cache: &CachedTargets,
    kind: TargetLossKind,
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(CoreError::EmptySequence("continuation".into()));
    }
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let mut contexts = Vec::with_capacity(continuation.len());
    let mut rows = Vec::with_capacity(continuation.len());
    let mut seq = vec![BOS];
    seq.extend_from_slice(prompt);
    for t in 1..=continuation.len() {
        contexts.push(model.pad_context(&seq));
        rows.push((cache.get(example_id, t)?, 0usize));
        seq.push(continuation[t - 1]);
    }
    let logits = model.forward_batch(&mut tape, &vars, &contexts)?;
    let loss = soft_target_loss(
        &mut tape,
        logits,
        &rows,
        1,
        kind,
        cache.config().alpha,
    )?;
    tape.scalar_value(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn micro_model(seed: u64) -> LmModel {
        LmModel::new(LmConfig {
            vocab_size: 8,
            context_len: 4,
            embed_dim: 3,
            hidden_dim: 5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn eliminate_uniform_gives_equal_split() {
        let logits = vec![0.0, 0.0, 0.0, 0.0];
        let mask = ForgetMask::new(2, 4).unwrap();
        let (_, p) = forget_eliminate(&logits, mask).unwrap();
        assert_eq!(p[2], 0.0);
        for &i in &[0usize, 1, 3] {
            assert!((p[i] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eliminate_renormalizes_proportionally() {
        // p = [0.7, 0.2, 0.1], masking token 0 leaves [0, 2/3, 1/3]
        let logits: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        let mask = ForgetMask::new(0, 3).unwrap();
        let (_, p) = forget_eliminate(&logits, mask).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eliminate_only_finite_logit_is_degenerate() {
        let logits = vec![f64::NEG_INFINITY, 1.0, f64::NEG_INFINITY];
        let mask = ForgetMask::new(1, 3).unwrap();
        assert!(matches!(
            forget_eliminate(&logits, mask),
            Err(CoreError::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn nucleus_keeps_smallest_prefix_reaching_top_p() {
        // p_n = [0.5, 0.3, 0.15, 0.05], top_p = 0.8 keeps {0, 1};
        // renormalized this is [0.625, 0.375, 0, 0]
        let p_n = vec![0.5, 0.3, 0.15, 0.05];
        let logits: Vec<f64> = p_n.iter().map(|p: &f64| p.ln()).collect();
        let trunc = nucleus_truncate(&logits, &p_n, 0.8).unwrap();
        let renorm = numeric::softmax(&trunc).unwrap();
        assert!((renorm[0] - 0.625).abs() < 1e-12);
        assert!((renorm[1] - 0.375).abs() < 1e-12);
        assert_eq!(renorm[2], 0.0);
        assert_eq!(renorm[3], 0.0);
    }

    #[test]
    fn nucleus_top_p_one_keeps_all_positive_tokens() {
        let p_n = vec![0.5, 0.0, 0.3, 0.2];
        let logits = vec![1.0, f64::NEG_INFINITY, 0.5, 0.1];
        let trunc = nucleus_truncate(&logits, &p_n, 1.0).unwrap();
        assert_eq!(trunc[0], 1.0);
        assert_eq!(trunc[1], f64::NEG_INFINITY);
        assert_eq!(trunc[2], 0.5);
        assert_eq!(trunc[3], 0.1);
        let renorm = numeric::softmax(&trunc).unwrap();
        let orig = numeric::softmax(&logits).unwrap();
        for (a, b) in renorm.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_single_heavy_token_survives_alone() {
        let p_n = vec![0.9, 0.06, 0.04];
        let logits: Vec<f64> = p_n.iter().map(|p: &f64| p.ln()).collect();
        let trunc = nucleus_truncate(&logits, &p_n, 0.8).unwrap();
        let renorm = numeric::softmax(&trunc).unwrap();
        assert!((renorm[0] - 1.0).abs() < 1e-12);
        assert_eq!(renorm[1], 0.0);
    }

    #[test]
    fn nucleus_ties_break_by_ascending_token_id() {
        let p_n = vec![0.25, 0.25, 0.25, 0.25];
        let logits = vec![0.0, 0.0, 0.0, 0.0];
        let trunc = nucleus_truncate(&logits, &p_n, 0.5).unwrap();
        assert!(trunc[0].is_finite() && trunc[1].is_finite());
        assert_eq!(trunc[2], f64::NEG_INFINITY);
        assert_eq!(trunc[3], f64::NEG_INFINITY);
    }

    #[test]
    fn target_with_alpha_penalty() {
        // alpha = 0.5 and p(forget) = 0.4 puts -0.2 on the forget token and
        // total mass 0.8
        let probs = vec![0.4, 0.3, 0.2, 0.1];
        let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
        let mask = ForgetMask::new(0, 4).unwrap();
        let (masked, p_n) = forget_eliminate(&logits, mask).unwrap();
        let trunc = nucleus_truncate(&masked, &p_n, 1.0).unwrap();
        let target = build_target(&logits, &trunc, &probs, mask, 0.5, "h").unwrap();
        assert!((target.forget_value() + 0.2).abs() < 1e-12);
        assert!((target.total_mass() - 0.8).abs() < 1e-9);
        let negatives = target
            .to_dense()
            .iter()
            .filter(|&&v| v < 0.0)
            .count();
        assert_eq!(negatives, 1);
    }

    #[test]
    fn alpha_zero_target_is_a_distribution_with_forget_zero() {
        let model = micro_model(3);
        let cfg = SurgeryConfig::default();
        let target =
            build_position_target(&model, &[3], &[4, 5], 1, &cfg, "h").unwrap();
        let dense = target.to_dense();
        assert_eq!(dense[4], 0.0);
        assert!(dense.iter().all(|&v| v >= 0.0));
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composed_pipeline_never_keeps_the_forget_token() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let v = rng.gen_range(4..32);
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let forget = rng.gen_range(0..v);
            // make the forget token top-1 half the time: the case where
            // truncating first would wrongly keep it
            let mut logits = logits;
            if rng.gen_bool(0.5) {
                logits[forget] = 10.0;
            }
            let mask = ForgetMask::new(forget, v).unwrap();
            let (masked, p_n) = forget_eliminate(&logits, mask).unwrap();
            let trunc = nucleus_truncate(&masked, &p_n, 0.8).unwrap();
            assert_eq!(trunc[forget], f64::NEG_INFINITY);
            let target = build_target(&logits, &trunc,
                &numeric::softmax(&logits).unwrap(), mask, 0.0, "h").unwrap();
            assert_eq!(target.to_dense()[forget], 0.0);
        }
    }

    #[test]
    fn cache_round_trip_is_byte_identical() {
        let model = micro_model(7);
        let examples = vec![
            ("e0".to_string(), vec![3], vec![4, 5, 6]),
            ("e1".to_string(), vec![], vec![5, 7]),
        ];
        let cache = CachedTargets::build(&model, &examples, &SurgeryConfig::default()).unwrap();
        let text = cache.to_string_lossless().unwrap();
        let reloaded = CachedTargets::from_str_lossless(&text).unwrap();
        assert_eq!(text, reloaded.to_string_lossless().unwrap());
        assert_eq!(cache, reloaded);
    }

    #[test]
    fn cache_miss_is_a_stale_cache_error() {
        let model = micro_model(8);
        let examples = vec![("e0".to_string(), vec![3], vec![4])];
        let cache = CachedTargets::build(&model, &examples, &SurgeryConfig::default()).unwrap();
        assert!(matches!(
            cache.get("missing", 1),
            Err(CoreError::StaleCache { .. })
        ));
        assert!(matches!(
            prod_loss(&model, "missing", &[3], &[4], &cache, TargetLossKind::Ce),
            Err(CoreError::StaleCache { .. })
        ));
    }

    #[test]
    fn divergence_losses_require_alpha_zero() {
        let model = micro_model(9);
        let examples = vec![("e0".to_string(), vec![3], vec![4])];
        let cfg = SurgeryConfig {
            top_p: 0.8,
            alpha: 0.5,
        };
        let cache = CachedTargets::build(&model, &examples, &cfg).unwrap();
        assert!(matches!(
            prod_loss(&model, "e0", &[3], &[4], &cache, TargetLossKind::Kl),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn loss_gradient_wrt_logits_is_p_minus_target() {
        // For the soft-target cross entropy, dL/dh = (sum_i t_i) p - t.
        let model = micro_model(10);
        let examples = vec![("e0".to_string(), vec![3], vec![4])];
        let cache = CachedTargets::build(&model, &examples, &SurgeryConfig::default()).unwrap();
        let target = cache.get("e0", 1).unwrap();

        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape);
        let ctx = model.pad_context(&[BOS, 3]);
        let logits = model.forward_batch(&mut tape, &vars, &[ctx]).unwrap();
        let loss =
            soft_target_loss(&mut tape, logits, &[(target, 0)], 1, TargetLossKind::Ce, 0.0)
                .unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(logits).unwrap();
        let p = numeric::softmax(tape.value(logits)).unwrap();
        let dense = target.to_dense();
        let mass: f64 = dense.iter().sum();
        for i in 0..dense.len() {
            let want = mass * p[i] - dense[i];
            assert!((grad[i] - want).abs() < 1e-10, "{i}: {} vs {want}", grad[i]);
        }
        // the forget-token gradient is positive whenever p_f > 0, so descent
        // always pushes the forget logit down
        let f = target.forget_token();
        assert!(grad[f] > 0.0);
    }
}
