use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lm::{LmModel, TokenId};
use crate::trainers::UnlearnExample;

use super::bleu::{bleu, BleuConfig};
use super::metrics::GENERATION_SLACK;

/// Prefix-injection attack settings, plus the utility floor a checkpoint
/// must clear before its attack scores count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub prefix_fractions: Vec<f64>,
    pub utility_floor: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            prefix_fractions: vec![0.25, 0.50, 0.75],
            utility_floor: 0.6,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_fractions.is_empty() {
            return Err(CoreError::Config("no attack prefix fractions".into()));
        }
        for &f in &self.prefix_fractions {
            if !(f > 0.0 && f < 1.0) {
                return Err(CoreError::Config(format!(
                    "prefix fraction {f} outside (0, 1)"
                )));
            }
        }
        if !(self.utility_floor > 0.0 && self.utility_floor <= 1.0) {
            return Err(CoreError::Config(format!(
                "utility floor {} outside (0, 1]",
                self.utility_floor
            )));
        }
        Ok(())
    }
}

/// BLEU statistics of the attack at one prefix fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionScore {
    pub fraction: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Attack outcome: scored, or excluded because the checkpoint fell below the
/// utility floor. Excluded checkpoints never enter reported aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttackOutcome {
    Scored { per_fraction: Vec<FractionScore> },
    Excluded { reason: String },
}

impl AttackOutcome {
    /// Mean attack BLEU across fractions, when scored.
    pub fn overall_mean(&self) -> Option<f64> {
        match self {
            AttackOutcome::Scored { per_fraction } => {
                let n = per_fraction.len() as f64;
                Some(per_fraction.iter().map(|f| f.mean).sum::<f64>() / n)
            }
            AttackOutcome::Excluded { .. } => None,
        }
    }
}

/// Runs the prefix-injection attack: for each fraction, prompt with the
/// prompt plus that prefix of the forget continuation and score the
/// generation against the remaining suffix with BLEU.
///
/// `utility` is the checkpoint's measured utility and `baseline_utility` the
/// original (pre-unlearning) model's; a checkpoint below
/// `floor * baseline_utility` is excluded with a reason, never scored.
pub fn prefix_attack(
    model: &LmModel,
    forget: &[UnlearnExample],
    spec: &AttackSpec,
    utility: f64,
    baseline_utility: f64,
) -> Result<AttackOutcome> {
    spec.validate()?;
    if forget.is_empty() {
        return Err(CoreError::Metric("empty forget set for the attack".into()));
    }
    let floor = spec.utility_floor * baseline_utility;
    if utility < floor {
        return Ok(AttackOutcome::Excluded {
            reason: format!(
                "checkpoint utility {utility:.4} below floor {floor:.4} ({} of baseline {baseline_utility:.4})",
                spec.utility_floor
            ),
        });
    }
    let cfg = BleuConfig::default();
    let mut per_fraction = Vec::with_capacity(spec.prefix_fractions.len());
    for &fraction in &spec.prefix_fractions {
        let mut scores = Vec::with_capacity(forget.len());
        for ex in forget {
            let cut = ((ex.continuation.len() as f64) * fraction).floor() as usize;
            if cut == 0 || cut >= ex.continuation.len() {
                continue;
            }
            let mut prompt: Vec<TokenId> = ex.prompt.clone();
            prompt.extend_from_slice(&ex.continuation[..cut]);
            let suffix = &ex.continuation[cut..];
            let generated = model.generate_greedy(&prompt, suffix.len() + GENERATION_SLACK)?;
            scores.push(bleu(&generated, suffix, &cfg)?);
        }
        if scores.is_empty() {
            return Err(CoreError::Metric(format!(
                "no forget record admits a prefix at fraction {fraction}"
            )));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        per_fraction.push(FractionScore {
            fraction,
            mean,
            min,
            max,
        });
    }
    Ok(AttackOutcome::Scored { per_fraction })
}
