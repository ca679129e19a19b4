use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One evaluated checkpoint in forget-quality / model-utility space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub method: String,
    pub epoch: usize,
    pub forget_quality: f64,
    pub model_utility: f64,
}

impl EvalPoint {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("forget_quality", self.forget_quality),
            ("model_utility", self.model_utility),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Metric(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `p` dominates `q`: at least as good in both objectives, strictly better
/// in at least one.
pub fn dominates(p: &EvalPoint, q: &EvalPoint) -> bool {
    let ge = p.forget_quality >= q.forget_quality && p.model_utility >= q.model_utility;
    let gt = p.forget_quality > q.forget_quality || p.model_utility > q.model_utility;
    ge && gt
}

/// How points enter the dominance comparison: every checkpoint of a method,
/// or only its best (most-dominant) point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PdrMode {
    /// Average the per-point dominated fraction over each method's points.
    #[default]
    PointLevel,
    /// Score each method by its single best point.
    BestPoint,
}

/// Per-point dominance fraction against all points of other methods.
fn point_pdr(p: &EvalPoint, points: &[EvalPoint]) -> f64 {
    let others: Vec<&EvalPoint> = points.iter().filter(|q| q.method != p.method).collect();
    if others.is_empty() {
        return 0.0;
    }
    let dominated = others.iter().filter(|q| dominates(p, q)).count();
    dominated as f64 / others.len() as f64
}

/// Pareto dominance ratio per method, in [0, 1].
pub fn pdr(points: &[EvalPoint], mode: PdrMode) -> Result<BTreeMap<String, f64>> {
    for p in points {
        p.validate()?;
    }
    let mut methods: Vec<&str> = points.iter().map(|p| p.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    if methods.len() < 2 {
        return Err(CoreError::UndefinedPdr);
    }
    let mut out = BTreeMap::new();
    for method in methods {
        let own: Vec<&EvalPoint> = points.iter().filter(|p| p.method == method).collect();
        let score = match mode {
            PdrMode::PointLevel => {
                own.iter().map(|p| point_pdr(p, points)).sum::<f64>() / own.len() as f64
            }
            PdrMode::BestPoint => own
                .iter()
                .map(|p| point_pdr(p, points))
                .fold(0.0, f64::max),
        };
        out.insert(method.to_string(), score);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(method: &str, fq: f64, util: f64) -> EvalPoint {
        EvalPoint {
            method: method.into(),
            epoch: 1,
            forget_quality: fq,
            model_utility: util,
        }
    }

    #[test]
    fn total_dominance_scores_one() {
        let points = vec![
            point("m1", 0.9, 0.9),
            point("m2", 0.5, 0.5),
            point("m3", 0.4, 0.6),
        ];
        let scores = pdr(&points, PdrMode::PointLevel).unwrap();
        assert_eq!(scores["m1"], 1.0);
        assert_eq!(scores["m2"], 0.0);
        assert_eq!(scores["m3"], 0.0);
    }

    #[test]
    fn identical_points_do_not_dominate() {
        let points = vec![point("a", 0.5, 0.5), point("b", 0.5, 0.5)];
        let scores = pdr(&points, PdrMode::PointLevel).unwrap();
        assert_eq!(scores["a"], 0.0);
        assert_eq!(scores["b"], 0.0);
    }

    #[test]
    fn single_method_is_undefined() {
        let points = vec![point("a", 0.5, 0.5), point("a", 0.6, 0.4)];
        assert!(matches!(
            pdr(&points, PdrMode::PointLevel),
            Err(CoreError::UndefinedPdr)
        ));
    }

    #[test]
    fn out_of_range_metric_is_rejected() {
        let points = vec![point("a", 1.5, 0.5), point("b", 0.5, 0.5)];
        assert!(matches!(
            pdr(&points, PdrMode::PointLevel),
            Err(CoreError::Metric(_))
        ));
    }

    #[test]
    fn best_point_mode_takes_the_maximum() {
        let points = vec![
            point("a", 0.9, 0.9),
            point("a", 0.1, 0.1),
            point("b", 0.5, 0.5),
        ];
        let best = pdr(&points, PdrMode::BestPoint).unwrap();
        let avg = pdr(&points, PdrMode::PointLevel).unwrap();
        assert_eq!(best["a"], 1.0);
        assert_eq!(avg["a"], 0.5);
    }

    #[test]
    fn dominance_is_a_strict_partial_order_on_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let points: Vec<EvalPoint> = (0..40)
            .map(|i| point(&format!("m{}", i % 4), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        for p in &points {
            assert!(!dominates(p, p), "irreflexive");
            for q in &points {
                if dominates(p, q) {
                    assert!(!dominates(q, p), "antisymmetric");
                }
                for r in &points {
                    if dominates(p, q) && dominates(q, r) {
                        assert!(dominates(p, r), "transitive");
                    }
                }
            }
        }
    }
}
