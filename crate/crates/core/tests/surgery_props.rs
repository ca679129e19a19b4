//! Randomized invariants of the distribution-surgery pipeline.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unlearn_core::numeric;
use unlearn_core::surgery::{
    build_target, forget_eliminate, nucleus_truncate, ForgetMask,
};

fn random_logits(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<f64> {
    (0..vocab).map(|_| rng.gen_range(-8.0..8.0)).collect()
}

#[test]
fn surgery_invariants_hold_over_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let started = std::time::Instant::now();
    let top_ps = [0.2, 0.8, 1.0];
    let alphas = [0.0, 0.5];
    for case in 0..1000 {
        let vocab = rng.gen_range(6..64);
        let logits = random_logits(&mut rng, vocab);
        let forget = rng.gen_range(0..vocab);
        let top_p = top_ps[case % top_ps.len()];
        let alpha = alphas[(case / 3) % alphas.len()];

        let probs = numeric::softmax(&logits).unwrap();
        let mask = ForgetMask::new(forget, vocab).unwrap();
        let (masked, p_n) = forget_eliminate(&logits, mask).unwrap();

        // eliminated distribution: simplex with forget entry exactly zero
        assert_eq!(p_n[forget], 0.0, "case {case}");
        let sum: f64 = p_n.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "case {case}: sum {sum}");

        // ratio preservation over kept pairs
        let mut kept: Vec<usize> = (0..vocab).filter(|&i| i != forget).collect();
        kept.truncate(6);
        for &i in &kept {
            for &j in &kept {
                if probs[j] > 1e-12 && p_n[j] > 1e-12 {
                    let before = probs[i] / probs[j];
                    let after = p_n[i] / p_n[j];
                    assert!(
                        (before - after).abs() <= 1e-9 * before.abs().max(1.0),
                        "case {case}: ratio {before} became {after}"
                    );
                }
            }
        }

        // nucleus retains at least top_p of the eliminated mass before
        // renormalization, and never the forget token
        let truncated = nucleus_truncate(&masked, &p_n, top_p).unwrap();
        let retained: f64 = (0..vocab)
            .filter(|&i| truncated[i].is_finite())
            .map(|i| p_n[i])
            .sum();
        assert!(
            retained >= top_p - 1e-12,
            "case {case}: retained {retained} < {top_p}"
        );
        assert_eq!(truncated[forget], f64::NEG_INFINITY);

        // target mass accounting
        let target = build_target(&logits, &truncated, &probs, mask, alpha, "t").unwrap();
        let dense = target.to_dense();
        let total: f64 = dense.iter().sum();
        if alpha == 0.0 {
            assert!((total - 1.0).abs() < 1e-12, "case {case}: total {total}");
            assert_eq!(dense[forget], 0.0);
            assert!(dense.iter().all(|&v| v >= 0.0));
        } else {
            let expect = 1.0 - alpha * probs[forget];
            assert!(
                (total - expect).abs() < 1e-9,
                "case {case}: total {total} vs {expect}"
            );
            let negatives = dense.iter().filter(|&&v| v < 0.0).count();
            assert_eq!(negatives, 1, "case {case}");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 10, "suite took {elapsed:?}");
}

proptest! {
    #[test]
    fn eliminated_distribution_is_simplex(
        raw in prop::collection::vec(-8.0f64..8.0, 4..40),
        forget_seed in 0usize..1000,
    ) {
        let forget = forget_seed % raw.len();
        let mask = ForgetMask::new(forget, raw.len()).unwrap();
        let (_, p_n) = forget_eliminate(&raw, mask).unwrap();
        prop_assert_eq!(p_n[forget], 0.0);
        let sum: f64 = p_n.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p_n.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one(
        raw in prop::collection::vec(-30.0f64..30.0, 2..50),
    ) {
        let ls = numeric::log_softmax(&raw).unwrap();
        let sum: f64 = ls.iter().map(|v| v.exp()).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}
