//! Reproducibility: identical seeds and inputs give bitwise-identical
//! tensors, datasets, and training trajectories within one platform.

use std::collections::BTreeSet;

use unlearn_core::data::{gen_copyright, Split};
use unlearn_core::lm::{checkpoint_to_string, LmConfig, LmModel, Stage, Vocab};
use unlearn_core::surgery::{CachedTargets, SurgeryConfig};
use unlearn_core::trainers::{memorize, unlearn, MemorizeConfig, Method, TrainConfig};

fn micro_config(seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: Vocab::standard().size(),
        context_len: 16,
        embed_dim: 8,
        hidden_dim: 16,
        seed,
    }
}

#[test]
fn forward_is_bitwise_identical_across_fresh_models() {
    let vocab = Vocab::standard();
    let ctx = vocab.encode("ax=add(").unwrap();
    let a = LmModel::new(micro_config(5)).unwrap();
    let b = LmModel::new(micro_config(5)).unwrap();
    let la = a.forward_logits(&ctx).unwrap();
    let lb = b.forward_logits(&ctx).unwrap();
    assert!(la
        .data()
        .iter()
        .zip(lb.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn full_corpus_round_trips_through_the_tokenizer() {
    let vocab = Vocab::standard();
    let data = gen_copyright(11, 4).unwrap();
    for record in &data.records {
        let text = record.full_text();
        let tokens = vocab.encode(&text).unwrap();
        assert_eq!(vocab.decode(&tokens).unwrap(), text);
    }
}

#[test]
fn training_trajectories_replay_bitwise() {
    let vocab = Vocab::standard();
    let data = gen_copyright(13, 2).unwrap();
    let forget = data.examples(Split::Forget, &vocab, false).unwrap();
    let retain = data.examples(Split::Retain, &vocab, false).unwrap();
    let cfg = MemorizeConfig {
        epochs: 2,
        lr: 2e-3,
        gate: 0.0,
        seed: 3,
        ..MemorizeConfig::default()
    };
    let run = |()| {
        let mut model = LmModel::new(micro_config(1)).unwrap();
        memorize(&mut model, &forget, &retain, &cfg).unwrap();
        checkpoint_to_string(&model, Stage::Memorized).unwrap()
    };
    assert_eq!(run(()), run(()));
}

#[test]
fn unlearn_runs_replay_bitwise_and_zero_epochs_is_identity() {
    let vocab = Vocab::standard();
    let data = gen_copyright(17, 2).unwrap();
    let forget = data.examples(Split::Forget, &vocab, true).unwrap();
    let base = LmModel::new(micro_config(2)).unwrap();

    let run = |epochs: usize| {
        let mut model = base.clone();
        let cfg = TrainConfig {
            epochs,
            lr: 1e-3,
            ..TrainConfig::new(Method::Prod, 9)
        };
        let out = unlearn(&mut model, &forget, &cfg, None).unwrap();
        (model.hash(), out.per_epoch_loss)
    };
    assert_eq!(run(0).0, base.hash());
    assert_eq!(run(3), run(3));
}

#[test]
fn cached_targets_rebuild_bitwise_from_the_same_model() {
    let vocab = Vocab::standard();
    let data = gen_copyright(19, 2).unwrap();
    let examples: Vec<(String, Vec<usize>, Vec<usize>)> = data
        .split(Split::Forget)
        .map(|r| {
            (
                r.id.clone(),
                vocab.encode(&r.prompt).unwrap(),
                vocab.encode(&r.continuation).unwrap(),
            )
        })
        .collect();
    let model = LmModel::new(micro_config(7)).unwrap();
    let a = CachedTargets::build(&model, &examples, &SurgeryConfig::default()).unwrap();
    let b = CachedTargets::build(&model, &examples, &SurgeryConfig::default()).unwrap();
    assert_eq!(
        a.to_string_lossless().unwrap(),
        b.to_string_lossless().unwrap()
    );
}

#[test]
fn forget_and_retain_eval_splits_share_no_text() {
    let data = gen_copyright(23, 6).unwrap();
    let forget: BTreeSet<String> = data
        .split(Split::Forget)
        .map(|r| r.full_text())
        .collect();
    for r in &data.records {
        if r.split != Split::Forget {
            assert!(!forget.contains(&r.full_text()), "{}", r.id);
        }
    }
}
