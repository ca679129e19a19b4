// Scratch inspection of built targets. Not part of the test suite.

use unlearn_cli::config::ExperimentConfig;
use unlearn_cli::pipeline::EvalAssets;
use unlearn_core::data::{gen_copyright, Split};
use unlearn_core::lm::{LmConfig, LmModel, Vocab, BOS};
use unlearn_core::numeric;
use unlearn_core::surgery::{CachedTargets, SurgeryConfig};
use unlearn_core::trainers::{forget_exact_match, memorize, pretrain, MemorizeConfig};

fn show(vocab: &Vocab, tok: usize) -> String {
    match tok {
        0 => "<PAD>".into(),
        1 => "<BOS>".into(),
        2 => "<EOS>".into(),
        _ => {
            let c = vocab.alphabet()[tok - 3];
            if c == '\n' {
                "\\n".into()
            } else {
                c.to_string()
            }
        }
    }
}

fn main() {
    let dataset = gen_copyright(1, 8).unwrap();
    let vocab = Vocab::standard();
    let retain = dataset.examples(Split::Retain, &vocab, false).unwrap();
    let forget = dataset.examples(Split::Forget, &vocab, false).unwrap();
    let assets = EvalAssets::from_dataset(&dataset).unwrap();

    let cfg = ExperimentConfig::default();
    let mut lm_cfg: LmConfig = cfg.model.lm_config();
    lm_cfg.hidden_dim = 96;
    let mut model = LmModel::new(lm_cfg).unwrap();
    for round in 0..25 {
        let lr = if round < 15 { 5e-3 } else { 2e-3 };
        let rcfg = MemorizeConfig {
            epochs: 1,
            lr,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 11 + round,
            gate: 0.0,
        };
        pretrain(&mut model, &retain, &rcfg).unwrap();
    }
    let mut contaminated = model.clone();
    for block in 0..12 {
        let mcfg = MemorizeConfig {
            epochs: 10,
            lr: 2e-3,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 1300 + block,
            gate: 0.0,
        };
        memorize(&mut contaminated, &forget, &retain, &mcfg).unwrap();
        let exact = forget_exact_match(&contaminated, &forget).unwrap();
        let fq = assets.forget_quality(&contaminated).unwrap();
        if exact >= 0.95 && fq <= 0.04 {
            break;
        }
    }

    let examples: Vec<(String, Vec<usize>, Vec<usize>)> = forget
        .iter()
        .map(|e| (e.id.clone(), e.prompt.clone(), e.continuation.clone()))
        .collect();
    let cache =
        CachedTargets::build(&contaminated, &examples, &SurgeryConfig::default()).unwrap();

    let ex = &forget[0];
    let text = vocab.decode(&ex.continuation).unwrap();
    println!("example 0 text:\n{text}");
    let mut seq = vec![BOS];
    for t in 1..=ex.continuation.len().min(40) {
        let target = cache.get(&ex.id, t).unwrap();
        let logits = contaminated
            .forward_logits(&contaminated.pad_context(&seq))
            .unwrap();
        let p = numeric::softmax(logits.data()).unwrap();
        let truth = ex.continuation[t - 1];
        let mut kept: Vec<(usize, f64)> = target.kept().to_vec();
        kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let desc: Vec<String> = kept
            .iter()
            .take(4)
            .map(|(tok, v)| format!("{}:{v:.2}", show(&vocab, *tok)))
            .collect();
        println!(
            "t={t:>3} true={:<5} p(true)={:.3} nucleus[{}] {}",
            show(&vocab, truth),
            p[truth],
            kept.len(),
            desc.join(" ")
        );
        seq.push(truth);
    }
}
