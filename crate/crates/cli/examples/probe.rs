// Scratch probe for hyperparameter tuning. Not part of the test suite.

use std::time::Instant;

use unlearn_cli::config::ExperimentConfig;
use unlearn_cli::pipeline::EvalAssets;
use unlearn_core::data::{gen_copyright, Split};
use unlearn_core::eval::{prefix_attack, AttackOutcome, AttackSpec};
use unlearn_core::lm::{LmConfig, LmModel, Vocab};
use unlearn_core::trainers::{
    forget_exact_match, memorize, pretrain, unlearn, MemorizeConfig, Method,
};

fn main() {
    let t0 = Instant::now();
    let dataset = gen_copyright(1, 8).unwrap();
    let vocab = Vocab::standard();
    let retain = dataset.examples(Split::Retain, &vocab, false).unwrap();
    let forget = dataset.examples(Split::Forget, &vocab, false).unwrap();
    let assets = EvalAssets::from_dataset(&dataset).unwrap();

    let cfg = ExperimentConfig::default();
    let mut lm_cfg: LmConfig = cfg.model.lm_config();
    lm_cfg.embed_dim = 32;
    lm_cfg.hidden_dim = 96;
    let mut model = LmModel::new(lm_cfg).unwrap();
    for round in 0..40 {
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
        if round >= 20 && assets.utility(&model).unwrap() >= 0.9 {
            break;
        }
    }
    let base_util = assets.utility(&model).unwrap();

    let mut contaminated = model.clone();
    for block in 0..60 {
        let mcfg = MemorizeConfig {
            epochs: 2,
            lr: 1.5e-3,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 1300 + block,
            gate: 0.0,
        };
        memorize(&mut contaminated, &forget, &retain, &mcfg).unwrap();
        let exact = forget_exact_match(&contaminated, &forget).unwrap();
        let fq = assets.forget_quality(&contaminated).unwrap();
        if exact >= 0.9 && fq <= 0.05 {
            break;
        }
    }
    let exact = forget_exact_match(&contaminated, &forget).unwrap();
    let (fq0, util0) = assets.evaluate(&contaminated).unwrap();
    println!(
        "pretrained u {base_util:.3}; contaminated exact {exact:.3} fq {fq0:.3} u {util0:.3} ({:?})",
        t0.elapsed()
    );

    let _ = AttackSpec::default();
    use unlearn_core::eval::{pdr, EvalPoint, PdrMode};
    use unlearn_core::surgery::TargetLossKind;
    let seeds = [11u64, 12, 13, 14, 15];
    let losses = [TargetLossKind::Ce, TargetLossKind::Kl, TargetLossKind::Js];
    let top_ps = [0.2, 0.8, 1.0];
    let alphas = [-0.5, 0.0, 0.5];
    for &seed in &seeds {
        let mut points = Vec::new();
        for &loss in &losses {
            for &top_p in &top_ps {
                for &alpha in &alphas {
                    if loss != TargetLossKind::Ce && alpha != 0.0 {
                        continue;
                    }
                    // per-cell operating rate: earliest crossing, ties by
                    // higher utility at the crossing
                    let mut best: Option<(usize, f64, Vec<(f64, f64)>)> = None;
                    for lr in [1.2e-3, 2.5e-3, 5e-3] {
                        let mut cfg2 = cfg.clone();
                        cfg2.unlearn.batch_size = 4;
                        cfg2.unlearn.lr_prod = lr;
                        cfg2.unlearn.top_p = top_p;
                        cfg2.unlearn.alpha = alpha;
                        cfg2.unlearn.loss = loss.name().to_string();
                        let tcfg = unlearn_cli::pipeline::train_config(&cfg2, Method::Prod, seed)
                            .unwrap();
                        let mut target = contaminated.clone();
                        let run = unlearn(&mut target, &forget, &tcfg, None).unwrap();
                        let mut curve = Vec::new();
                        let mut crossing: Option<(usize, f64)> = None;
                        for (i, ckpt) in run.checkpoints.iter().enumerate() {
                            let (fq, util) = assets.evaluate(ckpt).unwrap();
                            curve.push((fq, util));
                            if crossing.is_none() && fq >= 0.9 {
                                crossing = Some((i + 1, util));
                            }
                        }
                        let (epoch, util) = crossing.unwrap_or((99, -1.0));
                        let better = match &best {
                            None => true,
                            Some((be, bu, _)) => epoch < *be || (epoch == *be && util > *bu),
                        };
                        if better {
                            best = Some((epoch, util, curve));
                        }
                    }
                    let cell = format!("{}-p{}-a{}", loss.name(), top_p, alpha);
                    for (i, (fq, util)) in best.unwrap().2.into_iter().enumerate() {
                        points.push(EvalPoint {
                            method: cell.clone(),
                            epoch: i + 1,
                            forget_quality: fq,
                            model_utility: util,
                        });
                    }
                }
            }
        }
        let scores = pdr(&points, PdrMode::PointLevel).unwrap();
        let mut ranked: Vec<(&String, &f64)> = scores.iter().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap());
        let top: Vec<String> = ranked
            .iter()
            .take(5)
            .map(|(m, s)| format!("{m}={s:.3}"))
            .collect();
        println!("seed {seed}: {}", top.join(" "));
    }
    println!("total {:?}", t0.elapsed());
}
