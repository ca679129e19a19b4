use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use unlearn_core::data::{self, Split, Task, TaskDataset};
use unlearn_core::eval::{
    self, AttackOutcome, AttackSpec, EvalPoint, EvalRecord, PdrMode, PdrRow, ReportRow,
};
use unlearn_core::lm::{load_checkpoint, save_checkpoint, LmModel, Stage, Vocab};
use unlearn_core::surgery::{CachedTargets, SurgeryConfig, TargetLossKind};
use unlearn_core::trainers::{
    memorize, pretrain, unlearn, FlatSignMode, MemorizeConfig, Method, TrainConfig,
    UnlearnExample,
};
use unlearn_core::{CoreError, Result};

use crate::config::ExperimentConfig;
use crate::manifest::{append_row, ManifestRow};

/// Task-specific evaluation assets decoded once per dataset.
pub struct EvalAssets {
    pub task: Task,
    pub vocab: Vocab,
    pub forget: Vec<UnlearnExample>,
    pub forget_with_template: Vec<UnlearnExample>,
    pub utility_eval: Vec<EvalRecord>,
    pub fq_eval: Vec<EvalRecord>,
    pub patterns: Vec<String>,
    pub forget_ids: BTreeSet<String>,
}

impl EvalAssets {
    pub fn from_dataset(dataset: &TaskDataset) -> Result<Self> {
        let vocab = Vocab::standard();
        let forget = dataset.examples(Split::Forget, &vocab, false)?;
        let forget_with_template = dataset.examples(Split::Forget, &vocab, true)?;
        let utility_eval = dataset.eval_records(Split::Eval, &vocab)?;
        let fq_eval = dataset.eval_records(Split::FqEval, &vocab)?;
        let forget_ids = forget.iter().map(|e| e.id.clone()).collect();
        Ok(Self {
            task: dataset.meta.task,
            vocab,
            forget,
            forget_with_template,
            utility_eval,
            fq_eval,
            patterns: data::insecure_patterns(),
            forget_ids,
        })
    }

    /// Task forget quality of one checkpoint.
    pub fn forget_quality(&self, model: &LmModel) -> Result<f64> {
        match self.task {
            Task::Copyright => Ok(eval::forget_quality_copyright(model, &self.forget)?.score),
            Task::Insecure => {
                eval::forget_quality_insecure(model, &self.forget, &self.patterns, &self.vocab)
            }
            Task::Api => eval::forget_quality_api(model, &self.fq_eval),
        }
    }

    pub fn utility(&self, model: &LmModel) -> Result<f64> {
        eval::model_utility(model, &self.utility_eval, &self.forget_ids)
    }

    pub fn evaluate(&self, model: &LmModel) -> Result<(f64, f64)> {
        Ok((self.forget_quality(model)?, self.utility(model)?))
    }
}

fn stage_wall(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Generates a task dataset into `out`, refusing a non-empty directory
/// without `force`. Returns the content hash.
pub fn cmd_gen_data(task: Task, seed: u64, n: usize, out: &Path, force: bool) -> Result<String> {
    let start = Instant::now();
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        return Err(CoreError::Config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let dataset = data::generate(task, seed, n)?;
    dataset.save(out)?;
    let hash = dataset.meta.content_hash.clone();
    append_row(
        out,
        &ManifestRow {
            stage: "gen-data".into(),
            wall_secs: stage_wall(start),
            config: serde_json::json!({
                "task": task.name(), "seed": seed, "n": n,
            }),
            inputs: vec![],
            outputs: vec!["records.jsonl".into(), "meta.json".into()],
        },
    )?;
    Ok(hash)
}

fn load_dataset(data_dir: &Path) -> Result<TaskDataset> {
    TaskDataset::load(data_dir)
}

fn training_examples(dataset: &TaskDataset, vocab: &Vocab, split: Split) -> Result<Vec<UnlearnExample>> {
    dataset.examples(split, vocab, false)
}

/// Pretrains a fresh model on the retain corpus until the held-out utility
/// target is reached (or the epoch budget runs out), then checkpoints it.
pub fn cmd_pretrain(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<f64> {
    let start = Instant::now();
    let dataset = load_dataset(data_dir)?;
    let vocab = Vocab::standard();
    let retain = training_examples(&dataset, &vocab, Split::Retain)?;
    let assets = EvalAssets::from_dataset(&dataset)?;
    let mut model = LmModel::new(cfg.model.lm_config())?;

    let per_round = MemorizeConfig {
        epochs: 1,
        lr: cfg.pretrain.lr,
        batch_size: cfg.pretrain.batch_size,
        weight_decay: 0.01,
        seed: cfg.pretrain.seed,
        gate: 0.0,
    };
    let mut utility = 0.0;
    for round in 0..cfg.pretrain.epochs {
        let round_cfg = MemorizeConfig {
            seed: cfg.pretrain.seed.wrapping_add(round as u64),
            ..per_round.clone()
        };
        pretrain(&mut model, &retain, &round_cfg)?;
        utility = assets.utility(&model)?;
        if utility >= cfg.pretrain.target_utility {
            break;
        }
    }
    let ckpt = out_dir.join("pretrained.ckpt");
    save_checkpoint(&model, Stage::Pretrained, &ckpt)?;
    append_row(
        out_dir,
        &ManifestRow {
            stage: "pretrain".into(),
            wall_secs: stage_wall(start),
            config: serde_json::to_value(&cfg.pretrain)?,
            inputs: vec![(
                data_dir.display().to_string(),
                dataset.meta.content_hash.clone(),
            )],
            outputs: vec!["pretrained.ckpt".into()],
        },
    )?;
    Ok(utility)
}

/// Contaminates a pretrained model with the forget set (1:9 retain mixing).
pub fn cmd_memorize(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<f64> {
    let start = Instant::now();
    let dataset = load_dataset(data_dir)?;
    let (mut model, stage) = load_checkpoint(&out_dir.join("pretrained.ckpt"))?;
    if stage != Stage::Pretrained {
        return Err(pipeline_order_error("memorize", "pretrained", stage));
    }
    let vocab = Vocab::standard();
    let forget = training_examples(&dataset, &vocab, Split::Forget)?;
    let retain = training_examples(&dataset, &vocab, Split::Retain)?;
    let mcfg = MemorizeConfig {
        epochs: cfg.memorize.epochs,
        lr: cfg.memorize.lr,
        batch_size: cfg.memorize.batch_size,
        weight_decay: 0.01,
        seed: cfg.memorize.seed,
        gate: cfg.memorize.gate,
    };
    let report = memorize(&mut model, &forget, &retain, &mcfg)?;
    let ckpt = out_dir.join("memorized.ckpt");
    save_checkpoint(&model, Stage::Memorized, &ckpt)?;
    append_row(
        out_dir,
        &ManifestRow {
            stage: "memorize".into(),
            wall_secs: stage_wall(start),
            config: serde_json::to_value(&cfg.memorize)?,
            inputs: vec![(
                data_dir.display().to_string(),
                dataset.meta.content_hash.clone(),
            )],
            outputs: vec!["memorized.ckpt".into()],
        },
    )?;
    Ok(report.exact_match.unwrap_or(0.0))
}

fn pipeline_order_error(stage: &str, needed: &str, got: Stage) -> CoreError {
    CoreError::Config(format!(
        "pipeline order violation: {stage} needs a {needed} checkpoint, found {got:?}"
    ))
}

/// Whether an error is a pipeline-order violation (for exit-code mapping).
pub fn is_pipeline_order(err: &CoreError) -> bool {
    matches!(err, CoreError::Config(msg) if msg.starts_with("pipeline order violation"))
}

/// Per-run manifest line.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub lr: f64,
    pub lr_overridden: bool,
    pub epochs: usize,
    pub loss: String,
    pub flat_sign: String,
    pub top_p: f64,
    pub alpha: f64,
    pub per_epoch_loss: Vec<f64>,
    pub checkpoints: Vec<String>,
    pub wall_secs: f64,
    pub reference_hash: String,
}

/// Builds the train config for a method from the experiment config.
pub fn train_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        method,
        lr: cfg.unlearn.lr_for(method),
        batch_size: cfg.unlearn.batch_size,
        epochs: cfg.unlearn.epochs,
        beta: cfg.unlearn.beta,
        flat_divergence: Default::default(),
        flat_sign: FlatSignMode::parse(&cfg.unlearn.flat_sign)?,
        surgery: SurgeryConfig {
            top_p: cfg.unlearn.top_p,
            alpha: cfg.unlearn.alpha,
        },
        loss_kind: TargetLossKind::parse(&cfg.unlearn.loss)?,
        weight_decay: 0.01,
        seed,
    })
}

/// Runs one unlearning configuration from the staged checkpoint, writing
/// per-epoch checkpoints under `{method}/{seed}/` plus a run manifest.
pub fn cmd_unlearn(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    ckpt_dir: &Path,
    method: Method,
    seed: u64,
) -> Result<PathBuf> {
    let start = Instant::now();
    let dataset = load_dataset(data_dir)?;
    let task = dataset.meta.task;
    let (mut model, _stage) = load_and_check_start(ckpt_dir, task)?;
    let vocab = Vocab::standard();
    let with_template = matches!(method, Method::Dpo | Method::Flat);
    let forget = dataset.examples(Split::Forget, &vocab, with_template)?;

    let tcfg = train_config(cfg, method, seed)?;

    // the target cache is built from the entry model and persisted so later
    // stages can verify it never drifted
    let cache = if method == Method::Prod {
        let cache_path = ckpt_dir.join(format!(
            "targets-p{}-a{}.cache",
            tcfg.surgery.top_p, tcfg.surgery.alpha
        ));
        let cache = if cache_path.exists() {
            CachedTargets::load_verified(&cache_path, &model.hash())?
        } else {
            let examples: Vec<(String, Vec<usize>, Vec<usize>)> = forget
                .iter()
                .map(|e| (e.id.clone(), e.prompt.clone(), e.continuation.clone()))
                .collect();
            let built = CachedTargets::build(&model, &examples, &tcfg.surgery)?;
            built.save(&cache_path)?;
            append_row(
                ckpt_dir,
                &ManifestRow {
                    stage: "build-targets".into(),
                    wall_secs: 0.0,
                    config: serde_json::to_value(tcfg.surgery)?,
                    inputs: vec![("model".into(), model.hash())],
                    outputs: vec![cache_path
                        .file_name()
                        .unwrap()
                        .to_string_lossy()
                        .into_owned()],
                },
            )?;
            built
        };
        Some(cache)
    } else {
        None
    };

    let run = unlearn(&mut model, &forget, &tcfg, cache.as_ref())?;

    let run_dir = ckpt_dir.join(method.name()).join(seed.to_string());
    std::fs::create_dir_all(&run_dir)?;
    let mut ckpt_names = Vec::new();
    for (i, ckpt) in run.checkpoints.iter().enumerate() {
        let name = format!("epoch{}.ckpt", i + 1);
        save_checkpoint(ckpt, Stage::Unlearned, &run_dir.join(&name))?;
        ckpt_names.push(name);
    }
    let record = RunRecord {
        method: method.name().into(),
        seed,
        lr: tcfg.lr,
        lr_overridden: tcfg.lr_is_override(),
        epochs: tcfg.epochs,
        loss: tcfg.loss_kind.name().into(),
        flat_sign: tcfg.flat_sign.name().into(),
        top_p: tcfg.surgery.top_p,
        alpha: tcfg.surgery.alpha,
        per_epoch_loss: run.per_epoch_loss.clone(),
        checkpoints: ckpt_names.clone(),
        wall_secs: stage_wall(start),
        reference_hash: run.reference_hash.clone(),
    };
    std::fs::write(
        run_dir.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    append_row(
        ckpt_dir,
        &ManifestRow {
            stage: "unlearn".into(),
            wall_secs: record.wall_secs,
            config: serde_json::to_value(&record)?,
            inputs: vec![(
                data_dir.display().to_string(),
                dataset.meta.content_hash.clone(),
            )],
            outputs: ckpt_names
                .iter()
                .map(|n| format!("{}/{}/{}", method.name(), seed, n))
                .chain([format!("{}/{}/run.json", method.name(), seed)])
                .collect(),
        },
    )?;
    Ok(run_dir)
}

/// The unlearning start checkpoint: the memorized model for tasks that
/// contaminate first, the pretrained model for the versioned-interface task
/// (whose habits come from pretraining itself).
fn load_and_check_start(ckpt_dir: &Path, task: Task) -> Result<(LmModel, Stage)> {
    let memorized = ckpt_dir.join("memorized.ckpt");
    let pretrained = ckpt_dir.join("pretrained.ckpt");
    match task {
        Task::Copyright | Task::Insecure => {
            if !memorized.exists() {
                return Err(CoreError::Config(format!(
                    "pipeline order violation: unlearn on the {} task needs a memorized checkpoint in {}",
                    task.name(),
                    ckpt_dir.display()
                )));
            }
            let (model, stage) = load_checkpoint(&memorized)?;
            if stage != Stage::Memorized {
                return Err(pipeline_order_error("unlearn", "memorized", stage));
            }
            Ok((model, stage))
        }
        Task::Api => {
            let (model, stage) = load_checkpoint(&pretrained)?;
            if stage != Stage::Pretrained {
                return Err(pipeline_order_error("unlearn", "pretrained", stage));
            }
            Ok((model, stage))
        }
    }
}

/// Evaluates every per-epoch checkpoint of one run into report rows.
pub fn cmd_eval(
    data_dir: &Path,
    ckpt_dir: &Path,
    method: Method,
    seed: u64,
    out_csv: &Path,
) -> Result<Vec<ReportRow>> {
    let dataset = load_dataset(data_dir)?;
    let assets = EvalAssets::from_dataset(&dataset)?;
    let run_dir = ckpt_dir.join(method.name()).join(seed.to_string());
    let record: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json"))?)?;
    let mut rows = Vec::new();
    for (i, name) in record.checkpoints.iter().enumerate() {
        let (model, _) = load_checkpoint(&run_dir.join(name))?;
        let (fq, util) = assets.evaluate(&model)?;
        rows.push(ReportRow {
            task: dataset.meta.task.name().into(),
            method: method.name().into(),
            seed,
            epoch: i + 1,
            forget_quality: fq,
            model_utility: util,
            attack_bleu_mean: None,
            attack_bleu_min: None,
            attack_bleu_max: None,
        });
    }
    eval::write_report_rows(out_csv, &rows)?;
    if let Some(dir) = out_csv.parent() {
        append_row(
            dir,
            &ManifestRow {
                stage: "eval".into(),
                wall_secs: 0.0,
                config: serde_json::json!({"method": method.name(), "seed": seed}),
                inputs: vec![(
                    data_dir.display().to_string(),
                    dataset.meta.content_hash.clone(),
                )],
                outputs: vec![out_csv
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned()],
            },
        )?;
    }
    Ok(rows)
}

/// Runs the prefix-injection attack over a run's checkpoints and rewrites
/// its report CSV with the attack columns filled. Checkpoints under the
/// utility floor keep empty attack columns (excluded, never scored).
pub fn cmd_attack(
    data_dir: &Path,
    ckpt_dir: &Path,
    method: Method,
    seed: u64,
    spec: &AttackSpec,
    baseline_utility: f64,
    report_csv: &Path,
) -> Result<Vec<ReportRow>> {
    let dataset = load_dataset(data_dir)?;
    let assets = EvalAssets::from_dataset(&dataset)?;
    let run_dir = ckpt_dir.join(method.name()).join(seed.to_string());
    let record: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json"))?)?;
    let mut rows = eval::read_report_rows(report_csv)?;
    for (i, name) in record.checkpoints.iter().enumerate() {
        let (model, _) = load_checkpoint(&run_dir.join(name))?;
        let row = rows
            .iter_mut()
            .find(|r| r.epoch == i + 1 && r.seed == seed && r.method == method.name())
            .ok_or_else(|| {
                CoreError::Metric(format!(
                    "report {} lacks a row for epoch {}",
                    report_csv.display(),
                    i + 1
                ))
            })?;
        let outcome = eval::prefix_attack(
            &model,
            &assets.forget,
            spec,
            row.model_utility,
            baseline_utility,
        )?;
        if let AttackOutcome::Scored { per_fraction } = outcome {
            let n = per_fraction.len() as f64;
            row.attack_bleu_mean = Some(per_fraction.iter().map(|f| f.mean).sum::<f64>() / n);
            row.attack_bleu_min = Some(
                per_fraction
                    .iter()
                    .map(|f| f.min)
                    .fold(f64::INFINITY, f64::min),
            );
            row.attack_bleu_max = Some(
                per_fraction
                    .iter()
                    .map(|f| f.max)
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
    }
    eval::write_report_rows(report_csv, &rows)?;
    Ok(rows)
}

/// Computes the dominance summary over a set of report CSVs.
pub fn cmd_pdr(reports: &[PathBuf], mode: PdrMode, out_csv: &Path) -> Result<Vec<PdrRow>> {
    if reports.is_empty() {
        return Err(CoreError::Config("no report files given".into()));
    }
    let mut points = Vec::new();
    let mut task = String::new();
    for path in reports {
        for row in eval::read_report_rows(path)? {
            task = row.task.clone();
            points.push(EvalPoint {
                method: row.method,
                epoch: row.epoch,
                forget_quality: row.forget_quality,
                model_utility: row.model_utility,
            });
        }
    }
    let scores = eval::pdr(&points, mode)?;
    let rows: Vec<PdrRow> = scores
        .into_iter()
        .map(|(method, pdr)| PdrRow {
            task: task.clone(),
            method,
            pdr,
        })
        .collect();
    eval::write_pdr_rows(out_csv, &rows)?;
    Ok(rows)
}

/// Merged summary: per-task, per-method, per-epoch means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub epoch: usize,
    pub seeds: usize,
    pub forget_quality_mean: f64,
    pub model_utility_mean: f64,
    pub attack_bleu_mean: Option<f64>,
}

/// Merges every report CSV in a directory into per-epoch seed means.
pub fn cmd_report(in_dir: &Path, out_csv: &Path) -> Result<Vec<SummaryRow>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(in_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "csv")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("report_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CoreError::Config(format!(
            "no report CSVs found in {}",
            in_dir.display()
        )));
    }
    let mut rows = Vec::new();
    for file in &files {
        rows.extend(eval::read_report_rows(file)?);
    }
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, usize), Vec<&ReportRow>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.task.clone(), row.method.clone(), row.epoch))
            .or_default()
            .push(row);
    }
    let mut out = Vec::new();
    for ((task, method, epoch), group) in groups {
        let n = group.len() as f64;
        let attack: Vec<f64> = group.iter().filter_map(|r| r.attack_bleu_mean).collect();
        out.push(SummaryRow {
            task,
            method,
            epoch,
            seeds: group.len(),
            forget_quality_mean: group.iter().map(|r| r.forget_quality).sum::<f64>() / n,
            model_utility_mean: group.iter().map(|r| r.model_utility).sum::<f64>() / n,
            attack_bleu_mean: if attack.is_empty() {
                None
            } else {
                Some(attack.iter().sum::<f64>() / attack.len() as f64)
            },
        });
    }
    if let Some(dir) = out_csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(out_csv)?;
    for row in &out {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(out)
}
