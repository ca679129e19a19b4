use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unlearn_cli::config::ExperimentConfig;
use unlearn_cli::{exit_code, pipeline};
use unlearn_core::data::Task;
use unlearn_core::eval::PdrMode;
use unlearn_core::trainers::Method;
use unlearn_core::Result;

/// Desk-scale unlearning laboratory for tiny language models.
#[derive(Parser)]
#[command(name = "unlearn", version, about)]
struct Cli {
    /// Experiment config file (JSON); defaults to $UNLEARN_LAB_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DirArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        /// Forget records (or packages for the versioned-interface task).
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the base model on the retain corpus.
    Pretrain {
        #[command(flatten)]
        dirs: DirArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contaminate the pretrained model with the forget set.
    Memorize {
        #[command(flatten)]
        dirs: DirArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one unlearning method from the staged checkpoint.
    Unlearn {
        #[command(flatten)]
        dirs: DirArgs,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Target loss for the surgery method: ce, kl, or js.
        #[arg(long)]
        loss: Option<String>,
        /// Sign mode for flat: variational-standard or paper-literal.
        #[arg(long)]
        flat_sign: Option<String>,
    },
    /// Evaluate a run's per-epoch checkpoints into a report CSV.
    Eval {
        #[command(flatten)]
        dirs: DirArgs,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
    },
    /// Score the prefix-injection attack into an existing report CSV.
    Attack {
        #[command(flatten)]
        dirs: DirArgs,
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: u64,
        /// Utility of the original (pre-unlearning) model.
        #[arg(long)]
        baseline_utility: f64,
    },
    /// Dominance-ratio summary over report CSVs.
    Pdr {
        /// Report CSV files.
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// point-level or best-point.
        #[arg(long, default_value = "point-level")]
        mode: String,
    },
    /// Merge report CSVs into per-epoch seed means.
    Report {
        /// Directory of report CSVs.
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn report_csv_path(reports: &std::path::Path, task: &str, method: &str, seed: u64) -> PathBuf {
    reports.join(format!("report_{task}_{method}_seed{seed}.csv"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            task,
            seed,
            n,
            out,
            force,
        } => {
            let task = Task::parse(&task)?;
            let hash = pipeline::cmd_gen_data(task, seed, n, &out, force)?;
            println!("{hash}");
        }
        Command::Pretrain {
            dirs,
            epochs,
            lr,
            seed,
        } => {
            apply_dirs(&mut cfg, &dirs);
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(l) = lr {
                cfg.pretrain.lr = l;
            }
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            cfg.validate()?;
            let utility = pipeline::cmd_pretrain(&cfg, &cfg.data_dir.clone(), &cfg.ckpt_dir.clone())?;
            println!("pretrained utility {utility:.4}");
        }
        Command::Memorize {
            dirs,
            epochs,
            lr,
            seed,
        } => {
            apply_dirs(&mut cfg, &dirs);
            if let Some(e) = epochs {
                cfg.memorize.epochs = e;
            }
            if let Some(l) = lr {
                cfg.memorize.lr = l;
            }
            if let Some(s) = seed {
                cfg.memorize.seed = s;
            }
            cfg.validate()?;
            let exact = pipeline::cmd_memorize(&cfg, &cfg.data_dir.clone(), &cfg.ckpt_dir.clone())?;
            println!("memorized exact match {exact:.4}");
        }
        Command::Unlearn {
            dirs,
            method,
            seed,
            epochs,
            lr,
            top_p,
            alpha,
            loss,
            flat_sign,
        } => {
            apply_dirs(&mut cfg, &dirs);
            let method = Method::parse(&method)?;
            if let Some(e) = epochs {
                cfg.unlearn.epochs = e;
            }
            if let Some(l) = lr {
                match method {
                    Method::Ga => cfg.unlearn.lr_ga = l,
                    Method::Dpo => cfg.unlearn.lr_dpo = l,
                    Method::Npo => cfg.unlearn.lr_npo = l,
                    Method::Flat => cfg.unlearn.lr_flat = l,
                    Method::Prod => cfg.unlearn.lr_prod = l,
                }
            }
            if let Some(p) = top_p {
                cfg.unlearn.top_p = p;
            }
            if let Some(a) = alpha {
                cfg.unlearn.alpha = a;
            }
            if let Some(l) = loss {
                cfg.unlearn.loss = l;
            }
            if let Some(f) = flat_sign {
                cfg.unlearn.flat_sign = f;
            }
            cfg.validate()?;
            let run_dir = pipeline::cmd_unlearn(
                &cfg,
                &cfg.data_dir.clone(),
                &cfg.ckpt_dir.clone(),
                method,
                seed,
            )?;
            println!("run written to {}", run_dir.display());
        }
        Command::Eval { dirs, method, seed } => {
            apply_dirs(&mut cfg, &dirs);
            cfg.validate()?;
            let method = Method::parse(&method)?;
            let dataset = unlearn_core::data::TaskDataset::load(&cfg.data_dir)?;
            let out = report_csv_path(
                &cfg.report_dir,
                dataset.meta.task.name(),
                method.name(),
                seed,
            );
            let rows = pipeline::cmd_eval(&cfg.data_dir, &cfg.ckpt_dir, method, seed, &out)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Attack {
            dirs,
            method,
            seed,
            baseline_utility,
        } => {
            apply_dirs(&mut cfg, &dirs);
            cfg.validate()?;
            let method = Method::parse(&method)?;
            let dataset = unlearn_core::data::TaskDataset::load(&cfg.data_dir)?;
            let csv = report_csv_path(
                &cfg.report_dir,
                dataset.meta.task.name(),
                method.name(),
                seed,
            );
            let rows = pipeline::cmd_attack(
                &cfg.data_dir,
                &cfg.ckpt_dir,
                method,
                seed,
                &cfg.attack,
                baseline_utility,
                &csv,
            )?;
            let scored = rows.iter().filter(|r| r.attack_bleu_mean.is_some()).count();
            println!("{scored} checkpoints scored -> {}", csv.display());
        }
        Command::Pdr { reports, out, mode } => {
            let mode = match mode.as_str() {
                "point-level" => PdrMode::PointLevel,
                "best-point" => PdrMode::BestPoint,
                other => {
                    return Err(unlearn_core::CoreError::Config(format!(
                        "unknown dominance mode {other:?}"
                    )))
                }
            };
            let rows = pipeline::cmd_pdr(&reports, mode, &out)?;
            for row in rows {
                println!("{} {} {:.4}", row.task, row.method, row.pdr);
            }
        }
        Command::Report { r#in, out } => {
            let rows = pipeline::cmd_report(&r#in, &out)?;
            println!("{} summary rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn apply_dirs(cfg: &mut ExperimentConfig, dirs: &DirArgs) {
    if let Some(d) = &dirs.data {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &dirs.ckpt {
        cfg.ckpt_dir = d.clone();
    }
    if let Some(d) = &dirs.reports {
        cfg.report_dir = d.clone();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
