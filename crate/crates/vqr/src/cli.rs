//! Command-line surface.
//!
//! Every command reads the experiment configuration (`--config` TOML
//! file or the desk default), applies the `--seed` override, and
//! copies the effective configuration into its output directory.

use crate::config::{self, ExperimentConfig};
use crate::harness::{self, BoxplotAxis, HarnessError};
use crate::rephraser;
use crate::synthworld::{self, detokenize, tokenize, Dataset};
use crate::training::{self, Regime, RephraseSample, Strategy};
use crate::vqa::{self, QuestionInput, VqaModel};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "vqr",
    about = "Entropy-controlled rephrasing of visual questions on a synthetic shapes world",
    version
)]
pub struct Cli {
    /// Experiment configuration file (TOML); defaults to the built-in
    /// desk-scale configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the answer model on the training split and freeze it.
    TrainVqa {
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a rephraser with the likelihood loss only.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Frozen answer-model checkpoint directory.
        #[arg(long)]
        vqa: PathBuf,
        /// Target strategy: noise or sampling.
        #[arg(long)]
        strategy: String,
    },
    /// Train a rephraser from scratch with the joint loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
        #[arg(long)]
        strategy: String,
        /// Entropy-loss weight override.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fine-tune from a pretraining checkpoint with the joint loss.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
        #[arg(long)]
        strategy: String,
        /// Pretraining checkpoint directory to warm-start from.
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Rephrase one question and report the achieved entropy.
    Rephrase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
        /// Rephraser checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Scene id of the image.
        #[arg(long)]
        image: u32,
        /// Question text (whitespace-tokenized).
        #[arg(long)]
        question: String,
        /// Target entropy in nats.
        #[arg(long)]
        target_entropy: f64,
    },
    /// Evaluate labeled checkpoints over the delta grid.
    SweepDelta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
        /// Repeatable label=checkpoint-dir pairs.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// Fine-tune once per lambda in the grid and sweep each result.
    SweepLambda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
        #[arg(long)]
        pretrain: PathBuf,
    },
    /// Train and evaluate the sampling pipeline with and without
    /// encoder attention under identical seeds.
    AblateAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqa: PathBuf,
    },
    /// Export box-plot data from persisted raw records.
    ExportPlots {
        /// raw_records.jsonl from a sweep.
        #[arg(long)]
        raw: PathBuf,
        /// eg_minus_es or eg_minus_et.
        #[arg(long)]
        axis_mode: String,
    },
    /// Run the pinned-seed invariant suite.
    Verify,
}

fn load_effective_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => config::load_config(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_provenance(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    config::save_config(cfg, out_dir.join("config.toml"))
        .map_err(|e| HarnessError::Config(e.to_string()))
}

fn parse_strategy(s: &str) -> Result<Strategy, HarnessError> {
    match s {
        "noise" => Ok(Strategy::Noise),
        "sampling" => Ok(Strategy::Sampling),
        other => Err(HarnessError::Config(format!(
            "unknown strategy {other:?}; expected noise or sampling"
        ))),
    }
}

fn load_frozen_vqa(dir: &Path) -> Result<VqaModel, HarnessError> {
    let model = vqa::load_model(dir)?;
    if !model.is_frozen() {
        return Err(HarnessError::Config(format!(
            "answer model at {} is not frozen",
            dir.display()
        )));
    }
    Ok(model)
}

fn load_split(
    path: &Path,
    cfg: &ExperimentConfig,
) -> Result<(Dataset, Dataset), HarnessError> {
    let dataset = synthworld::read_dataset(path)?;
    harness::split_dataset(&dataset, cfg.eval_stride)
}

fn train_command(
    cli: &Cli,
    data: &Path,
    vqa_dir: &Path,
    regime: Regime,
    strategy: &str,
    lambda: Option<f64>,
    pretrain: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let cfg = load_effective_config(cli)?;
    let strategy = parse_strategy(strategy)?;
    let (train_ds, _) = load_split(data, &cfg)?;
    let vqa_model = load_frozen_vqa(vqa_dir)?;
    let mut run_cfg = cfg
        .train
        .regime_config(regime, strategy, cfg.seed, pretrain);
    if let Some(l) = lambda {
        run_cfg.entropy_weight = l;
    }
    write_provenance(&cfg, &cli.out)?;
    let out = training::train(&train_ds, &vqa_model, &run_cfg, &cli.out)?;
    let last = out.loss_log.last().expect("at least one iteration");
    println!(
        "trained {} {} for {} iterations; final loss {:.6} (vqg {:.6}, ent {:.6})",
        regime, strategy, run_cfg.max_iterations, last.total, last.l_vqg, last.l_ent
    );
    println!("checkpoint: {}", out.checkpoint_dir.display());
    Ok(())
}

fn parse_model_args(models: &[String]) -> Result<Vec<(String, PathBuf)>, HarnessError> {
    models
        .iter()
        .map(|m| {
            m.split_once('=')
                .map(|(label, path)| (label.to_string(), PathBuf::from(path)))
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "model argument {m:?} must have the form label=checkpoint-dir"
                    ))
                })
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_effective_config(&cli)?;
            write_provenance(&cfg, &cli.out)?;
            let dataset = synthworld::generate_dataset(cfg.seed, &cfg.world)?;
            let path = cli.out.join("dataset.jsonl");
            synthworld::write_dataset(&dataset, &path)?;
            println!(
                "wrote {} scenes and {} questions to {}",
                dataset.scenes.len(),
                dataset.questions.len(),
                path.display()
            );
            Ok(())
        }
        Command::TrainVqa { data } => {
            let cfg = load_effective_config(&cli)?;
            let (train_ds, _) = load_split(data, &cfg)?;
            let mut vqa_cfg = cfg.vqa.clone();
            vqa_cfg.seed = cfg.seed;
            write_provenance(&cfg, &cli.out)?;
            let (mut model, stats) = vqa::train_vqa(&train_ds, &vqa_cfg)?;
            model.freeze();
            vqa::save_model(&model, &cli.out, Some(&stats))?;
            std::fs::write(
                cli.out.join("stats.json"),
                serde_json::to_string_pretty(&stats)
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
            )?;
            println!(
                "answer model frozen; held-out mean KL {:.4} nats over {} questions",
                stats.heldout_mean_kl, stats.heldout_count
            );
            println!("checkpoint: {}", cli.out.display());
            Ok(())
        }
        Command::Pretrain {
            data,
            vqa,
            strategy,
        } => train_command(&cli, data, vqa, Regime::Pretrain, strategy, None, None),
        Command::Train {
            data,
            vqa,
            strategy,
            lambda,
        } => train_command(&cli, data, vqa, Regime::Scratch, strategy, *lambda, None),
        Command::Finetune {
            data,
            vqa,
            strategy,
            pretrain,
            lambda,
        } => train_command(
            &cli,
            data,
            vqa,
            Regime::Finetune,
            strategy,
            *lambda,
            Some(pretrain.clone()),
        ),
        Command::Rephrase {
            data,
            vqa: vqa_dir,
            model,
            image,
            question,
            target_entropy,
        } => {
            let dataset = synthworld::read_dataset(data)?;
            let vqa_model = load_frozen_vqa(vqa_dir)?;
            let loaded = rephraser::load_model(model)?;
            let scene = dataset.scene(*image).ok_or_else(|| {
                HarnessError::Config(format!("scene {image} not found in the dataset"))
            })?;
            let feats = synthworld::scene_to_features(scene);
            let tokens = tokenize(
                question,
                &dataset.vocab.question,
                loaded.model.config.max_length,
            )?;
            let (source_dist, _) = vqa_model.predict(&feats, QuestionInput::Tokens(&tokens))?;
            let source_entropy = vqa::entropy(&source_dist);
            let mut sample = RephraseSample::new(*image, tokens, source_entropy);
            sample.target_entropy = Some(*target_entropy);
            let filled =
                training::rephrase_batch(&loaded.model, &vqa_model, &dataset, &[sample])?;
            let s = &filled[0];
            let generated = s.generated.as_ref().unwrap();
            let generated_entropy = s.generated_entropy.unwrap();
            println!("source entropy: {source_entropy:.4}");
            println!(
                "rephrased question: {}",
                detokenize(generated, &dataset.vocab.question)
            );
            println!("generated entropy: {generated_entropy:.4}");
            println!(
                "absolute entropy error: {:.4}",
                (target_entropy - generated_entropy).abs()
            );
            Ok(())
        }
        Command::SweepDelta {
            data,
            vqa: vqa_dir,
            models,
        } => {
            let cfg = load_effective_config(&cli)?;
            let (_, eval_ds) = load_split(data, &cfg)?;
            let vqa_model = load_frozen_vqa(vqa_dir)?;
            let models = parse_model_args(models)?;
            write_provenance(&cfg, &cli.out)?;
            let out = harness::run_delta_sweep(
                &models,
                &eval_ds,
                &vqa_model,
                &cfg.sweep.delta_grid,
                &cli.out,
            )?;
            println!(
                "swept {} deltas x {} models over {} eval questions",
                cfg.sweep.delta_grid.len(),
                models.len(),
                eval_ds.questions.len()
            );
            println!("rows: {}", out.rows.len());
            println!("wrote {}", cli.out.join("sweep.csv").display());
            Ok(())
        }
        Command::SweepLambda {
            data,
            vqa: vqa_dir,
            pretrain,
        } => {
            let cfg = load_effective_config(&cli)?;
            let (train_ds, eval_ds) = load_split(data, &cfg)?;
            let vqa_model = load_frozen_vqa(vqa_dir)?;
            write_provenance(&cfg, &cli.out)?;
            let out = harness::run_lambda_sweep(
                &train_ds,
                &eval_ds,
                &vqa_model,
                pretrain,
                &cfg.sweep.lambda_grid,
                &cfg.sweep.delta_grid,
                &cfg.train,
                cfg.seed,
                &cli.out,
            )?;
            println!(
                "swept {} lambdas x {} deltas; rows: {}",
                cfg.sweep.lambda_grid.len(),
                cfg.sweep.delta_grid.len(),
                out.rows.len()
            );
            println!("wrote {}", cli.out.join("lambda_sweep.csv").display());
            Ok(())
        }
        Command::AblateAttention { data, vqa: vqa_dir } => {
            let cfg = load_effective_config(&cli)?;
            let (train_ds, eval_ds) = load_split(data, &cfg)?;
            let vqa_model = load_frozen_vqa(vqa_dir)?;
            write_provenance(&cfg, &cli.out)?;
            let out = harness::run_attention_ablation(
                &train_ds,
                &eval_ds,
                &vqa_model,
                &cfg.sweep.delta_grid,
                &cfg.train,
                cfg.seed,
                &cli.out,
            )?;
            println!("ablation rows: {}", out.sweep.rows.len());
            for row in &out.error_deltas {
                println!(
                    "delta {:+.3}: pretrain error change {:+.4}, finetune error change {:+.4}",
                    row.delta, row.pretrain_error_delta, row.finetune_error_delta
                );
            }
            println!("wrote {}", cli.out.join("ablation.csv").display());
            Ok(())
        }
        Command::ExportPlots { raw, axis_mode } => {
            let axis = BoxplotAxis::parse(axis_mode)?;
            let records = harness::read_raw_records(raw)?;
            std::fs::create_dir_all(&cli.out)?;
            let values = cli.out.join("boxplot.csv");
            let summary = cli.out.join("boxplot_summary.csv");
            harness::export_boxplot_csv(&records, axis, &values, &summary)?;
            println!("wrote {} and {}", values.display(), summary.display());
            Ok(())
        }
        Command::Verify => {
            let lines = harness::run_verification()?;
            for line in &lines {
                println!("ok: {line}");
            }
            println!("verification passed ({} checks)", lines.len());
            Ok(())
        }
    }
}
