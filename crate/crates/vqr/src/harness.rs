//! Experiment orchestration: the delta sweep, the lambda sweep, the
//! attention ablation, plot-data export, and a self-check suite.
//!
//! Sweeps run single-threaded in a fixed order against read-only
//! checkpoints, so identical seeds reproduce every output file byte
//! for byte. Each sweep writes a CSV of aggregate rows (columns in the
//! order delta, label, entropy-error mean, entropy-error std, BLEU-4,
//! CIDEr, METEOR-lite, ROUGE-L, diversity, retained count) plus a JSON
//! Lines file of per-sample raw records for plotting.

use crate::config::{ExperimentConfig, TrainDefaults};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::rephraser::{self, RephraserError, RephraserModel};
use crate::synthworld::{detokenize, Dataset, WorldError};
use crate::training::{
    self, rephrase_batch, RephraseSample, Regime, Strategy, TrainError, TrainOutput,
};
use crate::vqa::{VqaError, VqaModel};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Vqa(#[from] VqaError),
    #[error(transparent)]
    Rephraser(#[from] RephraserError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scene-level split: every `stride`-th scene (1-based within the
/// scene order) goes to the evaluation split, the rest to training.
pub fn split_dataset(dataset: &Dataset, stride: usize) -> Result<(Dataset, Dataset), HarnessError> {
    if stride < 2 {
        return Err(HarnessError::Config("split stride must be at least 2".into()));
    }
    let mut train = Dataset {
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        scenes: Vec::new(),
        questions: Vec::new(),
    };
    let mut eval = train.clone();
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let bucket = if (i + 1) % stride == 0 { &mut eval } else { &mut train };
        bucket.scenes.push(scene.clone());
    }
    for q in &dataset.questions {
        if eval.scenes.iter().any(|s| s.scene_id == q.scene_id) {
            eval.questions.push(q.clone());
        } else {
            train.questions.push(q.clone());
        }
    }
    if train.questions.is_empty() || eval.questions.is_empty() {
        return Err(HarnessError::Config(
            "split produced an empty train or eval set".into(),
        ));
    }
    Ok((train, eval))
}

/// Evaluation samples with measured source entropies, in dataset order.
pub fn prepare_eval_samples(
    eval: &Dataset,
    vqa: &VqaModel,
) -> Result<Vec<RephraseSample>, HarnessError> {
    let entropies = training::compute_source_entropies(eval, vqa)?;
    Ok(eval
        .questions
        .iter()
        .zip(entropies)
        .map(|(q, e)| RephraseSample::new(q.scene_id, q.tokens.clone(), e))
        .collect())
}

/// Targets for one delta: `E_T = E_S + delta`, excluding samples whose
/// raw sum would be negative and capping at the maximum entropy.
pub fn build_delta_samples(
    samples: &[RephraseSample],
    delta: f64,
    max_entropy: f64,
) -> Vec<RephraseSample> {
    samples
        .iter()
        .filter(|s| s.source_entropy + delta >= 0.0)
        .map(|s| {
            let mut t = s.clone();
            t.target_entropy = Some((s.source_entropy + delta).min(max_entropy));
            t
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub label: String,
    pub report: MetricsReport,
    pub retained: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub delta: f64,
    pub label: String,
    pub scene_id: u32,
    pub source_entropy: f64,
    pub target_entropy: f64,
    pub generated_entropy: f64,
    pub source_tokens: Vec<u32>,
    pub generated_tokens: Vec<u32>,
    pub source_text: String,
    pub generated_text: String,
}

#[derive(Debug, Default)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub raw: Vec<RawRecord>,
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "delta,label,entropy_error_mean,entropy_error_std,bleu4,cider,meteor_lite,rouge_l,diversity,retained"
    )?;
    for row in rows {
        let r = &row.report;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            row.delta,
            row.label,
            r.mean_abs_entropy_error,
            r.std_abs_entropy_error,
            r.bleu4,
            r.cider,
            r.meteor_lite,
            r.rouge_l,
            r.diversity,
            row.retained
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_raw_records(raw: &[RawRecord], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in raw {
        writeln!(
            f,
            "{}",
            serde_json::to_string(record).map_err(|e| HarnessError::Domain(e.to_string()))?
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_raw_records(path: &Path) -> Result<Vec<RawRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            HarnessError::Domain(format!("raw record line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

/// Evaluate one model over one delta grid cell by cell.
fn sweep_one_model(
    label: &str,
    model: &RephraserModel,
    eval: &Dataset,
    vqa: &VqaModel,
    eval_samples: &[RephraseSample],
    delta_grid: &[f64],
    out: &mut SweepOutput,
) -> Result<(), HarnessError> {
    let max_entropy = vqa.config.max_entropy();
    for &delta in delta_grid {
        let targets = build_delta_samples(eval_samples, delta, max_entropy);
        if targets.len() < 2 {
            return Err(HarnessError::Domain(format!(
                "delta {delta} for {label} retains {} samples; too few to report",
                targets.len()
            )));
        }
        let filled = rephrase_batch(model, vqa, eval, &targets)?;
        let report = metrics::compute_report(&filled)?;
        out.rows.push(SweepRow {
            delta,
            label: label.to_string(),
            retained: filled.len(),
            report,
        });
        for s in &filled {
            out.raw.push(RawRecord {
                delta,
                label: label.to_string(),
                scene_id: s.scene_id,
                source_entropy: s.source_entropy,
                target_entropy: s.target_entropy.unwrap(),
                generated_entropy: s.generated_entropy.unwrap(),
                source_tokens: s.source.tokens.clone(),
                generated_tokens: s.generated.as_ref().unwrap().tokens.clone(),
                source_text: detokenize(&s.source, &eval.vocab.question),
                generated_text: detokenize(s.generated.as_ref().unwrap(), &eval.vocab.question),
            });
        }
    }
    Ok(())
}

/// Delta sweep over labeled checkpoints. Writes `sweep.csv` and
/// `raw_records.jsonl` into `out_dir`.
pub fn run_delta_sweep(
    models: &[(String, PathBuf)],
    eval: &Dataset,
    vqa: &VqaModel,
    delta_grid: &[f64],
    out_dir: &Path,
) -> Result<SweepOutput, HarnessError> {
    if models.is_empty() {
        return Err(HarnessError::Config("no models given to sweep".into()));
    }
    let mut loaded = Vec::with_capacity(models.len());
    for (label, path) in models {
        if !path.join(crate::checkpoint::MANIFEST_FILE).exists() {
            return Err(HarnessError::Config(format!(
                "checkpoint for {label} not found at {}",
                path.display()
            )));
        }
        loaded.push((label.clone(), rephraser::load_model(path)?.model));
    }
    let eval_samples = prepare_eval_samples(eval, vqa)?;
    let mut out = SweepOutput::default();
    for &delta in delta_grid {
        for (label, model) in &loaded {
            sweep_one_model(label, model, eval, vqa, &eval_samples, &[delta], &mut out)?;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_sweep_csv(&out.rows, &out_dir.join("sweep.csv"))?;
    write_raw_records(&out.raw, &out_dir.join("raw_records.jsonl"))?;
    Ok(out)
}

/// One finetune per lambda from the shared pretraining checkpoint,
/// each followed by a full delta sweep. Rows are labeled by lambda and
/// every run checkpoints into its own subdirectory.
pub fn run_lambda_sweep(
    train_ds: &Dataset,
    eval: &Dataset,
    vqa: &VqaModel,
    pretrain_checkpoint: &Path,
    lambda_grid: &[f64],
    delta_grid: &[f64],
    defaults: &TrainDefaults,
    seed: u64,
    out_dir: &Path,
) -> Result<SweepOutput, HarnessError> {
    if !pretrain_checkpoint.join(crate::checkpoint::MANIFEST_FILE).exists() {
        return Err(HarnessError::Config(format!(
            "pretrain checkpoint not found at {}",
            pretrain_checkpoint.display()
        )));
    }
    let eval_samples = prepare_eval_samples(eval, vqa)?;
    let mut out = SweepOutput::default();
    let mut per_lambda: Vec<(String, RephraserModel)> = Vec::new();
    for (i, &lambda) in lambda_grid.iter().enumerate() {
        let mut config = defaults.regime_config(
            Regime::Finetune,
            Strategy::Sampling,
            seed,
            Some(pretrain_checkpoint.to_path_buf()),
        );
        config.entropy_weight = lambda;
        let run_dir = out_dir.join(format!("lambda_{i}"));
        let trained = training::train(train_ds, vqa, &config, &run_dir)?;
        per_lambda.push((format!("{lambda}"), trained.model));
    }
    for &delta in delta_grid {
        for (label, model) in &per_lambda {
            sweep_one_model(label, model, eval, vqa, &eval_samples, &[delta], &mut out)?;
        }
    }
    std::fs::create_dir_all(out_dir)?;
    write_sweep_csv(&out.rows, &out_dir.join("lambda_sweep.csv"))?;
    write_raw_records(&out.raw, &out_dir.join("raw_records.jsonl"))?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationDeltaRow {
    pub delta: f64,
    /// Pretrain entropy-error mean without attention minus with.
    pub pretrain_error_delta: f64,
    /// Finetune entropy-error mean without attention minus with.
    pub finetune_error_delta: f64,
}

#[derive(Debug)]
pub struct AblationOutput {
    pub sweep: SweepOutput,
    pub error_deltas: Vec<AblationDeltaRow>,
}

/// Paired attention ablation: the sampling pipeline trained with and
/// without encoder attention under identical seeds and data order.
/// Rows follow the `Pretrain w/o A`, `Pretrain`, `FT w/o A`, `FT`
/// labeling, paired per delta.
pub fn run_attention_ablation(
    train_ds: &Dataset,
    eval: &Dataset,
    vqa: &VqaModel,
    delta_grid: &[f64],
    defaults: &TrainDefaults,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationOutput, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut variants: Vec<(String, RephraserModel, u64)> = Vec::new();
    for (use_attention, tag) in [(false, "wo_attention"), (true, "with_attention")] {
        let mut base = defaults.clone();
        base.use_attention = use_attention;
        let pre_dir = out_dir.join(format!("pretrain_{tag}"));
        let pre = training::train(
            train_ds,
            vqa,
            &base.regime_config(Regime::Pretrain, Strategy::Sampling, seed, None),
            &pre_dir,
        )?;
        let ft_dir = out_dir.join(format!("finetune_{tag}"));
        let ft = training::train(
            train_ds,
            vqa,
            &base.regime_config(
                Regime::Finetune,
                Strategy::Sampling,
                seed,
                Some(pre_dir.clone()),
            ),
            &ft_dir,
        )?;
        let suffix = if use_attention { "" } else { " w/o A" };
        variants.push((format!("Pretrain{suffix}"), pre.model, pre.meta.seed));
        variants.push((format!("FT{suffix}"), ft.model, ft.meta.seed));
    }
    let seeds: Vec<u64> = variants.iter().map(|(_, _, s)| *s).collect();
    if seeds.iter().any(|&s| s != seeds[0]) {
        return Err(HarnessError::Config(
            "ablation variants were trained with different seeds".into(),
        ));
    }

    let eval_samples = prepare_eval_samples(eval, vqa)?;
    let order = ["Pretrain w/o A", "Pretrain", "FT w/o A", "FT"];
    let mut out = SweepOutput::default();
    for &delta in delta_grid {
        for label in order {
            let (_, model, _) = variants
                .iter()
                .find(|(l, _, _)| l == label)
                .expect("all four variants trained");
            sweep_one_model(label, model, eval, vqa, &eval_samples, &[delta], &mut out)?;
        }
    }

    let mut error_deltas = Vec::with_capacity(delta_grid.len());
    for &delta in delta_grid {
        let err_of = |label: &str| -> f64 {
            out.rows
                .iter()
                .find(|r| r.delta == delta && r.label == label)
                .map(|r| r.report.mean_abs_entropy_error)
                .expect("row present for every label and delta")
        };
        error_deltas.push(AblationDeltaRow {
            delta,
            pretrain_error_delta: err_of("Pretrain w/o A") - err_of("Pretrain"),
            finetune_error_delta: err_of("FT w/o A") - err_of("FT"),
        });
    }

    write_sweep_csv(&out.rows, &out_dir.join("ablation.csv"))?;
    write_raw_records(&out.raw, &out_dir.join("raw_records.jsonl"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join("ablation_deltas.csv"),
    )?);
    writeln!(f, "delta,pretrain_error_delta,finetune_error_delta")?;
    for row in &error_deltas {
        writeln!(
            f,
            "{},{},{}",
            row.delta, row.pretrain_error_delta, row.finetune_error_delta
        )?;
    }
    f.flush()?;
    Ok(AblationOutput {
        sweep: out,
        error_deltas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxplotAxis {
    /// Signed difference between generated and source entropy.
    EgMinusEs,
    /// Signed difference between generated and target entropy.
    EgMinusEt,
}

impl BoxplotAxis {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "eg_minus_es" => Ok(Self::EgMinusEs),
            "eg_minus_et" => Ok(Self::EgMinusEt),
            other => Err(HarnessError::Domain(format!(
                "unknown axis mode {other:?}; expected eg_minus_es or eg_minus_et"
            ))),
        }
    }

    fn value(self, r: &RawRecord) -> f64 {
        match self {
            Self::EgMinusEs => r.generated_entropy - r.source_entropy,
            Self::EgMinusEt => r.generated_entropy - r.target_entropy,
        }
    }
}

/// Linear-interpolation quantile of an already sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Export per-sample box-plot values (one CSV row per raw record) plus
/// a quartile summary sidecar per `(delta, label)` group.
pub fn export_boxplot_csv(
    raw: &[RawRecord],
    axis: BoxplotAxis,
    values_path: &Path,
    summary_path: &Path,
) -> Result<(), HarnessError> {
    if raw.is_empty() {
        return Err(HarnessError::Domain("no raw records to export".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(values_path)?);
    writeln!(f, "delta,label,value")?;
    for r in raw {
        writeln!(f, "{},{},{}", r.delta, r.label, axis.value(r))?;
    }
    f.flush()?;

    // Group in first-appearance order to keep output deterministic.
    let mut groups: Vec<((String, f64), Vec<f64>)> = Vec::new();
    for r in raw {
        let key = (r.label.clone(), r.delta);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vs)) => vs.push(axis.value(r)),
            None => groups.push((key, vec![axis.value(r)])),
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(summary_path)?);
    writeln!(f, "delta,label,n,min,q1,median,q3,max,mean")?;
    for ((label, delta), mut vs) in groups {
        vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = vs.iter().sum::<f64>() / vs.len() as f64;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            delta,
            label,
            vs.len(),
            vs[0],
            quantile(&vs, 0.25),
            quantile(&vs, 0.5),
            quantile(&vs, 0.75),
            vs[vs.len() - 1],
            mean
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Run the standard pipeline for one seed: generate data, split, train
/// and freeze the answer model, pretrain, then finetune. Returns what
/// the sweeps need.
pub struct PipelineArtifacts {
    pub train_ds: Dataset,
    pub eval_ds: Dataset,
    pub vqa: VqaModel,
    pub pretrain_dir: PathBuf,
    pub finetune_dir: PathBuf,
    pub pretrain: TrainOutput,
    pub finetune: TrainOutput,
}

pub fn run_standard_pipeline(
    config: &ExperimentConfig,
    strategy: Strategy,
    seed: u64,
    out_dir: &Path,
) -> Result<PipelineArtifacts, HarnessError> {
    let dataset = crate::synthworld::generate_dataset(seed, &config.world)?;
    let (train_ds, eval_ds) = split_dataset(&dataset, config.eval_stride)?;
    let mut vqa_cfg = config.vqa.clone();
    vqa_cfg.seed = seed;
    let (vqa, _stats) = training::train_frozen_vqa(&train_ds, &vqa_cfg)?;
    let pretrain_dir = out_dir.join("pretrain");
    let pretrain = training::train(
        &train_ds,
        &vqa,
        &config
            .train
            .regime_config(Regime::Pretrain, strategy, seed, None),
        &pretrain_dir,
    )?;
    let finetune_dir = out_dir.join("finetune");
    let finetune = training::train(
        &train_ds,
        &vqa,
        &config.train.regime_config(
            Regime::Finetune,
            strategy,
            seed,
            Some(pretrain_dir.clone()),
        ),
        &finetune_dir,
    )?;
    Ok(PipelineArtifacts {
        train_ds,
        eval_ds,
        vqa,
        pretrain_dir,
        finetune_dir,
        pretrain,
        finetune,
    })
}

/// Pinned-seed self-check suite behind the `verify` command. Returns
/// one line per passed check; the first failure aborts with an error.
pub fn run_verification() -> Result<Vec<String>, HarnessError> {
    use crate::graph::{entropy_slice, Graph};
    use crate::nn::rng_stream;
    use crate::rephraser::{entropy_loss, gumbel_softmax, total_loss, vqg_loss};
    use crate::synthworld::{generate_dataset, write_dataset_to, QuestionTokens, WorldConfig};
    use rand::Rng;

    let mut lines = Vec::new();
    let fail = |msg: String| HarnessError::Verification(msg);

    // Entropy unit checks and bounds.
    for k in [2usize, 4, 16] {
        let h = entropy_slice(&vec![1.0 / k as f64; k]);
        if (h - (k as f64).ln()).abs() > 1e-9 {
            return Err(fail(format!("uniform entropy over {k} gave {h}")));
        }
    }
    if entropy_slice(&[0.0, 1.0, 0.0]) != 0.0 {
        return Err(fail("one-hot entropy is not exactly zero".into()));
    }
    let mut rng = rng_stream(0, "verify.entropy", 0);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=16);
        let mut p: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        let h = entropy_slice(&p);
        if !(0.0..=(k as f64).ln() + 1e-9).contains(&h) {
            return Err(fail(format!("entropy {h} out of bounds for {k} entries")));
        }
    }
    lines.push("entropy units and bounds".into());

    // Gumbel-Softmax behavior.
    let soft = gumbel_softmax(&[0.4, 0.3, 0.0], 0.7, &[0.02, -0.01, 0.0])
        .map_err(|e| fail(e.to_string()))?;
    if (soft.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(fail("gumbel softmax row does not sum to one".into()));
    }
    let peaked =
        gumbel_softmax(&[1.0, 0.9, 0.2], 0.01, &[0.0; 3]).map_err(|e| fail(e.to_string()))?;
    if peaked[0] <= 0.999 {
        return Err(fail(format!(
            "temperature 0.01 with a 0.1 logit gap peaked only to {}",
            peaked[0]
        )));
    }
    lines.push("gumbel softmax normalization and low-temperature saturation".into());

    // Loss identities.
    if total_loss(2.5, 123.0, 0.0) != 2.5 || total_loss(2.0, 3.0, 1.0) != 5.0 {
        return Err(fail("total loss identity violated".into()));
    }
    if entropy_loss(0.3, 1.7) != entropy_loss(1.7, 0.3) {
        return Err(fail("entropy loss is not symmetric".into()));
    }
    let mut confident = vec![vec![-800.0; 5]; 2];
    let target = QuestionTokens {
        tokens: vec![1, 2],
        max_length: 12,
    };
    confident[0][1] = 0.0;
    confident[1][2] = 0.0;
    if vqg_loss(&confident, &target).map_err(|e| fail(e.to_string()))? != 0.0 {
        return Err(fail("probability-one targets must give zero loss".into()));
    }
    lines.push("loss identities".into());

    // Delta-filter properties on random sample sets.
    let max_e = (16.0f64).ln();
    let mut rng = rng_stream(0, "verify.filter", 0);
    for _ in 0..3 {
        let samples: Vec<RephraseSample> = (0..300)
            .map(|_| {
                RephraseSample::new(
                    0,
                    QuestionTokens {
                        tokens: vec![4, 2],
                        max_length: 12,
                    },
                    rng.gen_range(0.0..max_e),
                )
            })
            .collect();
        let mut prev = 0usize;
        for delta in [-1.0, -0.5, -0.1, 0.0, 0.4, 1.0] {
            let kept = build_delta_samples(&samples, delta, max_e);
            let expected = samples
                .iter()
                .filter(|s| s.source_entropy + delta >= 0.0)
                .count();
            if kept.len() != expected {
                return Err(fail(format!("delta filter miscounted at {delta}")));
            }
            if kept.len() < prev {
                return Err(fail("retained counts are not monotone in delta".into()));
            }
            if delta >= 0.0 && kept.len() != samples.len() {
                return Err(fail("nonnegative delta must retain everything".into()));
            }
            prev = kept.len();
        }
    }
    lines.push("delta filter exactness, monotonicity, and full retention".into());

    // Dataset determinism and round trip.
    let world = WorldConfig {
        scene_count: 10,
        questions_per_scene: 4,
        ..WorldConfig::default()
    };
    let d1 = generate_dataset(123, &world)?;
    let d2 = generate_dataset(123, &world)?;
    let mut b1 = Vec::new();
    let mut b2 = Vec::new();
    write_dataset_to(&d1, &mut b1)?;
    write_dataset_to(&d2, &mut b2)?;
    if b1 != b2 {
        return Err(fail("dataset generation is not byte-deterministic".into()));
    }
    let back = crate::synthworld::read_dataset_from(std::io::Cursor::new(b1))?;
    if back != d1 {
        return Err(fail("dataset round trip lost information".into()));
    }
    lines.push("dataset determinism and round trip".into());

    // Hard/one-hot soft prediction equivalence for every length.
    let vqa = {
        let mut m = crate::vqa::VqaModel::new(
            crate::vqa::VqaConfig {
                question_vocab_size: d1.vocab.question.len(),
                answer_vocab_size: d1.vocab.answer.len(),
                feature_dim: crate::synthworld::FEATURE_DIM,
                embed_dim: 10,
                hidden_dim: 12,
                attention_dim: 8,
                mlp_hidden_dim: 12,
            },
            11,
        );
        m.freeze();
        m
    };
    let image = crate::synthworld::scene_to_features(&d1.scenes[1]);
    let vocab = d1.vocab.question.len();
    let mut rng = rng_stream(0, "verify.onehot", 0);
    for len in 1..=d1.config.max_question_len {
        let mut tokens: Vec<u32> = (0..len - 1)
            .map(|_| rng.gen_range(3..vocab as u32))
            .collect();
        tokens.push(crate::synthworld::END_TOKEN);
        let q = QuestionTokens {
            tokens: tokens.clone(),
            max_length: d1.config.max_question_len,
        };
        let (hard, _) = vqa.predict(&image, crate::vqa::QuestionInput::Tokens(&q))?;
        let soft_rows: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; vocab];
                row[t as usize] = 1.0;
                row
            })
            .collect();
        let (soft, _) = vqa.predict(&image, crate::vqa::QuestionInput::Soft(&soft_rows))?;
        let diff = hard
            .probs()
            .iter()
            .zip(soft.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if diff > 1e-6 {
            return Err(fail(format!("one-hot equivalence broke at length {len}")));
        }
    }
    lines.push("hard/one-hot prediction equivalence at every length".into());

    // Entropy gradient against central finite differences.
    let mut rng = rng_stream(0, "verify.grad", 0);
    for _ in 0..32 {
        let k = 6;
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let eval = |ls: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.var(ndarray::Array2::from_shape_vec((1, k), ls.to_vec()).unwrap());
            let p = g.softmax_rows(x);
            let h = g.entropy_rows(p);
            g.value(h)[[0, 0]]
        };
        let mut g = Graph::new();
        let x = g.var(ndarray::Array2::from_shape_vec((1, k), logits.clone()).unwrap());
        let p = g.softmax_rows(x);
        let h = g.entropy_rows(p);
        let m = g.mean_all(h);
        let grads = g.backward(m);
        let analytic = grads.get(x).unwrap();
        for i in 0..k {
            let mut plus = logits.clone();
            plus[i] += 1e-5;
            let mut minus = logits.clone();
            minus[i] -= 1e-5;
            let numeric = (eval(&plus) - eval(&minus)) / 2e-5;
            let a = analytic[[0, i]];
            let denom = numeric.abs().max(a.abs()).max(1e-8);
            if (a - numeric).abs() / denom > 1e-4 {
                return Err(fail(format!(
                    "entropy gradient mismatch: analytic {a}, numeric {numeric}"
                )));
            }
        }
    }
    lines.push("entropy gradient matches finite differences".into());

    // A miniature training run: frozen digest invariance, no Gumbel
    // evaluations under pretraining, and reproducible checkpoints.
    let (train_ds, _eval_ds) = split_dataset(&d1, 5)?;
    let digest_before = vqa.digest();
    let tmp = std::env::temp_dir().join(format!("vqr-verify-{}", std::process::id()));
    let defaults = TrainDefaults {
        max_iterations: 15,
        batch_size: 8,
        embed_dim: 10,
        hidden_dim: 12,
        max_length: 14,
        ..TrainDefaults::default()
    };
    let run = |seed: u64, dir: &Path| -> Result<_, HarnessError> {
        Ok(training::train(
            &train_ds,
            &vqa,
            &defaults.regime_config(Regime::Pretrain, Strategy::Sampling, seed, None),
            dir,
        )?)
    };
    let a = run(7, &tmp.join("a"))?;
    let b = run(7, &tmp.join("b"))?;
    let scratch = training::train(
        &train_ds,
        &vqa,
        &defaults.regime_config(Regime::Scratch, Strategy::Sampling, 7, None),
        &tmp.join("c"),
    )?;
    std::fs::remove_dir_all(&tmp).ok();
    if a.gumbel_path_evals != 0 {
        return Err(fail("pretraining evaluated the gumbel path".into()));
    }
    if scratch.gumbel_path_evals == 0 {
        return Err(fail("scratch training never evaluated the gumbel path".into()));
    }
    if a.final_digest != b.final_digest {
        return Err(fail("identical seeds produced different checkpoints".into()));
    }
    if vqa.digest() != digest_before {
        return Err(fail("training mutated the frozen answer model".into()));
    }
    lines.push("training determinism, pretraining gumbel counter, frozen invariance".into());

    Ok(lines)
}
