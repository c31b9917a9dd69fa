//! Training strategies, regimes, and the optimization loop.
//!
//! A training run owns one rephraser model and a frozen answer model.
//! Targets come from one of two strategies: Noise keeps the source as
//! the target question and perturbs its entropy by bounded uniform
//! noise; Sampling draws a different question of the same scene and
//! measures its entropy with the frozen answer model. Regimes differ
//! in initialization and loss weighting: pretraining runs with the
//! likelihood loss alone, scratch and fine-tuning add the entropy loss
//! (fine-tuning warm-starts from a pretraining checkpoint, optimizer
//! state included).
//!
//! Every random draw derives from the run seed, so a repeated run
//! reproduces the parameter trajectory bit for bit.

use crate::checkpoint::CheckpointError;
use crate::graph::Graph;
use crate::nn::{rng_stream, Adam};
use crate::rephraser::{
    self, LoadedRephraser, RephraserConfig, RephraserError, RephraserMeta, RephraserModel,
};
use crate::synthworld::{scene_to_features, Dataset, QuestionTokens};
use crate::vqa::{self, entropy, QuestionInput, VqaError, VqaModel, VqaStepInput};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("training aborted at iteration {iteration}: loss is not finite")]
    NonFinite { iteration: u32 },
    #[error("frozen model integrity violated: {0}")]
    FrozenViolation(String),
    #[error(transparent)]
    Vqa(#[from] VqaError),
    #[error(transparent)]
    Rephraser(#[from] RephraserError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One rephrasing unit: a source question with its measured entropy,
/// the target pair set by a strategy or sweep, and the generated
/// output once produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseSample {
    pub scene_id: u32,
    pub source: QuestionTokens,
    pub source_entropy: f64,
    pub target: Option<QuestionTokens>,
    pub target_entropy: Option<f64>,
    pub generated: Option<QuestionTokens>,
    pub generated_entropy: Option<f64>,
}

impl RephraseSample {
    pub fn new(scene_id: u32, source: QuestionTokens, source_entropy: f64) -> Self {
        Self {
            scene_id,
            source,
            source_entropy,
            target: None,
            target_entropy: None,
            generated: None,
            generated_entropy: None,
        }
    }
}

/// Map from scene id to that scene's question indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageQuestionIndex {
    by_scene: BTreeMap<u32, Vec<usize>>,
}

impl ImageQuestionIndex {
    pub fn build(dataset: &Dataset) -> Result<Self, TrainError> {
        let by_scene = dataset.questions_by_scene();
        for (scene_id, idxs) in &by_scene {
            if idxs.is_empty() {
                return Err(TrainError::Config(format!(
                    "scene {scene_id} has no questions"
                )));
            }
            if dataset.scene(*scene_id).is_none() {
                return Err(TrainError::Config(format!(
                    "question index references unknown scene {scene_id}"
                )));
            }
        }
        Ok(Self { by_scene })
    }

    pub fn questions_for(&self, scene_id: u32) -> &[usize] {
        self.by_scene
            .get(&scene_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrain,
    Scratch,
    Finetune,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Pretrain => write!(f, "pretrain"),
            Regime::Scratch => write!(f, "scratch"),
            Regime::Finetune => write!(f, "finetune"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Noise,
    Sampling,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Noise => write!(f, "noise"),
            Strategy::Sampling => write!(f, "sampling"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRegimeConfig {
    pub regime: Regime,
    pub strategy: Strategy,
    pub entropy_weight: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: u32,
    pub seed: u64,
    pub noise_bound: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_length: usize,
    pub use_attention: bool,
}

impl Default for TrainRegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Scratch,
            strategy: Strategy::Sampling,
            entropy_weight: 0.5,
            batch_size: 32,
            learning_rate: 0.002,
            max_iterations: 3000,
            seed: 0,
            noise_bound: 1.0,
            gumbel_temperature: 0.5,
            straight_through: true,
            pretrain_checkpoint: None,
            embed_dim: 32,
            hidden_dim: 64,
            max_length: 20,
            use_attention: true,
        }
    }
}

impl TrainRegimeConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.regime == Regime::Finetune && self.pretrain_checkpoint.is_none() {
            return Err(TrainError::Config(
                "finetune requires a pretrain checkpoint path".into(),
            ));
        }
        self.loss_config().validate()?;
        if self.batch_size == 0 || self.max_iterations == 0 {
            return Err(TrainError::Config(
                "batch size and iteration count must be positive".into(),
            ));
        }
        if self.noise_bound < 0.0 {
            return Err(TrainError::Config("noise bound must be >= 0".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> crate::rephraser::LossConfig {
        crate::rephraser::LossConfig {
            entropy_weight: self.entropy_weight,
            gumbel_temperature: self.gumbel_temperature,
            straight_through: self.straight_through,
        }
    }

    /// The entropy-loss weight actually used: pretraining always runs
    /// with weight zero.
    pub fn effective_entropy_weight(&self) -> f64 {
        match self.regime {
            Regime::Pretrain => 0.0,
            _ => self.entropy_weight,
        }
    }
}

/// Target entropy under the noise strategy: source entropy plus the
/// drawn noise, clamped into the valid entropy range.
pub fn noise_target_entropy(source_entropy: f64, epsilon: f64, max_entropy: f64) -> f64 {
    (source_entropy + epsilon).clamp(0.0, max_entropy)
}

/// Noise strategy: the target question is the source question and the
/// target entropy is the source entropy shifted by `U(-bound, bound)`.
pub fn make_noise_target(
    sample: &RephraseSample,
    noise_bound: f64,
    max_entropy: f64,
    rng: &mut ChaCha12Rng,
) -> RephraseSample {
    let epsilon = if noise_bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-noise_bound..noise_bound)
    };
    let mut out = sample.clone();
    out.target = Some(sample.source.clone());
    out.target_entropy = Some(noise_target_entropy(
        sample.source_entropy,
        epsilon,
        max_entropy,
    ));
    out
}

/// Sampling strategy: the target question is drawn uniformly from the
/// scene's other questions and its entropy measured with the frozen
/// answer model. A scene whose question list collapses to the source
/// alone is a strategy error, never a silent fallback.
pub fn make_sampling_target(
    sample: &RephraseSample,
    index: &ImageQuestionIndex,
    dataset: &Dataset,
    vqa: &VqaModel,
    rng: &mut ChaCha12Rng,
) -> Result<RephraseSample, TrainError> {
    let candidates: Vec<usize> = index
        .questions_for(sample.scene_id)
        .iter()
        .copied()
        .filter(|&qi| dataset.questions[qi].tokens.tokens != sample.source.tokens)
        .collect();
    if candidates.is_empty() {
        return Err(TrainError::Strategy(format!(
            "scene {} has no alternative question to sample",
            sample.scene_id
        )));
    }
    let chosen = candidates[rng.gen_range(0..candidates.len())];
    let target = dataset.questions[chosen].tokens.clone();
    let scene = dataset
        .scene(sample.scene_id)
        .ok_or_else(|| TrainError::Config(format!("unknown scene {}", sample.scene_id)))?;
    let image = scene_to_features(scene);
    let (dist, _) = vqa.predict(&image, QuestionInput::Tokens(&target))?;
    let mut out = sample.clone();
    out.target = Some(target);
    out.target_entropy = Some(entropy(&dist));
    Ok(out)
}

/// Measure the source entropy of every question in the dataset with
/// the frozen answer model, in dataset order.
pub fn compute_source_entropies(dataset: &Dataset, vqa: &VqaModel) -> Result<Vec<f64>, TrainError> {
    let mut feats: BTreeMap<u32, crate::synthworld::ImageFeatures> = BTreeMap::new();
    for scene in &dataset.scenes {
        feats.insert(scene.scene_id, scene_to_features(scene));
    }
    let mut out = Vec::with_capacity(dataset.questions.len());
    for q in &dataset.questions {
        let (dist, _) = vqa.predict(&feats[&q.scene_id], QuestionInput::Tokens(&q.tokens))?;
        out.push(entropy(&dist));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u32,
    pub l_vqg: f64,
    pub l_ent: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub model: RephraserModel,
    pub checkpoint_dir: PathBuf,
    pub loss_log: Vec<LossRow>,
    pub final_digest: String,
    /// Number of Gumbel decoding passes taken; stays zero whenever the
    /// entropy loss is inactive.
    pub gumbel_path_evals: u64,
    pub meta: RephraserMeta,
}

pub fn write_loss_log(rows: &[LossRow], path: &Path) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,l_vqg,l_ent,total")?;
    for row in rows {
        writeln!(f, "{},{},{},{}", row.iteration, row.l_vqg, row.l_ent, row.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Train a rephraser under the given regime and strategy, writing the
/// checkpoint (with optimizer state) and the per-iteration loss log
/// into `out_dir`.
pub fn train(
    dataset: &Dataset,
    vqa: &VqaModel,
    config: &TrainRegimeConfig,
    out_dir: &Path,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if !vqa.is_frozen() {
        return Err(TrainError::Config("answer model must be frozen".into()));
    }
    if dataset.questions.is_empty() {
        return Err(TrainError::Config("dataset has no questions".into()));
    }
    let digest_before = vqa.digest();
    let max_entropy = vqa.config.max_entropy();

    let model_config = RephraserConfig {
        question_vocab_size: dataset.vocab.question.len(),
        answer_vocab_size: dataset.vocab.answer.len(),
        feature_dim: crate::synthworld::FEATURE_DIM,
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        max_length: config.max_length,
        use_attention: config.use_attention,
    };
    let (mut model, mut adam) = match config.regime {
        Regime::Finetune => {
            let path = config.pretrain_checkpoint.as_ref().unwrap();
            if !path.join(crate::checkpoint::MANIFEST_FILE).exists() {
                return Err(TrainError::Config(format!(
                    "pretrain checkpoint not found at {}",
                    path.display()
                )));
            }
            let LoadedRephraser {
                model,
                meta,
                optimizer,
            } = rephraser::load_model(path)?;
            if meta.config != model_config {
                return Err(TrainError::Config(
                    "pretrain checkpoint was built for a different model configuration".into(),
                ));
            }
            let mut adam = Adam::new(config.learning_rate, model.params());
            if let Some(state) = optimizer {
                adam.step_count = state.step_count;
                for (i, (_, m, v)) in state.moments.into_iter().enumerate() {
                    adam.m[i] = m;
                    adam.v[i] = v;
                }
            }
            (model, adam)
        }
        _ => {
            let model = RephraserModel::new(model_config.clone(), config.seed);
            let adam = Adam::new(config.learning_rate, model.params());
            (model, adam)
        }
    };

    let scene_pos: BTreeMap<u32, usize> = dataset
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scene_id, i))
        .collect();
    let features: Vec<Rc<Array2<f64>>> = dataset
        .scenes
        .iter()
        .map(|s| Rc::new(scene_to_features(s).data))
        .collect();
    let source_entropies = compute_source_entropies(dataset, vqa)?;
    let index = ImageQuestionIndex::build(dataset)?;

    // Per-scene candidate lists for the sampling strategy, excluding
    // token-identical questions.
    let sampling_candidates: Vec<Vec<usize>> = dataset
        .questions
        .iter()
        .map(|q| {
            index
                .questions_for(q.scene_id)
                .iter()
                .copied()
                .filter(|&qi| dataset.questions[qi].tokens.tokens != q.tokens.tokens)
                .collect()
        })
        .collect();
    if config.strategy == Strategy::Sampling {
        if let Some(bad) = sampling_candidates.iter().position(Vec::is_empty) {
            return Err(TrainError::Strategy(format!(
                "scene {} has no alternative question to sample",
                dataset.questions[bad].scene_id
            )));
        }
    }

    let lambda = config.effective_entropy_weight();
    let mut batch_rng = rng_stream(config.seed, "train.batch", 0);
    let mut strategy_rng = rng_stream(config.seed, "train.strategy", 0);
    let mut gumbel_rng = rng_stream(config.seed, "train.gumbel", 0);
    let mut loss_log = Vec::with_capacity(config.max_iterations as usize);
    let mut gumbel_path_evals = 0u64;

    for iteration in 0..config.max_iterations {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.questions.len()))
            .collect();

        // Strategy targets for this visitation (noise is redrawn each
        // time a sample is visited).
        let mut targets: Vec<QuestionTokens> = Vec::with_capacity(batch.len());
        let mut target_entropies: Vec<f64> = Vec::with_capacity(batch.len());
        for &qi in &batch {
            match config.strategy {
                Strategy::Noise => {
                    let eps = if config.noise_bound == 0.0 {
                        0.0
                    } else {
                        strategy_rng.gen_range(-config.noise_bound..config.noise_bound)
                    };
                    targets.push(dataset.questions[qi].tokens.clone());
                    target_entropies.push(noise_target_entropy(
                        source_entropies[qi],
                        eps,
                        max_entropy,
                    ));
                }
                Strategy::Sampling => {
                    let cands = &sampling_candidates[qi];
                    let chosen = cands[strategy_rng.gen_range(0..cands.len())];
                    targets.push(dataset.questions[chosen].tokens.clone());
                    target_entropies.push(source_entropies[chosen]);
                }
            }
        }

        let mut g = Graph::new();
        let bind = model.bind(&mut g, true);
        let vqa_bind = vqa.bind(&mut g, false);
        let feats = Rc::new(
            batch
                .iter()
                .map(|&qi| features[scene_pos[&dataset.questions[qi].scene_id]].as_ref().clone())
                .collect::<Vec<_>>(),
        );
        let sources: Vec<&[u32]> = batch
            .iter()
            .map(|&qi| dataset.questions[qi].tokens.tokens.as_slice())
            .collect();
        let mut e_t_norm = Array2::zeros((batch.len(), 1));
        for (b, &e) in target_entropies.iter().enumerate() {
            e_t_norm[[b, 0]] = e / max_entropy;
        }
        let hidden = model.encode_graph(&mut g, &bind, vqa, &vqa_bind, &feats, &sources, &e_t_norm);
        let e_t_node = g.constant(e_t_norm.clone());

        // Likelihood loss over the teacher-forced pass.
        let target_slices: Vec<&[u32]> = targets.iter().map(|t| t.tokens.as_slice()).collect();
        let step_logits =
            model.decode_teacher_forced_graph(&mut g, &bind, hidden, e_t_node, &target_slices);
        let max_len = target_slices.iter().map(|t| t.len()).max().unwrap();
        let mut acc: Option<crate::graph::NodeId> = None;
        for (t, &logits) in step_logits.iter().enumerate() {
            let ids: Vec<usize> = target_slices
                .iter()
                .map(|row| row.get(t).map(|&x| x as usize).unwrap_or(0))
                .collect();
            let lsm = g.log_softmax_rows(logits);
            let picked = g.pick_per_row(lsm, Rc::new(ids));
            let step_term = if target_slices.iter().all(|row| t < row.len()) {
                picked
            } else {
                let mut mask = Array2::zeros((batch.len(), 1));
                for (b, row) in target_slices.iter().enumerate() {
                    if t < row.len() {
                        mask[[b, 0]] = 1.0;
                    }
                }
                let m = g.constant(mask);
                g.mul(picked, m)
            };
            acc = Some(match acc {
                None => step_term,
                Some(prev) => g.add(prev, step_term),
            });
        }
        let _ = max_len;
        let log_lik_sum = acc.expect("at least one decoding step");
        let mut inv_len = Array2::zeros((batch.len(), 1));
        for (b, row) in target_slices.iter().enumerate() {
            inv_len[[b, 0]] = -1.0 / row.len() as f64;
        }
        let neg_inv = g.constant(inv_len);
        let per_sample_vqg = g.mul(log_lik_sum, neg_inv);
        let l_vqg_node = g.mean_all(per_sample_vqg);

        // Entropy loss over the free-running Gumbel pass.
        let (loss_node, l_vqg_val, l_ent_val) = if lambda > 0.0 {
            gumbel_path_evals += 1;
            let decode = model.decode_gumbel_graph(
                &mut g,
                &bind,
                hidden,
                e_t_node,
                config.gumbel_temperature,
                config.straight_through,
                &mut gumbel_rng,
            );
            let steps: Vec<VqaStepInput> = decode
                .soft_rows
                .iter()
                .enumerate()
                .map(|(t, &rows)| {
                    let all_active = decode.lengths.iter().all(|&l| t < l);
                    let mask = if all_active {
                        None
                    } else {
                        let mut m = Array2::zeros((batch.len(), 1));
                        for (b, &l) in decode.lengths.iter().enumerate() {
                            if t < l {
                                m[[b, 0]] = 1.0;
                            }
                        }
                        Some(Rc::new(m))
                    };
                    VqaStepInput::Soft { rows, mask }
                })
                .collect();
            let vqa_out = vqa.forward_graph(&mut g, &vqa_bind, &feats, &steps);
            let generated_entropy = g.entropy_rows(vqa_out.probs);
            let mut e_t_raw = Array2::zeros((batch.len(), 1));
            for (b, &e) in target_entropies.iter().enumerate() {
                e_t_raw[[b, 0]] = e;
            }
            let e_t_raw = g.constant(e_t_raw);
            let diff = g.sub(e_t_raw, generated_entropy);
            let sq = g.square(diff);
            let l_ent_node = g.mean_all(sq);
            let weighted = g.scale(l_ent_node, lambda);
            let total = g.add(l_vqg_node, weighted);
            (
                total,
                g.value(l_vqg_node)[[0, 0]],
                g.value(l_ent_node)[[0, 0]],
            )
        } else {
            (l_vqg_node, g.value(l_vqg_node)[[0, 0]], 0.0)
        };

        let total_val = g.value(loss_node)[[0, 0]];
        if !total_val.is_finite() {
            return Err(TrainError::NonFinite { iteration });
        }
        loss_log.push(LossRow {
            iteration,
            l_vqg: l_vqg_val,
            l_ent: l_ent_val,
            total: total_val,
        });
        let grads = g.backward(loss_node);
        adam.step(model.params_mut(), &bind, &grads);
    }

    let digest_after = vqa.digest();
    if digest_after != digest_before {
        return Err(TrainError::FrozenViolation(format!(
            "answer model digest changed from {digest_before} to {digest_after}"
        )));
    }

    let meta = RephraserMeta {
        config: model_config,
        entropy_weight: lambda,
        gumbel_temperature: config.gumbel_temperature,
        straight_through: config.straight_through,
        regime: config.regime.to_string(),
        strategy: config.strategy.to_string(),
        seed: config.seed,
    };
    std::fs::create_dir_all(out_dir)?;
    rephraser::save_model(&model, out_dir, &meta, Some(&adam))?;
    write_loss_log(&loss_log, &out_dir.join("loss_log.csv"))?;
    let final_digest = model.digest();
    Ok(TrainOutput {
        model,
        checkpoint_dir: out_dir.to_path_buf(),
        loss_log,
        final_digest,
        gumbel_path_evals,
        meta,
    })
}

/// Greedy-rephrase every sample and measure the generated entropy with
/// the frozen answer model. The answer model digest is asserted
/// unchanged afterwards.
pub fn rephrase_batch(
    model: &RephraserModel,
    vqa: &VqaModel,
    dataset: &Dataset,
    samples: &[RephraseSample],
) -> Result<Vec<RephraseSample>, TrainError> {
    if !vqa.is_frozen() {
        return Err(TrainError::Config("answer model must be frozen".into()));
    }
    let digest_before = vqa.digest();
    let mut feats: BTreeMap<u32, crate::synthworld::ImageFeatures> = BTreeMap::new();
    for scene in &dataset.scenes {
        feats.insert(scene.scene_id, scene_to_features(scene));
    }
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let target_entropy = sample.target_entropy.ok_or_else(|| {
            TrainError::Config("sample is missing its target entropy".into())
        })?;
        let image = feats
            .get(&sample.scene_id)
            .ok_or_else(|| TrainError::Config(format!("unknown scene {}", sample.scene_id)))?;
        let hidden = model.encode(vqa, image, &sample.source, target_entropy)?;
        let generated = model.decode_greedy(&hidden);
        let (dist, _) = vqa.predict(image, QuestionInput::Tokens(&generated))?;
        let mut filled = sample.clone();
        filled.generated = Some(generated);
        filled.generated_entropy = Some(entropy(&dist));
        out.push(filled);
    }
    let digest_after = vqa.digest();
    if digest_after != digest_before {
        return Err(TrainError::FrozenViolation(format!(
            "answer model digest changed from {digest_before} to {digest_after}"
        )));
    }
    Ok(out)
}

/// Convenience used by tests and the verification suite: a trained,
/// frozen answer model over an in-memory dataset.
pub fn train_frozen_vqa(
    dataset: &Dataset,
    config: &vqa::VqaTrainConfig,
) -> Result<(VqaModel, vqa::VqaTrainStats), TrainError> {
    let (mut model, stats) = vqa::train_vqa(dataset, config)?;
    model.freeze();
    Ok((model, stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheckReport {
    /// `(analytic, numeric, relative error)` per probed coordinate.
    pub coords: Vec<(f64, f64, f64)>,
    pub max_relative_error: f64,
}

/// Compare analytic gradients of the joint loss against central finite
/// differences on a miniature model (question vocabulary 8, hidden 16),
/// probing random coordinates of the decoder output projection.
///
/// The Gumbel noise is fixed across evaluations (same derived stream),
/// straight-through is off, and everything runs in 64-bit arithmetic,
/// so the loss is smooth in the probed coordinates.
pub fn gradient_fidelity_check(num_coords: usize, seed: u64) -> GradientCheckReport {
    use crate::rephraser::RephraserConfig;
    use crate::vqa::VqaConfig;

    let question_vocab = 8usize;
    let answer_vocab = 6usize;
    let feature_dim = 5usize;
    let regions = 4usize;
    let lambda = 1.0;
    let tau = 0.5;

    let mut vqa_model = VqaModel::new(
        VqaConfig {
            question_vocab_size: question_vocab,
            answer_vocab_size: answer_vocab,
            feature_dim,
            embed_dim: 6,
            hidden_dim: 8,
            attention_dim: 6,
            mlp_hidden_dim: 8,
        },
        seed,
    );
    vqa_model.freeze();
    let model = RephraserModel::new(
        RephraserConfig {
            question_vocab_size: question_vocab,
            answer_vocab_size: answer_vocab,
            feature_dim,
            embed_dim: 6,
            hidden_dim: 16,
            max_length: 8,
            use_attention: true,
        },
        seed.wrapping_add(1),
    );

    let mut data_rng = rng_stream(seed, "gradcheck.data", 0);
    let batch = 2usize;
    let feats = Rc::new(
        (0..batch)
            .map(|_| {
                let mut f = Array2::zeros((regions, feature_dim));
                for r in 0..regions {
                    for d in 0..feature_dim {
                        f[[r, d]] = data_rng.gen_range(-1.0..1.0);
                    }
                }
                f
            })
            .collect::<Vec<_>>(),
    );
    let make_tokens = |rng: &mut ChaCha12Rng| -> Vec<u32> {
        let len = rng.gen_range(3..6);
        let mut t: Vec<u32> = (0..len)
            .map(|_| rng.gen_range(3..question_vocab as u32))
            .collect();
        t.push(crate::synthworld::END_TOKEN);
        t
    };
    let sources: Vec<Vec<u32>> = (0..batch).map(|_| make_tokens(&mut data_rng)).collect();
    let targets: Vec<Vec<u32>> = (0..batch).map(|_| make_tokens(&mut data_rng)).collect();
    let max_entropy = (answer_vocab as f64).ln();
    let target_entropies: Vec<f64> = (0..batch)
        .map(|_| data_rng.gen_range(0.0..max_entropy))
        .collect();

    // Joint loss with a fixed Gumbel noise stream; optionally returns
    // the analytic gradient of the decoder projection parameters.
    let evaluate = |model: &RephraserModel,
                    want_grads: bool|
     -> (f64, Option<(Array2<f64>, Array2<f64>)>) {
        let mut g = Graph::new();
        let bind = model.bind(&mut g, want_grads);
        let vqa_bind = vqa_model.bind(&mut g, false);
        let source_slices: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
        let mut e_t_norm = Array2::zeros((batch, 1));
        for (b, &e) in target_entropies.iter().enumerate() {
            e_t_norm[[b, 0]] = e / max_entropy;
        }
        let hidden = model.encode_graph(
            &mut g,
            &bind,
            &vqa_model,
            &vqa_bind,
            &feats,
            &source_slices,
            &e_t_norm,
        );
        let e_t_node = g.constant(e_t_norm);
        let target_slices: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
        let step_logits =
            model.decode_teacher_forced_graph(&mut g, &bind, hidden, e_t_node, &target_slices);
        let mut acc = None;
        for (t, &logits) in step_logits.iter().enumerate() {
            let ids: Vec<usize> = target_slices
                .iter()
                .map(|row| row.get(t).map(|&x| x as usize).unwrap_or(0))
                .collect();
            let lsm = g.log_softmax_rows(logits);
            let picked = g.pick_per_row(lsm, Rc::new(ids));
            let term = if target_slices.iter().all(|row| t < row.len()) {
                picked
            } else {
                let mut mask = Array2::zeros((batch, 1));
                for (b, row) in target_slices.iter().enumerate() {
                    if t < row.len() {
                        mask[[b, 0]] = 1.0;
                    }
                }
                let m = g.constant(mask);
                g.mul(picked, m)
            };
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term),
            });
        }
        let mut inv_len = Array2::zeros((batch, 1));
        for (b, row) in target_slices.iter().enumerate() {
            inv_len[[b, 0]] = -1.0 / row.len() as f64;
        }
        let neg_inv = g.constant(inv_len);
        let sum_node = acc.unwrap();
        let per_sample = g.mul(sum_node, neg_inv);
        let l_vqg = g.mean_all(per_sample);

        let mut gumbel_rng = rng_stream(seed, "gradcheck.gumbel", 0);
        let decode = model.decode_gumbel_graph(
            &mut g,
            &bind,
            hidden,
            e_t_node,
            tau,
            false,
            &mut gumbel_rng,
        );
        let steps: Vec<VqaStepInput> = decode
            .soft_rows
            .iter()
            .enumerate()
            .map(|(t, &rows)| {
                let all_active = decode.lengths.iter().all(|&l| t < l);
                let mask = if all_active {
                    None
                } else {
                    let mut m = Array2::zeros((batch, 1));
                    for (b, &l) in decode.lengths.iter().enumerate() {
                        if t < l {
                            m[[b, 0]] = 1.0;
                        }
                    }
                    Some(Rc::new(m))
                };
                VqaStepInput::Soft { rows, mask }
            })
            .collect();
        let vqa_out = vqa_model.forward_graph(&mut g, &vqa_bind, &feats, &steps);
        let generated_entropy = g.entropy_rows(vqa_out.probs);
        let mut e_t_raw = Array2::zeros((batch, 1));
        for (b, &e) in target_entropies.iter().enumerate() {
            e_t_raw[[b, 0]] = e;
        }
        let e_t_raw = g.constant(e_t_raw);
        let diff = g.sub(e_t_raw, generated_entropy);
        let sq = g.square(diff);
        let l_ent = g.mean_all(sq);
        let weighted = g.scale(l_ent, lambda);
        let loss = g.add(l_vqg, weighted);
        let value = g.value(loss)[[0, 0]];
        if !want_grads {
            return (value, None);
        }
        let grads = g.backward(loss);
        let (w_id, b_id) = model.out_proj_param_ids();
        let gw = grads
            .get(bind.node(w_id))
            .cloned()
            .unwrap_or_else(|| Array2::zeros(model.params().get(w_id).dim()));
        let gb = grads
            .get(bind.node(b_id))
            .cloned()
            .unwrap_or_else(|| Array2::zeros(model.params().get(b_id).dim()));
        (value, Some((gw, gb)))
    };

    let (_, analytic) = evaluate(&model, true);
    let (grad_w, grad_b) = analytic.unwrap();
    let (w_id, b_id) = model.out_proj_param_ids();
    let w_dim = model.params().get(w_id).dim();
    let b_dim = model.params().get(b_id).dim();

    let mut coord_rng = rng_stream(seed, "gradcheck.coords", 0);
    let h = 1e-5;
    let mut coords = Vec::with_capacity(num_coords);
    let mut max_rel: f64 = 0.0;
    let mut probe = model;
    for _ in 0..num_coords {
        let pick_bias = coord_rng.gen_range(0..8) == 0;
        let (param, i, j, a) = if pick_bias {
            let j = coord_rng.gen_range(0..b_dim.1);
            (b_id, 0, j, grad_b[[0, j]])
        } else {
            let i = coord_rng.gen_range(0..w_dim.0);
            let j = coord_rng.gen_range(0..w_dim.1);
            (w_id, i, j, grad_w[[i, j]])
        };
        let original = probe.params().get(param)[[i, j]];
        probe.params_mut().get_mut(param)[[i, j]] = original + h;
        let (plus, _) = evaluate(&probe, false);
        probe.params_mut().get_mut(param)[[i, j]] = original - h;
        let (minus, _) = evaluate(&probe, false);
        probe.params_mut().get_mut(param)[[i, j]] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        coords.push((a, numeric, rel));
    }
    GradientCheckReport {
        coords,
        max_relative_error: max_rel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_dataset, WorldConfig};
    use crate::vqa::{VqaConfig, VqaModel};

    fn dataset() -> Dataset {
        generate_dataset(
            17,
            &WorldConfig {
                scene_count: 10,
                questions_per_scene: 5,
                ..WorldConfig::default()
            },
        )
        .unwrap()
    }

    fn frozen_vqa(dataset: &Dataset, seed: u64) -> VqaModel {
        let mut m = VqaModel::new(
            VqaConfig {
                question_vocab_size: dataset.vocab.question.len(),
                answer_vocab_size: dataset.vocab.answer.len(),
                feature_dim: crate::synthworld::FEATURE_DIM,
                embed_dim: 10,
                hidden_dim: 12,
                attention_dim: 8,
                mlp_hidden_dim: 12,
            },
            seed,
        );
        m.freeze();
        m
    }

    fn tiny_train_config(regime: Regime, strategy: Strategy, seed: u64) -> TrainRegimeConfig {
        TrainRegimeConfig {
            regime,
            strategy,
            entropy_weight: 1.0,
            batch_size: 8,
            learning_rate: 0.003,
            max_iterations: 12,
            seed,
            noise_bound: 1.0,
            gumbel_temperature: 0.5,
            straight_through: false,
            pretrain_checkpoint: None,
            embed_dim: 10,
            hidden_dim: 14,
            max_length: 14,
            use_attention: true,
        }
    }

    #[test]
    fn noise_target_formula_and_clamping() {
        let max_e = (16.0f64).ln();
        assert!((noise_target_entropy(2.0, 0.37, max_e) - 2.37).abs() < 1e-12);
        assert_eq!(noise_target_entropy(0.3, -0.8, max_e), 0.0);
        assert_eq!(noise_target_entropy(max_e - 0.1, 0.5, max_e), max_e);
    }

    #[test]
    fn noise_strategy_keeps_source_and_respects_bounds() {
        let ds = dataset();
        let sample = RephraseSample::new(ds.questions[0].scene_id, ds.questions[0].tokens.clone(), 1.5);
        let mut rng = rng_stream(5, "test.noise", 0);
        let max_e = (16.0f64).ln();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for _ in 0..10_000 {
            let t = make_noise_target(&sample, 1.0, max_e, &mut rng);
            assert_eq!(t.target.as_ref().unwrap(), &sample.source);
            let e = t.target_entropy.unwrap();
            assert!((0.0..=max_e).contains(&e));
            lo = lo.min(e);
            hi = hi.max(e);
        }
        assert!(lo >= 0.5);
        assert!(hi <= 2.5);
        assert!(lo < 0.55);
        assert!(hi > 2.45);
    }

    #[test]
    fn sampling_strategy_is_uniform_over_alternatives() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 3);
        let index = ImageQuestionIndex::build(&ds).unwrap();
        let scene_id = ds.questions[0].scene_id;
        let scene_questions = index.questions_for(scene_id).to_vec();
        assert!(scene_questions.len() >= 3);
        let sample = RephraseSample::new(scene_id, ds.questions[scene_questions[0]].tokens.clone(), 0.8);

        let mut rng = rng_stream(6, "test.sampling", 0);
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        let trials = 4000;
        for _ in 0..trials {
            let t = make_sampling_target(&sample, &index, &ds, &vqa, &mut rng).unwrap();
            let target = t.target.unwrap();
            assert_ne!(target.tokens, sample.source.tokens);
            // Target entropy comes from the same prediction code path.
            let image = scene_to_features(ds.scene(scene_id).unwrap());
            let (dist, _) = vqa.predict(&image, QuestionInput::Tokens(&target)).unwrap();
            assert_eq!(t.target_entropy.unwrap(), entropy(&dist));
            *counts.entry(target.tokens).or_insert(0) += 1;
        }
        let alternatives = scene_questions
            .iter()
            .filter(|&&qi| ds.questions[qi].tokens.tokens != sample.source.tokens)
            .count();
        assert_eq!(counts.len(), alternatives);
        let p = 1.0 / alternatives as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (_, &count) in counts.iter() {
            let expected = trials as f64 * p;
            assert!(
                (count as f64 - expected).abs() <= 3.0 * sigma,
                "count {count} vs expected {expected} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn sampling_strategy_refuses_singleton_scene() {
        let mut ds = dataset();
        // Collapse one scene's questions down to a single entry.
        let scene_id = ds.scenes[1].scene_id;
        let keep = ds
            .questions
            .iter()
            .position(|q| q.scene_id == scene_id)
            .unwrap();
        let keep_q = ds.questions[keep].clone();
        ds.questions.retain(|q| q.scene_id != scene_id);
        ds.questions.push(keep_q.clone());
        let vqa = frozen_vqa(&ds, 3);
        let index = ImageQuestionIndex::build(&ds).unwrap();
        let sample = RephraseSample::new(scene_id, keep_q.tokens, 0.4);
        let mut rng = rng_stream(7, "test.singleton", 0);
        assert!(matches!(
            make_sampling_target(&sample, &index, &ds, &vqa, &mut rng),
            Err(TrainError::Strategy(_))
        ));
    }

    #[test]
    fn pretrain_never_touches_the_gumbel_path_and_reduces_loss() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 4);
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_train_config(Regime::Pretrain, Strategy::Sampling, 21);
        config.max_iterations = 60;
        let out = train(&ds, &vqa, &config, dir.path()).unwrap();
        assert_eq!(out.gumbel_path_evals, 0);
        assert!(out.loss_log.iter().all(|r| r.l_ent == 0.0));
        let head: f64 = out.loss_log[..10].iter().map(|r| r.l_vqg).sum::<f64>() / 10.0;
        let tail: f64 =
            out.loss_log[out.loss_log.len() - 10..].iter().map(|r| r.l_vqg).sum::<f64>() / 10.0;
        assert!(tail < head, "expected improvement: head {head}, tail {tail}");
        assert!(dir.path().join("loss_log.csv").exists());
    }

    #[test]
    fn training_is_reproducible_and_leaves_vqa_untouched() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 5);
        let before = vqa.digest();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = tiny_train_config(Regime::Scratch, Strategy::Sampling, 33);
        let a = train(&ds, &vqa, &config, d1.path()).unwrap();
        let b = train(&ds, &vqa, &config, d2.path()).unwrap();
        assert_eq!(a.final_digest, b.final_digest);
        assert!(a.gumbel_path_evals > 0);
        assert!(a.loss_log.iter().any(|r| r.l_ent != 0.0));
        assert_eq!(vqa.digest(), before);

        let c = train(
            &ds,
            &vqa,
            &TrainRegimeConfig {
                seed: 34,
                ..config
            },
            tempfile::tempdir().unwrap().path(),
        )
        .unwrap();
        assert_ne!(a.final_digest, c.final_digest);
    }

    #[test]
    fn finetune_requires_checkpoint_and_warm_starts() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 6);
        let config = tiny_train_config(Regime::Finetune, Strategy::Noise, 40);
        assert!(matches!(
            train(&ds, &vqa, &config, tempfile::tempdir().unwrap().path()),
            Err(TrainError::Config(_))
        ));

        let pre_dir = tempfile::tempdir().unwrap();
        let pre = train(
            &ds,
            &vqa,
            &tiny_train_config(Regime::Pretrain, Strategy::Noise, 40),
            pre_dir.path(),
        )
        .unwrap();
        let ft_dir = tempfile::tempdir().unwrap();
        let ft = train(
            &ds,
            &vqa,
            &TrainRegimeConfig {
                pretrain_checkpoint: Some(pre_dir.path().to_path_buf()),
                ..tiny_train_config(Regime::Finetune, Strategy::Noise, 40)
            },
            ft_dir.path(),
        )
        .unwrap();
        assert_ne!(ft.final_digest, pre.final_digest);
        assert_eq!(ft.meta.regime, "finetune");
    }

    #[test]
    fn zero_weight_finetune_skips_the_gumbel_path() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 9);
        let pre_dir = tempfile::tempdir().unwrap();
        train(
            &ds,
            &vqa,
            &tiny_train_config(Regime::Pretrain, Strategy::Sampling, 60),
            pre_dir.path(),
        )
        .unwrap();
        let mut config = tiny_train_config(Regime::Finetune, Strategy::Sampling, 60);
        config.entropy_weight = 0.0;
        config.pretrain_checkpoint = Some(pre_dir.path().to_path_buf());
        let out = train(&ds, &vqa, &config, tempfile::tempdir().unwrap().path()).unwrap();
        assert_eq!(out.gumbel_path_evals, 0);
        assert!(out.loss_log.iter().all(|r| r.l_ent == 0.0 && r.total == r.l_vqg));
    }

    #[test]
    fn greedy_output_entropy_equals_its_one_hot_soft_form() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 12);
        let model = crate::rephraser::RephraserModel::new(
            crate::rephraser::RephraserConfig {
                question_vocab_size: ds.vocab.question.len(),
                answer_vocab_size: ds.vocab.answer.len(),
                feature_dim: crate::synthworld::FEATURE_DIM,
                embed_dim: 10,
                hidden_dim: 14,
                max_length: 14,
                use_attention: true,
            },
            12,
        );
        let vocab = ds.vocab.question.len();
        for q in ds.questions.iter().take(5) {
            let image = scene_to_features(ds.scene(q.scene_id).unwrap());
            let hidden = model.encode(&vqa, &image, &q.tokens, 0.8).unwrap();
            let generated = model.decode_greedy(&hidden);
            let (hard, _) = vqa.predict(&image, QuestionInput::Tokens(&generated)).unwrap();
            let soft_rows: Vec<Vec<f64>> = generated
                .tokens
                .iter()
                .map(|&t| {
                    let mut row = vec![0.0; vocab];
                    row[t as usize] = 1.0;
                    row
                })
                .collect();
            let (soft, _) = vqa.predict(&image, QuestionInput::Soft(&soft_rows)).unwrap();
            assert!((entropy(&hard) - entropy(&soft)).abs() < 1e-6);
        }
    }

    #[test]
    fn rephrase_batch_fills_generated_fields_within_bounds() {
        let ds = dataset();
        let vqa = frozen_vqa(&ds, 7);
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &ds,
            &vqa,
            &tiny_train_config(Regime::Pretrain, Strategy::Sampling, 50),
            dir.path(),
        )
        .unwrap();
        let entropies = compute_source_entropies(&ds, &vqa).unwrap();
        let max_e = vqa.config.max_entropy();
        let samples: Vec<RephraseSample> = ds
            .questions
            .iter()
            .take(6)
            .enumerate()
            .map(|(i, q)| {
                let mut s = RephraseSample::new(q.scene_id, q.tokens.clone(), entropies[i]);
                s.target = Some(q.tokens.clone());
                s.target_entropy = Some(entropies[i]);
                s
            })
            .collect();
        let digest = vqa.digest();
        let filled = rephrase_batch(&out.model, &vqa, &ds, &samples).unwrap();
        assert_eq!(vqa.digest(), digest);
        for s in &filled {
            let e = s.generated_entropy.unwrap();
            assert!((0.0..=max_e).contains(&e));
            let q = s.generated.as_ref().unwrap();
            q.validate(ds.vocab.question.len()).unwrap();
        }
    }
}
