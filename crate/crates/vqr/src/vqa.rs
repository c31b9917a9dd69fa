//! The answer model: attention over image regions conditioned on a
//! question, producing an answer distribution whose entropy measures
//! the question's ambiguity.
//!
//! Questions enter either as hard token ids or as soft distributions
//! over the question vocabulary; a soft row is consumed as its expected
//! embedding (row times embedding table), which keeps the whole model
//! differentiable with respect to the soft input. A hard token is
//! exactly equivalent to its one-hot soft form.
//!
//! After training the model is frozen: a content digest of all
//! parameters is recorded and every later pipeline stage can assert it
//! never changes.

use crate::checkpoint::{self, CheckpointError};
use crate::graph::{argmax, entropy_slice, Graph, NodeId};
use crate::nn::{rng_stream, uniform_init, Adam, Binding, Linear, Lstm, ParamStore};
use crate::synthworld::{scene_to_features, Dataset, ImageFeatures, QuestionTokens};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("model is frozen")]
    FrozenModel,
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: u32 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Probability vector over the answer vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, VqaError> {
        if probs.iter().any(|&p| p < 0.0) {
            return Err(VqaError::Domain("answer probability below zero".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(VqaError::Domain(format!(
                "answer distribution sums to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn top_index(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Normalized attention weights over image regions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(weights: Vec<f64>) -> Result<Self, VqaError> {
        if weights.iter().any(|&w| w < 0.0) {
            return Err(VqaError::Domain("attention weight below zero".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(VqaError::Domain(format!(
                "attention sums to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Answer-distribution entropy in nats. Zero-probability entries
/// contribute zero; the result lies in `[0, ln |A|]`.
pub fn entropy(dist: &AnswerDistribution) -> f64 {
    entropy_slice(&dist.probs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaConfig {
    pub question_vocab_size: usize,
    pub answer_vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub mlp_hidden_dim: usize,
}

impl VqaConfig {
    pub fn max_entropy(&self) -> f64 {
        (self.answer_vocab_size as f64).ln()
    }
}

/// Question input to [`VqaModel::predict`].
pub enum QuestionInput<'a> {
    Tokens(&'a QuestionTokens),
    /// One probability row over the question vocabulary per step.
    Soft(&'a [Vec<f64>]),
}

pub struct VqaModel {
    pub config: VqaConfig,
    params: ParamStore,
    embed: usize,
    encoder: Lstm,
    attn_feat: usize,
    attn_query: usize,
    attn_score: usize,
    head1: Linear,
    head2: Linear,
    frozen: bool,
    frozen_digest: Option<String>,
}

impl VqaModel {
    pub fn new(config: VqaConfig, seed: u64) -> Self {
        let mut rng = rng_stream(seed, "vqa.init", 0);
        let mut params = ParamStore::new();
        let embed = params.add(
            "embed",
            uniform_init(&mut rng, config.question_vocab_size, config.embed_dim, 0.1),
        );
        let encoder = Lstm::new(
            &mut params,
            &mut rng,
            "encoder",
            config.embed_dim,
            config.hidden_dim,
        );
        let fb = 1.0 / (config.feature_dim as f64).sqrt();
        let attn_feat = params.add(
            "attn.feat",
            uniform_init(&mut rng, config.feature_dim, config.attention_dim, fb),
        );
        let qb = 1.0 / (config.hidden_dim as f64).sqrt();
        let attn_query = params.add(
            "attn.query",
            uniform_init(&mut rng, config.hidden_dim, config.attention_dim, qb),
        );
        let sb = 1.0 / (config.attention_dim as f64).sqrt();
        let attn_score = params.add(
            "attn.score",
            uniform_init(&mut rng, config.attention_dim, 1, sb),
        );
        let head1 = Linear::new(
            &mut params,
            &mut rng,
            "head1",
            config.feature_dim + config.hidden_dim,
            config.mlp_hidden_dim,
        );
        let head2 = Linear::new(
            &mut params,
            &mut rng,
            "head2",
            config.mlp_hidden_dim,
            config.answer_vocab_size,
        );
        Self {
            config,
            params,
            embed,
            encoder,
            attn_feat,
            attn_query,
            attn_score,
            head1,
            head2,
            frozen: false,
            frozen_digest: None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze the model: record the parameter digest. Idempotent.
    pub fn freeze(&mut self) {
        if !self.frozen {
            self.frozen = true;
            self.frozen_digest = Some(self.params.content_digest());
        }
    }

    /// Current content digest of all parameters.
    pub fn digest(&self) -> String {
        self.params.content_digest()
    }

    pub fn frozen_digest(&self) -> Option<&str> {
        self.frozen_digest.as_deref()
    }

    /// Verify that a frozen model still has its recorded parameters.
    pub fn verify_frozen(&self) -> Result<(), VqaError> {
        match &self.frozen_digest {
            None => Err(VqaError::Domain("model was never frozen".into())),
            Some(d) if *d == self.digest() => Ok(()),
            Some(d) => Err(VqaError::Domain(format!(
                "frozen digest {d} no longer matches parameters"
            ))),
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }


    /// Full forward pass inside an existing graph.
    ///
    /// `feats` holds one `(regions x feature_dim)` matrix per batch row;
    /// `steps` are the question time steps. Returns the softmax answer
    /// probabilities, their logs, and the attention weights.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        feats: &Rc<Vec<Array2<f64>>>,
        steps: &[VqaStepInput],
    ) -> VqaForward {
        let batch = feats.len();
        assert!(!steps.is_empty(), "question must have at least one step");
        let regions = feats[0].nrows();

        let embed_node = bind.node(self.embed);
        let (mut h, mut c) = self.encoder.zero_state(g, batch);
        for step in steps {
            let (x, mask) = match step {
                VqaStepInput::Hard { ids, mask } => {
                    (g.gather_rows(embed_node, ids.clone()), mask.clone())
                }
                VqaStepInput::Soft { rows, mask } => {
                    (g.matmul(*rows, embed_node), mask.clone())
                }
            };
            let mask_node = mask.map(|m| g.constant(m.as_ref().clone()));
            let (h2, c2) = self.encoder.step(g, bind, x, (h, c), mask_node);
            h = h2;
            c = c2;
        }

        // Attention scores per region: w_s . tanh(F W_f + q W_q).
        let mut flat = Array2::zeros((batch * regions, self.config.feature_dim));
        for (b, f) in feats.iter().enumerate() {
            for r in 0..regions {
                for d in 0..self.config.feature_dim {
                    flat[[b * regions + r, d]] = f[[r, d]];
                }
            }
        }
        let flat_node = g.constant(flat);
        let fw = g.matmul(flat_node, bind.node(self.attn_feat));
        let qw = g.matmul(h, bind.node(self.attn_query));
        let qw_rep = g.repeat_rows(qw, regions);
        let pre = g.add(fw, qw_rep);
        let act = g.tanh(pre);
        let scores = g.matmul(act, bind.node(self.attn_score));
        let scores = g.reshape(scores, batch, regions);
        let attention = g.softmax_rows(scores);
        let context = g.region_pool(attention, feats.clone());

        let joint = g.concat_cols(&[context, h]);
        let hidden = self.head1.forward(g, bind, joint);
        let hidden = g.tanh(hidden);
        let logits = self.head2.forward(g, bind, hidden);
        let probs = g.softmax_rows(logits);
        let log_probs = g.log_softmax_rows(logits);
        VqaForward {
            probs,
            log_probs,
            attention,
        }
    }

    /// Predict the answer distribution and attention for one visual
    /// question. Hard tokens and their one-hot soft encoding follow the
    /// identical computation.
    pub fn predict(
        &self,
        image: &ImageFeatures,
        question: QuestionInput,
    ) -> Result<(AnswerDistribution, AttentionMap), VqaError> {
        if image.dim() != self.config.feature_dim {
            return Err(VqaError::Shape(format!(
                "image features have dim {}, model expects {}",
                image.dim(),
                self.config.feature_dim
            )));
        }
        let steps = self.validate_question(&question)?;
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let feats = Rc::new(vec![image.data.clone()]);
        let inputs = steps_to_inputs(&mut g, steps);
        let out = self.forward_graph(&mut g, &bind, &feats, &inputs);
        let probs = g.value(out.probs).row(0).to_vec();
        let weights = g.value(out.attention).row(0).to_vec();
        Ok((AnswerDistribution::new(probs)?, AttentionMap::new(weights)?))
    }

    fn validate_question(&self, question: &QuestionInput) -> Result<Vec<StepSpec>, VqaError> {
        let vocab = self.config.question_vocab_size;
        match question {
            QuestionInput::Tokens(q) => {
                if q.tokens.is_empty() {
                    return Err(VqaError::Domain("empty question".into()));
                }
                if let Some(&bad) = q.tokens.iter().find(|&&t| t as usize >= vocab) {
                    return Err(VqaError::Domain(format!(
                        "token id {bad} outside vocabulary of {vocab}"
                    )));
                }
                Ok(q.tokens
                    .iter()
                    .map(|&t| StepSpec::Hard(t as usize))
                    .collect())
            }
            QuestionInput::Soft(rows) => {
                if rows.is_empty() {
                    return Err(VqaError::Domain("empty soft question".into()));
                }
                for row in rows.iter() {
                    if row.len() != vocab {
                        return Err(VqaError::Shape(format!(
                            "soft row has {} entries, vocabulary has {vocab}",
                            row.len()
                        )));
                    }
                    if row.iter().any(|&p| p < 0.0) {
                        return Err(VqaError::Domain("soft row has a negative entry".into()));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(VqaError::Domain(format!(
                            "soft row sums to {sum}, expected 1 within 1e-6"
                        )));
                    }
                }
                Ok(rows.iter().map(|r| StepSpec::Soft(r.clone())).collect())
            }
        }
    }

    /// Train on the dataset's ground-truth labels by cross-entropy.
    /// Scenes at positions `heldout_stride - 1 (mod heldout_stride)` are
    /// held out and only used for the reported mean KL divergence.
    pub fn fit(&mut self, dataset: &Dataset, config: &VqaTrainConfig) -> Result<VqaTrainStats, VqaError> {
        if self.frozen {
            return Err(VqaError::FrozenModel);
        }
        if dataset.questions.is_empty() {
            return Err(VqaError::Domain("dataset has no questions".into()));
        }
        let features: Vec<Rc<Array2<f64>>> = dataset
            .scenes
            .iter()
            .map(|s| Rc::new(scene_to_features(s).data))
            .collect();
        let scene_pos: std::collections::HashMap<u32, usize> = dataset
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scene_id, i))
            .collect();
        let is_heldout = |scene_idx: usize| -> bool {
            config.heldout_stride > 0 && scene_idx % config.heldout_stride == config.heldout_stride - 1
        };
        let mut train_idx = Vec::new();
        let mut heldout_idx = Vec::new();
        for (i, q) in dataset.questions.iter().enumerate() {
            let pos = scene_pos[&q.scene_id];
            if is_heldout(pos) {
                heldout_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        if train_idx.is_empty() {
            return Err(VqaError::Domain("no training questions after holdout".into()));
        }

        let mut adam = Adam::new(config.learning_rate, &self.params);
        let mut batch_rng = rng_stream(config.seed, "vqa.batch", 0);
        let mut last_loss = f64::NAN;
        for iteration in 0..config.iterations {
            let batch: Vec<usize> = (0..config.batch_size)
                .map(|_| train_idx[batch_rng.gen_range(0..train_idx.len())])
                .collect();
            let mut g = Graph::new();
            let bind = self.bind(&mut g, true);
            let feats = Rc::new(
                batch
                    .iter()
                    .map(|&qi| features[scene_pos[&dataset.questions[qi].scene_id]].as_ref().clone())
                    .collect::<Vec<_>>(),
            );
            let token_rows: Vec<&[u32]> =
                batch.iter().map(|&qi| dataset.questions[qi].tokens.tokens.as_slice()).collect();
            let steps = hard_question_steps(&token_rows);
            let out = self.forward_graph(&mut g, &bind, &feats, &steps);

            let mut labels = Array2::zeros((batch.len(), self.config.answer_vocab_size));
            for (b, &qi) in batch.iter().enumerate() {
                for (a, &p) in dataset.questions[qi].label.answer_distribution.iter().enumerate() {
                    labels[[b, a]] = p;
                }
            }
            let labels = g.constant(labels);
            let weighted = g.mul(out.log_probs, labels);
            let per_sample = g.sum_rows(weighted);
            let mean = g.mean_all(per_sample);
            let loss = g.scale(mean, -1.0);
            last_loss = g.value(loss)[[0, 0]];
            if !last_loss.is_finite() {
                return Err(VqaError::Diverged { iteration });
            }
            let grads = g.backward(loss);
            adam.step(&mut self.params, &bind, &grads);
        }

        let mut kl_sum = 0.0;
        for &qi in &heldout_idx {
            let q = &dataset.questions[qi];
            let scene = dataset.scene(q.scene_id).expect("validated scene");
            let image = scene_to_features(scene);
            let (dist, _) = self.predict(&image, QuestionInput::Tokens(&q.tokens))?;
            kl_sum += kl_divergence(&q.label.answer_distribution, dist.probs());
        }
        let heldout_mean_kl = if heldout_idx.is_empty() {
            0.0
        } else {
            kl_sum / heldout_idx.len() as f64
        };
        Ok(VqaTrainStats {
            final_train_loss: last_loss,
            heldout_mean_kl,
            heldout_count: heldout_idx.len(),
            iterations: config.iterations,
        })
    }

    #[cfg(test)]
    fn zero_answer_head(&mut self) {
        let w = self.params.get(self.head2.w).dim();
        self.params.set(self.head2.w, Array2::zeros(w));
        let b = self.params.get(self.head2.b).dim();
        self.params.set(self.head2.b, Array2::zeros(b));
    }
}

/// `KL(label || predicted)` in nats, skipping zero-mass label entries.
pub fn kl_divergence(label: &[f64], predicted: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&l, &p) in label.iter().zip(predicted) {
        if l > 0.0 {
            kl += l * (l.ln() - p.max(1e-300).ln());
        }
    }
    kl
}

pub(crate) struct VqaForward {
    pub probs: NodeId,
    pub log_probs: NodeId,
    pub attention: NodeId,
}

pub(crate) enum VqaStepInput {
    Hard {
        ids: Rc<Vec<usize>>,
        mask: Option<Rc<Array2<f64>>>,
    },
    Soft {
        rows: NodeId,
        mask: Option<Rc<Array2<f64>>>,
    },
}

enum StepSpec {
    Hard(usize),
    Soft(Vec<f64>),
}

fn steps_to_inputs(g: &mut Graph, steps: Vec<StepSpec>) -> Vec<VqaStepInput> {
    steps
        .into_iter()
        .map(|s| match s {
            StepSpec::Hard(id) => VqaStepInput::Hard {
                ids: Rc::new(vec![id]),
                mask: None,
            },
            StepSpec::Soft(row) => {
                let n = row.len();
                let rows = g.constant(Array2::from_shape_vec((1, n), row).unwrap());
                VqaStepInput::Soft { rows, mask: None }
            }
        })
        .collect()
}

/// Build padded hard-token steps with per-step active masks for a batch
/// of variable-length questions. Padded positions feed token 0 but are
/// masked out of the recurrent state.
pub(crate) fn hard_question_steps(token_rows: &[&[u32]]) -> Vec<VqaStepInput> {
    let batch = token_rows.len();
    let max_len = token_rows.iter().map(|t| t.len()).max().unwrap_or(0);
    let all_equal = token_rows.iter().all(|t| t.len() == max_len);
    let mut steps = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let ids: Vec<usize> = token_rows
            .iter()
            .map(|row| row.get(t).map(|&x| x as usize).unwrap_or(0))
            .collect();
        let mask = if all_equal {
            None
        } else {
            let mut m = Array2::zeros((batch, 1));
            for (b, row) in token_rows.iter().enumerate() {
                if t < row.len() {
                    m[[b, 0]] = 1.0;
                }
            }
            Some(Rc::new(m))
        };
        steps.push(VqaStepInput::Hard {
            ids: Rc::new(ids),
            mask,
        });
    }
    steps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub mlp_hidden_dim: usize,
    pub batch_size: usize,
    pub iterations: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub heldout_stride: usize,
}

impl Default for VqaTrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 32,
            mlp_hidden_dim: 96,
            batch_size: 32,
            iterations: 10000,
            learning_rate: 0.002,
            seed: 0,
            heldout_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainStats {
    pub final_train_loss: f64,
    pub heldout_mean_kl: f64,
    pub heldout_count: usize,
    pub iterations: u32,
}

/// Construct and train a fresh model on the dataset, ready to freeze.
pub fn train_vqa(dataset: &Dataset, config: &VqaTrainConfig) -> Result<(VqaModel, VqaTrainStats), VqaError> {
    let model_config = VqaConfig {
        question_vocab_size: dataset.vocab.question.len(),
        answer_vocab_size: dataset.vocab.answer.len(),
        feature_dim: crate::synthworld::FEATURE_DIM,
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        attention_dim: config.attention_dim,
        mlp_hidden_dim: config.mlp_hidden_dim,
    };
    let mut model = VqaModel::new(model_config, config.seed);
    let stats = model.fit(dataset, config)?;
    Ok((model, stats))
}

#[derive(Serialize, Deserialize)]
struct VqaMeta {
    config: VqaConfig,
    frozen_digest: Option<String>,
    train_stats: Option<VqaTrainStats>,
}

pub fn save_model(
    model: &VqaModel,
    dir: impl AsRef<Path>,
    train_stats: Option<&VqaTrainStats>,
) -> Result<(), VqaError> {
    let meta = VqaMeta {
        config: model.config.clone(),
        frozen_digest: model.frozen_digest.clone(),
        train_stats: train_stats.cloned(),
    };
    checkpoint::save_checkpoint(
        dir,
        "vqa",
        model.frozen,
        serde_json::to_value(meta).expect("meta serializes"),
        &model.params,
        None,
    )?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<VqaModel, VqaError> {
    let loaded = checkpoint::load_checkpoint(&dir)?;
    if loaded.manifest.kind != "vqa" {
        return Err(VqaError::Checkpoint(CheckpointError::Format(format!(
            "checkpoint kind {:?} is not a vqa model",
            loaded.manifest.kind
        ))));
    }
    let meta: VqaMeta = serde_json::from_value(loaded.manifest.meta.clone())
        .map_err(|e| VqaError::Checkpoint(CheckpointError::Format(format!("bad meta: {e}"))))?;
    let mut model = VqaModel::new(meta.config, 0);
    checkpoint::restore_params(&mut model.params, &loaded.params)?;
    model.frozen = loaded.manifest.frozen;
    model.frozen_digest = meta.frozen_digest;
    if model.frozen {
        let digest = model.digest();
        match &model.frozen_digest {
            Some(d) if *d == digest => {}
            Some(d) => {
                return Err(VqaError::Checkpoint(CheckpointError::Corruption(format!(
                    "frozen digest {d} does not match loaded parameters {digest}"
                ))))
            }
            None => {
                return Err(VqaError::Checkpoint(CheckpointError::Corruption(
                    "frozen model missing its digest".into(),
                )))
            }
        }
    }
    Ok(model)
}
