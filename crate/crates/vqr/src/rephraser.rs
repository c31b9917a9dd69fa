//! The rephrasing network.
//!
//! The encoder fuses mean-pooled region features, attention-reweighted
//! region features (attention taken from the frozen answer model on the
//! source question), the recurrent encoding of the source question, and
//! the normalized target entropy. The decoder re-injects the target
//! entropy through its own fusion layer and generates tokens
//! recurrently.
//!
//! Three decoding modes share the decoder weights: teacher forcing for
//! the likelihood loss, free-running Gumbel-Softmax for the
//! differentiable entropy loss, and greedy argmax for evaluation.

use crate::checkpoint::{self, CheckpointError};
use crate::graph::{argmax, log_softmax_rows, softmax_rows, Graph, NodeId};
use crate::nn::{gumbel_noise, rng_stream, uniform_init, Binding, Linear, Lstm, ParamStore};
use crate::synthworld::{ImageFeatures, QuestionTokens, END_TOKEN, START_TOKEN};
use crate::vqa::VqaModel;
use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RephraserError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraserConfig {
    pub question_vocab_size: usize,
    pub answer_vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_length: usize,
    pub use_attention: bool,
}

impl RephraserConfig {
    pub fn max_entropy(&self) -> f64 {
        (self.answer_vocab_size as f64).ln()
    }
}

/// Loss weighting and relaxation knobs for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub entropy_weight: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            entropy_weight: 1.0,
            gumbel_temperature: 0.01,
            straight_through: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), RephraserError> {
        if self.gumbel_temperature <= 0.0 {
            return Err(RephraserError::Domain(
                "gumbel temperature must be positive".into(),
            ));
        }
        if self.entropy_weight < 0.0 {
            return Err(RephraserError::Domain(
                "entropy weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Sequence of probability rows over the question vocabulary produced
/// by the Gumbel decoding pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTokenSequence {
    pub rows: Vec<Vec<f64>>,
}

impl SoftTokenSequence {
    pub fn validate(&self, vocab_size: usize, max_length: usize) -> Result<(), RephraserError> {
        if self.rows.is_empty() || self.rows.len() > max_length {
            return Err(RephraserError::Domain(format!(
                "soft sequence length {} outside 1..={max_length}",
                self.rows.len()
            )));
        }
        for row in &self.rows {
            if row.len() != vocab_size {
                return Err(RephraserError::Shape(format!(
                    "soft row has {} entries, vocabulary has {vocab_size}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(RephraserError::Domain("soft row entry below zero".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(RephraserError::Domain(format!(
                    "soft row sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(())
    }

    /// Hard tokens obtained by per-row argmax.
    pub fn argmax_tokens(&self, max_length: usize) -> QuestionTokens {
        let tokens: Vec<u32> = self.rows.iter().map(|r| argmax(r) as u32).collect();
        QuestionTokens {
            tokens,
            max_length,
        }
    }
}

/// Encoder output handed to the decoding operations. Carries the
/// normalized target entropy so every decoder pass sees the same
/// conditioning that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHidden {
    pub state: Vec<f64>,
    pub target_entropy_norm: f64,
}

pub struct RephraserModel {
    pub config: RephraserConfig,
    params: ParamStore,
    embed: usize,
    encoder: Lstm,
    enc_fuse: Linear,
    dec_fuse: Linear,
    decoder: Lstm,
    out_proj: Linear,
}

impl RephraserModel {
    pub fn new(config: RephraserConfig, seed: u64) -> Self {
        let mut rng = rng_stream(seed, "rephraser.init", 0);
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
        let enc_in = if config.use_attention {
            2 * config.feature_dim + config.hidden_dim + 1
        } else {
            config.feature_dim + config.hidden_dim + 1
        };
        let enc_fuse = Linear::new(&mut params, &mut rng, "enc_fuse", enc_in, config.hidden_dim);
        let dec_fuse = Linear::new(
            &mut params,
            &mut rng,
            "dec_fuse",
            config.hidden_dim + 1,
            config.hidden_dim,
        );
        // The fused conditioning vector is re-fed beside the token
        // embedding at every decoding step, so the conditioning cannot
        // wash out of the recurrent state over long generations.
        let decoder = Lstm::new(
            &mut params,
            &mut rng,
            "decoder",
            config.embed_dim + config.hidden_dim,
            config.hidden_dim,
        );
        let out_proj = Linear::new(
            &mut params,
            &mut rng,
            "out_proj",
            config.hidden_dim,
            config.question_vocab_size,
        );
        Self {
            config,
            params,
            embed,
            encoder,
            enc_fuse,
            dec_fuse,
            decoder,
            out_proj,
        }
    }

    pub fn digest(&self) -> String {
        self.params.content_digest()
    }

    pub(crate) fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    pub(crate) fn out_proj_param_ids(&self) -> (usize, usize) {
        (self.out_proj.w, self.out_proj.b)
    }

    fn check_compatible(&self, vqa: &VqaModel) -> Result<(), RephraserError> {
        if vqa.config.question_vocab_size != self.config.question_vocab_size
            || vqa.config.answer_vocab_size != self.config.answer_vocab_size
            || vqa.config.feature_dim != self.config.feature_dim
        {
            return Err(RephraserError::Shape(
                "answer model and rephraser disagree on vocabulary or feature dimensions".into(),
            ));
        }
        Ok(())
    }

    /// Encode one visual question plus its target entropy (nats).
    pub fn encode(
        &self,
        vqa: &VqaModel,
        image: &ImageFeatures,
        source: &QuestionTokens,
        target_entropy: f64,
    ) -> Result<EncoderHidden, RephraserError> {
        self.check_compatible(vqa)?;
        if !vqa.is_frozen() {
            return Err(RephraserError::Contract(
                "encoder requires a frozen answer model".into(),
            ));
        }
        let max_e = self.config.max_entropy();
        if !target_entropy.is_finite() || !(0.0..=max_e).contains(&target_entropy) {
            return Err(RephraserError::Domain(format!(
                "target entropy {target_entropy} outside [0, {max_e}]"
            )));
        }
        if image.dim() != self.config.feature_dim {
            return Err(RephraserError::Shape(format!(
                "image features have dim {}, model expects {}",
                image.dim(),
                self.config.feature_dim
            )));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let vqa_bind = vqa.bind(&mut g, false);
        let feats = Rc::new(vec![image.data.clone()]);
        let e_t = Array2::from_elem((1, 1), target_entropy / max_e);
        let hidden = self.encode_graph(
            &mut g,
            &bind,
            vqa,
            &vqa_bind,
            &feats,
            &[&source.tokens],
            &e_t,
        );
        Ok(EncoderHidden {
            state: g.value(hidden).row(0).to_vec(),
            target_entropy_norm: target_entropy / max_e,
        })
    }

    /// Batched encoder forward inside an existing graph. `e_t_norm` is
    /// the `(B x 1)` column of targets already divided by `ln |A|`.
    pub(crate) fn encode_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        vqa: &VqaModel,
        vqa_bind: &Binding,
        feats: &Rc<Vec<Array2<f64>>>,
        sources: &[&[u32]],
        e_t_norm: &Array2<f64>,
    ) -> NodeId {
        let batch = feats.len();
        assert_eq!(sources.len(), batch);
        assert_eq!(e_t_norm.dim(), (batch, 1));

        // Recurrent encoding of the source question.
        let embed_node = bind.node(self.embed);
        let steps = crate::vqa::hard_question_steps(sources);
        let (mut h, mut c) = self.encoder.zero_state(g, batch);
        for step in &steps {
            let crate::vqa::VqaStepInput::Hard { ids, mask } = step else {
                unreachable!("source questions are hard tokens")
            };
            let x = g.gather_rows(embed_node, ids.clone());
            let mask_node = mask.as_ref().map(|m| g.constant(m.as_ref().clone()));
            let (h2, c2) = self.encoder.step(g, bind, x, (h, c), mask_node);
            h = h2;
            c = c2;
        }

        // Mean-pooled region features are input data, not parameters.
        let d = self.config.feature_dim;
        let mut mean = Array2::zeros((batch, d));
        for (b, f) in feats.iter().enumerate() {
            let r = f.nrows() as f64;
            for row in f.outer_iter() {
                for (j, &v) in row.iter().enumerate() {
                    mean[[b, j]] += v / r;
                }
            }
        }
        let mean_node = g.constant(mean);
        let e_t_node = g.constant(e_t_norm.clone());

        let fused_in = if self.config.use_attention {
            let vqa_out = vqa.forward_graph(g, vqa_bind, feats, &steps);
            let att_pooled = g.region_pool(vqa_out.attention, feats.clone());
            g.concat_cols(&[mean_node, att_pooled, h, e_t_node])
        } else {
            g.concat_cols(&[mean_node, h, e_t_node])
        };
        self.enc_fuse.forward(g, bind, fused_in)
    }

    /// Decoder conditioning: the encoder hidden re-fused with the
    /// normalized target entropy. The result both initializes the
    /// recurrent state and accompanies every step input.
    pub(crate) fn decoder_init(
        &self,
        g: &mut Graph,
        bind: &Binding,
        hidden: NodeId,
        e_t_norm: NodeId,
    ) -> DecoderState {
        let joint = g.concat_cols(&[hidden, e_t_norm]);
        let cond = self.dec_fuse.forward(g, bind, joint);
        let batch = g.value(cond).nrows();
        let c0 = g.constant(Array2::zeros((batch, self.config.hidden_dim)));
        DecoderState {
            h: cond,
            c: c0,
            cond,
        }
    }

    fn decoder_step(
        &self,
        g: &mut Graph,
        bind: &Binding,
        state: &mut DecoderState,
        token_embedding: NodeId,
    ) -> NodeId {
        let x = g.concat_cols(&[token_embedding, state.cond]);
        let (h, c) = self.decoder.step(g, bind, x, (state.h, state.c), None);
        state.h = h;
        state.c = c;
        self.out_proj.forward(g, bind, h)
    }

    /// Teacher-forced logits inside an existing graph: step `i` consumes
    /// target token `i - 1` (start token at step 0) and the returned
    /// vector has one `(B x V)` logits node per step up to the longest
    /// target; shorter rows are padded and must be masked in the loss.
    pub(crate) fn decode_teacher_forced_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        hidden: NodeId,
        e_t_norm: NodeId,
        targets: &[&[u32]],
    ) -> Vec<NodeId> {
        let batch = targets.len();
        let max_len = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let embed_node = bind.node(self.embed);
        let mut state = self.decoder_init(g, bind, hidden, e_t_norm);
        let mut step_logits = Vec::with_capacity(max_len);
        for i in 0..max_len {
            let ids: Vec<usize> = (0..batch)
                .map(|b| {
                    if i == 0 {
                        START_TOKEN as usize
                    } else {
                        targets[b].get(i - 1).map(|&t| t as usize).unwrap_or(0)
                    }
                })
                .collect();
            let x = g.gather_rows(embed_node, Rc::new(ids));
            step_logits.push(self.decoder_step(g, bind, &mut state, x));
        }
        step_logits
    }

    /// Teacher-forced decoding for one sample: per-step vocabulary
    /// logits, one row per target token.
    pub fn decode_teacher_forced(
        &self,
        hidden: &EncoderHidden,
        target: &QuestionTokens,
    ) -> Result<Vec<Vec<f64>>, RephraserError> {
        if target.tokens.is_empty() {
            return Err(RephraserError::Domain("empty target".into()));
        }
        if target.tokens.len() > self.config.max_length {
            return Err(RephraserError::Domain(format!(
                "target length {} exceeds max length {}",
                target.tokens.len(),
                self.config.max_length
            )));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let (hid, e_t) = self.hidden_nodes(&mut g, hidden);
        let steps = self.decode_teacher_forced_graph(&mut g, &bind, hid, e_t, &[&target.tokens]);
        Ok(steps.iter().map(|&s| g.value(s).row(0).to_vec()).collect())
    }

    fn hidden_nodes(&self, g: &mut Graph, hidden: &EncoderHidden) -> (NodeId, NodeId) {
        let h = g.constant(
            Array2::from_shape_vec((1, hidden.state.len()), hidden.state.clone()).unwrap(),
        );
        let e = g.constant(Array2::from_elem((1, 1), hidden.target_entropy_norm));
        (h, e)
    }

    /// Free-running Gumbel decoding inside an existing graph. Every
    /// step draws one `(B x V)` noise matrix from `rng` (also for rows
    /// that already finished, keeping the draw order input-independent).
    /// A sample's rows end at its first end-token argmax or at
    /// `max_length`.
    pub(crate) fn decode_gumbel_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        hidden: NodeId,
        e_t_norm: NodeId,
        tau: f64,
        straight_through: bool,
        rng: &mut ChaCha12Rng,
    ) -> GumbelDecode {
        let batch = g.value(hidden).nrows();
        let vocab = self.config.question_vocab_size;
        let embed_node = bind.node(self.embed);
        let mut state = self.decoder_init(g, bind, hidden, e_t_norm);
        let start_ids = Rc::new(vec![START_TOKEN as usize; batch]);
        let mut x = g.gather_rows(embed_node, start_ids);
        let mut soft_rows = Vec::new();
        let mut lengths = vec![0usize; batch];
        let mut ended = vec![false; batch];
        for _ in 0..self.config.max_length {
            let logits = self.decoder_step(g, bind, &mut state, x);
            let mut noise = Array2::zeros((batch, vocab));
            for b in 0..batch {
                for v in 0..vocab {
                    noise[[b, v]] = gumbel_noise(rng);
                }
            }
            let soft = g.gumbel_softmax_rows(logits, &noise, tau, straight_through);
            soft_rows.push(soft);
            for b in 0..batch {
                if !ended[b] {
                    lengths[b] += 1;
                    let row = g.value(soft).row(b);
                    if argmax(row.as_slice().unwrap()) == END_TOKEN as usize {
                        ended[b] = true;
                    }
                }
            }
            if ended.iter().all(|&e| e) {
                break;
            }
            x = g.matmul(soft, embed_node);
        }
        GumbelDecode { soft_rows, lengths }
    }

    /// Free-running Gumbel decoding for one sample.
    pub fn decode_gumbel(
        &self,
        hidden: &EncoderHidden,
        tau: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<SoftTokenSequence, RephraserError> {
        if tau <= 0.0 {
            return Err(RephraserError::Domain(
                "gumbel temperature must be positive".into(),
            ));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let (hid, e_t) = self.hidden_nodes(&mut g, hidden);
        let out = self.decode_gumbel_graph(&mut g, &bind, hid, e_t, tau, false, rng);
        let rows = out
            .soft_rows
            .iter()
            .take(out.lengths[0])
            .map(|&r| g.value(r).row(0).to_vec())
            .collect();
        Ok(SoftTokenSequence { rows })
    }

    /// Greedy argmax decoding: stops at the end token or at
    /// `max_length`, where the final slot is forced to the end token so
    /// the result is always a well-formed question.
    pub fn decode_greedy(&self, hidden: &EncoderHidden) -> QuestionTokens {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let (hid, e_t) = self.hidden_nodes(&mut g, hidden);
        let embed_node = bind.node(self.embed);
        let mut state = self.decoder_init(&mut g, &bind, hid, e_t);
        let mut x = g.gather_rows(embed_node, Rc::new(vec![START_TOKEN as usize]));
        let mut tokens = Vec::new();
        for i in 0..self.config.max_length {
            let logits = self.decoder_step(&mut g, &bind, &mut state, x);
            let mut token = argmax(g.value(logits).row(0).as_slice().unwrap()) as u32;
            if i == self.config.max_length - 1 {
                token = END_TOKEN;
            }
            tokens.push(token);
            if token == END_TOKEN {
                break;
            }
            x = g.gather_rows(embed_node, Rc::new(vec![token as usize]));
        }
        QuestionTokens {
            tokens,
            max_length: self.config.max_length,
        }
    }
}

pub(crate) struct GumbelDecode {
    pub soft_rows: Vec<NodeId>,
    pub lengths: Vec<usize>,
}

pub(crate) struct DecoderState {
    h: NodeId,
    c: NodeId,
    cond: NodeId,
}

/// Temperature-relaxed softmax over perturbed logits:
/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>, RephraserError> {
    if tau <= 0.0 {
        return Err(RephraserError::Domain(
            "gumbel temperature must be positive".into(),
        ));
    }
    if logits.len() != noise.len() {
        return Err(RephraserError::Shape(format!(
            "logits have {} entries, noise has {}",
            logits.len(),
            noise.len()
        )));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &n)| (l + n) / tau)
        .collect();
    let m = Array2::from_shape_vec((1, perturbed.len()), perturbed).unwrap();
    Ok(softmax_rows(&m).row(0).to_vec())
}

/// Mean negative log-likelihood of the target tokens under per-step
/// vocabulary logits.
pub fn vqg_loss(step_logits: &[Vec<f64>], target: &QuestionTokens) -> Result<f64, RephraserError> {
    if step_logits.len() != target.tokens.len() {
        return Err(RephraserError::Shape(format!(
            "{} logit rows for {} target tokens",
            step_logits.len(),
            target.tokens.len()
        )));
    }
    let n = target.tokens.len() as f64;
    let mut total = 0.0;
    for (row, &tok) in step_logits.iter().zip(&target.tokens) {
        if tok as usize >= row.len() {
            return Err(RephraserError::Shape(format!(
                "target token {tok} outside logits of width {}",
                row.len()
            )));
        }
        let m = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
        total -= log_softmax_rows(&m)[[0, tok as usize]];
    }
    Ok(total / n)
}

/// Squared error between target and generated entropy.
pub fn entropy_loss(target_entropy: f64, generated_entropy: f64) -> f64 {
    let d = target_entropy - generated_entropy;
    d * d
}

/// Weighted sum of the likelihood and entropy losses.
pub fn total_loss(l_vqg: f64, l_ent: f64, entropy_weight: f64) -> f64 {
    l_vqg + entropy_weight * l_ent
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RephraserMeta {
    pub config: RephraserConfig,
    pub entropy_weight: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    pub regime: String,
    pub strategy: String,
    pub seed: u64,
}

pub fn save_model(
    model: &RephraserModel,
    dir: impl AsRef<Path>,
    meta: &RephraserMeta,
    optimizer: Option<&crate::nn::Adam>,
) -> Result<(), RephraserError> {
    checkpoint::save_checkpoint(
        dir,
        "rephraser",
        false,
        serde_json::to_value(meta).expect("meta serializes"),
        &model.params,
        optimizer,
    )?;
    Ok(())
}

pub struct LoadedRephraser {
    pub model: RephraserModel,
    pub meta: RephraserMeta,
    pub optimizer: Option<checkpoint::LoadedOptimizerState>,
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<LoadedRephraser, RephraserError> {
    let loaded = checkpoint::load_checkpoint(&dir)?;
    if loaded.manifest.kind != "rephraser" {
        return Err(RephraserError::Checkpoint(CheckpointError::Format(format!(
            "checkpoint kind {:?} is not a rephraser model",
            loaded.manifest.kind
        ))));
    }
    let meta: RephraserMeta = serde_json::from_value(loaded.manifest.meta.clone())
        .map_err(|e| RephraserError::Checkpoint(CheckpointError::Format(format!("bad meta: {e}"))))?;
    let mut model = RephraserModel::new(meta.config.clone(), 0);
    checkpoint::restore_params(&mut model.params, &loaded.params)?;
    Ok(LoadedRephraser {
        model,
        meta,
        optimizer: loaded.optimizer,
    })
}
