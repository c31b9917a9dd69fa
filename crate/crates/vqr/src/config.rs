//! Experiment configuration: one structured file carrying the world,
//! answer-model, rephraser-training, and sweep settings. Every command
//! copies the effective configuration into its output directory.
//!
//! The desk preset is the pinned default. The paper preset keeps the
//! original hyperparameters (hidden 512, batch 64, learning rate
//! 0.0005, temperature 0.01, 44000 iterations, the raw delta grid);
//! the answer vocabulary stays the synthetic world's 16 entries, since
//! the templates define the answer space.

use crate::synthworld::WorldConfig;
use crate::training::{Regime, Strategy, TrainRegimeConfig};
use crate::vqa::VqaTrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Answer vocabulary size that the original delta grid was designed
/// against; the desk grid rescales by the max-entropy ratio.
pub const PAPER_ANSWER_VOCAB: usize = 3129;

pub const PAPER_DELTA_GRID: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

pub const PAPER_LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ratio between the desk answer vocabulary's maximum entropy and the
/// grid's original design scale.
pub fn entropy_rescale_factor(answer_vocab_size: usize) -> f64 {
    (answer_vocab_size as f64).ln() / (PAPER_ANSWER_VOCAB as f64).ln()
}

/// One rescaled delta unit: the grid step of 1.0 nats mapped onto the
/// desk answer vocabulary.
pub fn rescaled_delta_unit(answer_vocab_size: usize) -> f64 {
    entropy_rescale_factor(answer_vocab_size)
}

pub fn desk_delta_grid(answer_vocab_size: usize) -> Vec<f64> {
    let s = entropy_rescale_factor(answer_vocab_size);
    PAPER_DELTA_GRID.iter().map(|d| d * s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDefaults {
    pub entropy_weight: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fine-tuning runs at this rate instead; the warm-started model
    /// needs a gentler step than from-scratch training.
    pub finetune_learning_rate: f64,
    pub max_iterations: u32,
    pub noise_bound: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_length: usize,
    pub use_attention: bool,
}

impl Default for TrainDefaults {
    fn default() -> Self {
        Self {
            entropy_weight: 0.5,
            batch_size: 32,
            learning_rate: 0.002,
            finetune_learning_rate: 0.0005,
            max_iterations: 3000,
            noise_bound: 1.0,
            gumbel_temperature: 0.5,
            straight_through: true,
            embed_dim: 32,
            hidden_dim: 64,
            max_length: 20,
            use_attention: true,
        }
    }
}

impl TrainDefaults {
    pub fn regime_config(
        &self,
        regime: Regime,
        strategy: Strategy,
        seed: u64,
        pretrain_checkpoint: Option<PathBuf>,
    ) -> TrainRegimeConfig {
        TrainRegimeConfig {
            regime,
            strategy,
            entropy_weight: self.entropy_weight,
            batch_size: self.batch_size,
            learning_rate: match regime {
                Regime::Finetune => self.finetune_learning_rate,
                _ => self.learning_rate,
            },
            max_iterations: self.max_iterations,
            seed,
            noise_bound: self.noise_bound,
            gumbel_temperature: self.gumbel_temperature,
            straight_through: self.straight_through,
            pretrain_checkpoint,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_length: self.max_length,
            use_attention: self.use_attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Delta values in nats, sorted ascending.
    pub delta_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.delta_grid.is_empty() {
            return Err(ConfigError::Invalid("delta grid is empty".into()));
        }
        if self.delta_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(ConfigError::Invalid(
                "delta grid must be sorted ascending".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Every `eval_stride`-th scene forms the evaluation split.
    pub eval_stride: usize,
    pub world: WorldConfig,
    pub vqa: VqaTrainConfig,
    pub train: TrainDefaults,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// The pinned desk-scale default configuration.
    pub fn desk_default() -> Self {
        let world = WorldConfig::default();
        let answer_vocab = 16;
        Self {
            seed: 0,
            eval_stride: 12,
            world,
            vqa: VqaTrainConfig::default(),
            train: TrainDefaults::default(),
            sweep: SweepConfig {
                delta_grid: desk_delta_grid(answer_vocab),
                lambda_grid: PAPER_LAMBDA_GRID.to_vec(),
                regimes: vec![Regime::Pretrain, Regime::Scratch, Regime::Finetune],
                strategies: vec![Strategy::Noise, Strategy::Sampling],
                seeds: vec![1, 2, 3],
                output_dir: PathBuf::from("out"),
            },
        }
    }

    /// The original hyperparameters, kept selectable as a named preset.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk_default();
        c.train.entropy_weight = 1.0;
        c.train.batch_size = 64;
        c.train.max_iterations = 44_000;
        c.train.learning_rate = 0.0005;
        c.train.finetune_learning_rate = 0.0005;
        c.train.hidden_dim = 512;
        c.train.embed_dim = 256;
        c.train.gumbel_temperature = 0.01;
        c.train.straight_through = false;
        c.sweep.delta_grid = PAPER_DELTA_GRID.to_vec();
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sweep.validate()?;
        if self.eval_stride < 2 {
            return Err(ConfigError::Invalid(
                "eval_stride must be at least 2 so both splits are nonempty".into(),
            ));
        }
        if (self.world.scene_count as usize) < self.eval_stride {
            return Err(ConfigError::Invalid(
                "scene_count must be at least eval_stride".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(config: &ExperimentConfig, path: impl AsRef<Path>) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(config).map_err(|e| ConfigError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
