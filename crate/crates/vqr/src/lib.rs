//! Entropy-controlled rephrasing of visual questions on a synthetic
//! shapes world.
//!
//! The pipeline: a deterministic grid-world generator ([`synthworld`]),
//! an attention VQA model trained on it and then frozen ([`vqa`]), an
//! encoder-decoder rephraser conditioned on a target answer-entropy
//! ([`rephraser`]), training strategies and regimes ([`training`]),
//! text-similarity and entropy-error metrics ([`metrics`]), and the
//! experiment sweeps plus CLI ([`harness`]).

pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod synthworld;
pub mod training;
pub mod rephraser;
pub mod vqa;
