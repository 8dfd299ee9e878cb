//! Parameter-efficient speaker adaptation for a multi-speaker
//! non-autoregressive acoustic model.
//!
//! The crate provides:
//! - a small reverse-mode autodiff tape ([`graph`]) over dense matrices,
//! - the acoustic model itself ([`model`]): phoneme encoder and mel decoder
//!   built from feed-forward transformer layers with conditional layer
//!   normalization, convolutional pitch/duration predictors and a length
//!   regulator,
//! - speaker representation ([`speaker`]): lookup embeddings, a style-token
//!   reference encoder and the weighted-mean embedding for new speakers,
//! - parameter-efficient strategies ([`peft`]): adapter, LoRA, prefix
//!   tuning and BitFit, with delta checkpoints over a shared frozen base,
//! - monotonic alignment ([`align`]): beta-binomial prior, forward-sum loss
//!   and Viterbi durations,
//! - a deterministic synthetic multi-speaker corpus generator ([`synth`]),
//! - training loops, Adam, and objective metrics ([`train`], [`metrics`]),
//! - the binary checkpoint/corpus container ([`checkpoint`]).

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod peft;
pub mod speaker;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{AdaptConfig, LossWeights, ModelConfig, PeftConfig, Precision, PretrainConfig, RunConfig, Strategy};
pub use error::{Error, Result};
pub use tensor::{Dtype, Mat, Scalar};
