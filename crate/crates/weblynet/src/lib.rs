//! Co-teaching of multiple neural networks for learning multi-label
//! classifiers from noisily labeled ("webly labeled"), weakly labeled
//! sequence data.
//!
//! The crate trains K networks jointly: each network carries its own
//! binary cross-entropy loss against the (possibly wrong) labels, and
//! every pair of networks is tied together by a weighted symmetric
//! generalized KL divergence between their outputs. The divergence lets
//! the networks teach each other where the labels cannot be trusted.
//!
//! Modules:
//! - [`tensor`]: dense `f64` tensors and a reverse-mode differentiation tape
//! - [`networks`]: the convolutional segment network and the MLP on
//!   transferred features, plus checkpointing
//! - [`losses`]: per-network BCE, pairwise divergence, combined objective
//! - [`optim`]: Adam and the joint/self training loops
//! - [`data`]: dataset model, synthetic benchmark generator with
//!   class-conditional label noise, manifest/feature-file ingestion
//! - [`eval`]: per-class average precision and MAP reports
//! - [`pipeline`]: the end-to-end experiment runner behind the CLI

pub mod data;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod tensor;
