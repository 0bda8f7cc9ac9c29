//! Domain-specific neuron masks for multi-source domain generalization.
//!
//! A small, deterministic laboratory: an MLP whose task layers carry one
//! learned binary mask per source domain, trained with straight-through
//! gradients and a pairwise soft-IoU overlap penalty, alongside the
//! Aggregate and Multi-Headed baselines, synthetic multi-domain data with a
//! Bayes oracle, and the evaluation suite (ensembling modes, known-domain
//! prediction, IoU and neuron-category analyses, λ sweeps).
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`optim`], [`rng`]: the numeric kernel.
//! - [`mask`]: mask logits, sampling, straight-through gradients, soft IoU,
//!   L1 sparsity, discretization and Jaccard analysis.
//! - [`data`]: synthetic suites, splits, CSV ingestion, Bayes oracle.
//! - [`network`], [`train`]: the backbone and training loops.
//! - [`eval`]: inference modes, reports and sweeps.
//! - [`gradcheck`]: finite-difference verification of the loss gradients.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod network;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
