//! Saliency-guided training on a from-scratch reverse-mode tensor engine.
//!
//! The crate bundles a small autodiff engine ([`autodiff`]), saliency-driven
//! image augmentation ([`augment`]), the alignment and contrastive objectives
//! ([`loss`]), a compact CNN ([`model`]), a synthetic shortcut-learning
//! benchmark ([`synth`]) and the training/evaluation loop ([`train`]).

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod report;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
