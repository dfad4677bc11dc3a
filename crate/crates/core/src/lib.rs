//! Energy-based classifier training and evaluation.
//!
//! Classifier logits `f(x)` define an energy `E(x) = -logsumexp f(x)`.
//! Models are trained with cross-entropy alone, with a sampled (SGLD)
//! energy-based objective, or with cross-entropy mixed with a penalty on
//! `||dE/dx||_2` at the training data, which needs second-order gradients.
//! The evaluation side covers calibration (ECE), out-of-distribution
//! scoring with AUROC, and PGD robustness sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod trainer;

pub use autodiff::{GradientMap, Tape, Tensor, Var};
pub use error::{Error, Result};
