//! Sparse activation for Gated-MLP inference.
//!
//! The crate implements dense and sparse forward passes of a single Gated-MLP
//! block under three magnitude criteria (CATS on `|h|`, M-CountDown on `|u|`,
//! D-CountDown on `|s|`), calibrated thresholds, trainable mask predictors,
//! blocked mask-gated executors with traffic counters, a closed-form FLOPs
//! and memory-traffic model, and mask-agreement analysis.

pub mod analysis;
pub mod blocked_exec;
pub mod calibration;
pub mod costmodel;
pub mod error;
pub mod gated_mlp;
mod mask;
pub mod numerics;
pub mod predictor;
pub mod sparsity;

pub use error::{Error, Result};
pub use gated_mlp::{Activation, ForwardTrace, GatedMlpLayer};
pub use mask::ActivationMask;
pub use numerics::{Mat32, Rng};
pub use sparsity::{Mode, SparsityConfig, SparsityMethod};
