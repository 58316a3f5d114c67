//! Reinforcement-learning fine-tuning of small diffusion models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod plot;
pub mod pretrain;
pub mod rewards;
pub mod rl;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
