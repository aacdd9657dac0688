//! Differentiable channel pruning with annealing-relaxed channel indicators.
//!
//! The crate contains a small reverse-mode autodiff engine, desk-scale
//! residual and depthwise-separable networks with indicator hooks, the
//! structural regularizers, the bi-level indicator search, pruned-model
//! derivation, design-space baselines and the data pipeline behind the
//! `anneal-prune` command-line tool.

pub mod arch;
pub mod config;
pub mod data;
pub mod derive;
pub mod design_space;
pub mod error;
pub mod flops;
pub mod indicators;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod regularizers;
pub mod search;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
