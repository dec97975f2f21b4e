//! Federated LoRA fine-tuning simulator with round-matched, gradient-aligned
//! adapter initialization and full-rank server aggregation.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, exact and randomized SVD, rank-`r` factorization.
//! - [`lora`]: adapters `W + s B A` with `s = alpha / sqrt(r)`.
//! - [`model`]: softmax regression and a two-layer ReLU network with manual gradients.
//! - [`data`]: synthetic and CSV datasets, IID and Dirichlet partitioning.
//! - [`client`]: the per-round client pipeline and the baseline variants.
//! - [`server`]: full-rank aggregation, rank-`r` projection, backbone merge.
//! - [`orchestrator`]: rounds, evaluation, metrics, checkpoints, discrepancy checks.
//! - [`cli`]: the `fedsmooth` command line.

pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod orchestrator;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
