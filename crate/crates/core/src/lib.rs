//! Self-supervised representation learning on synthetic data-generating
//! processes.
//!
//! The crate provides, end to end:
//! dense-tensor reverse-mode autodiff, the synthetic generative process and
//! its noise regimes, encoder/head/editor models, the contrastive and
//! latent-variable training objectives, training/evaluation orchestration
//! (linear probes, disentanglement scoring, density export), and the
//! verification suites behind the `verify` command.

pub mod check;
pub mod config;
pub mod dgp;
pub mod error;
pub mod eval;
pub mod la;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Version string recorded into run directories for reproducibility.
pub const CODE_VERSION: &str = concat!("adassl-", env!("CARGO_PKG_VERSION"));
