//! Brief-but-comprehensive explanations of black-box classifiers.
//!
//! A stochastic explainer network scores cognitive chunks (image patches,
//! token groups) per instance; `k` chunks are drawn with a Gumbel-softmax
//! top-k relaxation and the masked input is fed to an approximator trained
//! to reproduce the black-box output. The training objective trades
//! approximation likelihood against a KL compressiveness term. Fidelity
//! metrics quantify how faithfully the masked view explains the black box.

pub mod blackbox;
pub mod chunker;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod explain;
pub mod nets;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
