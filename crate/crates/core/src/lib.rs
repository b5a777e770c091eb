//! Few-shot class-incremental learning (FSCIL) with a lightweight
//! multi-input multi-output ensemble backbone.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`tensor`] — a small reverse-mode differentiation substrate (dense
//!   tensors, a computation tape, SGD) verified against finite differences.
//! - [`ensemble`] — the two-branch ensemble network: per-branch input
//!   convolutions, a shared residual trunk, CutMix-style feature mixing and
//!   cosine-classifier heads.
//! - [`patchmix`] — spatial-aware background augmentation on a grid with a
//!   bowl-shaped cell distribution that protects the image centre.
//! - [`ssl`] — mask-consistent paired views and the
//!   variance/invariance/covariance self-supervised loss.
//! - [`protocol`] — session scheduling, exemplar replay, classifier
//!   expansion and the incremental evaluation metrics.
//! - [`data`] — dataset loaders, the synthetic benchmark generator and
//!   session splitting.
//! - [`config`] / [`runner`] — experiment configuration and orchestration
//!   used by the command-line driver.

pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod par;
pub mod patchmix;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
