//! Seal2Real desk-scale pipeline.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`seal`]: parametric seal rendering, geometric perturbation, and
//!   alpha compositing onto documents with exact labels.
//! - [`document`]: procedural document backgrounds and the real-proxy
//!   generator used when no scanned corpus is available.
//! - [`autodiff`] / [`nn`]: the f64 tensor graph and layer/optimizer
//!   utilities every trainable model in the crate is built on.
//! - [`diffusion`]: noise schedule, compact autoencoder, text-conditioned
//!   noise predictor, and the reverse-process sampler.
//! - [`stage1`]: prompt-prior learning (learn real/forgery prompt
//!   embeddings, finetune the denoiser, alternating).
//! - [`stage2`]: forger network training with prompt-prior + content
//!   losses and alternating adversarial finetuning.
//! - [`dataset`]: paired/unpaired dataset assembly, manifests, splits.
//! - [`eval`]: downstream segmentation / identification / recognition
//!   harness and the two-dataset comparison report.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod document;
pub mod eval;
pub mod glyphs;
pub mod imgio;
pub mod nn;
pub mod rng;
pub mod seal;
pub mod stage1;
pub mod stage2;
pub mod steplog;

pub use autodiff::{Graph, NodeId};
