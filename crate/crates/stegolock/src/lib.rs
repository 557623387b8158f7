//! Key-based active authorization for image classifiers.
//!
//! A model owner trains one steganographic codec per dataset and, for each
//! licensed user, a protected classifier that only answers well on images
//! carrying that user's key. The pieces:
//!
//! - [`key`]: binary user keys, tiling, block voting, Hamming tracing and
//!   the owner-side registry.
//! - [`stego`]: the encoder/decoder/critic codec and its adversarial
//!   training loop.
//! - [`data`]: datasets and the benign/authorized/noise domain triple.
//! - [`mi`]: the CLUB mutual-information bound and its variational helper.
//! - [`experts`]: baseline, real expert, MI-decorrelated fake experts, and
//!   the tag-dispatched mixture.
//! - [`distill`]: obfuscation distillation into the deployable student.
//! - [`verify`]: key tracing, black-box verification, endpoints.
//! - [`attacks`]: fine-tuning, pruning, transfer and reverse-engineering
//!   attacks for robustness evaluation.
//! - [`pipeline`]: run directories, resumable stages, reports.

pub mod attacks;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod experts;
pub mod iqa;
pub mod key;
pub mod mi;
pub mod nn;
pub mod pipeline;
pub mod stego;
pub mod verify;

pub use error::{Error, Result};
