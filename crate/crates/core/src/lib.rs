//! Reconstruction-guided few-shot classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] holds images, class splits, folder ingestion and the synthetic generator.
//! * [`masking`] produces grid-aligned block masks and applies them.
//! * [`network`] is the trainable encoder / bottleneck / decoder / embedding head with
//!   hand-written backward passes.
//! * [`losses`] implements the prototypical, triplet, reconstruction and cross-pass
//!   variance objectives together with their gradients.
//! * [`episodic`] samples N-way K-shot episodes and runs the Monte-Carlo passes.
//! * [`trainer`] drives optimisation, checkpointing and evaluation.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod episodic;
pub mod error;
pub mod losses;
pub mod masking;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Result, RgfsError};
pub use tensor::Tensor3;
