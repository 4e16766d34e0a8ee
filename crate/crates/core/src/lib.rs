//! Streaming motion prediction with low-dimensional selective state-space models.
//!
//! This crate is the numeric core of `motionssm`: a small float64 tensor
//! library with tape-based reverse-mode differentiation, the selective SSM
//! scan (sequential, chunked-streaming and prefix-scan variants), the model
//! zoo (SSM predictor plus LSTM / Transformer baselines), synthetic task
//! generators for 16-channel joint-space trials, an AdamW training loop and
//! the offline/online evaluation machinery.
//!
//! Everything here is pure computation over heap buffers — no files, no
//! clocks, no threads — so the crate is `no_std` (with `alloc`). File
//! formats, the CLI and wall-clock measurements live in the companion
//! `motionssm-cli` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod rng;
pub mod ssm;
pub mod tape;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use rng::Trng;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
