//! Joint teacher-student training and distillation for small transformer
//! encoders: a self-contained f64 autodiff tape, the encoder stack, shared
//! attentive-pooling/dense heads, the distillation losses with gradient
//! momentum mixing, task pipelines (classification, recommendation,
//! retrieval) and ranking metrics.
//!
//! The crate is `no_std` + `alloc`; everything that touches the filesystem
//! or the clock lives in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod check;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use tape::{GradientSet, Tape, Var};
pub use tensor::Tensor;
