//! Allocation-only building blocks for a convolutional, recurrent and
//! attention-pooled speech emotion recognizer.
//!
//! Everything here is pure computation over in-memory buffers: a small
//! reverse-mode autodiff engine, log-Mel feature extraction, training-time
//! augmentation, the classifier itself, its optimizer and training loop, and
//! the stratified cross-validation harness. File formats, audio decoding and
//! the command-line driver live in the `emonet` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
