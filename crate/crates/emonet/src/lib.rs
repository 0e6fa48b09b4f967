//! File formats, dataset ingestion and the command-line driver around
//! [`emonet_core`].

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod format;
pub mod wav;

pub use error::{Error, Result};
