//! Files, command line and experiment drivers around `fadpnet-core`.
//!
//! Configuration is one TOML file with `model`, `train`, `data`, `profile`
//! and `spectrum` tables. Checkpoints are safetensors containers. Every
//! table the harness emits is CSV.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod image_io;
pub mod latency;
pub mod spectrum;

pub use error::{HarnessError, Result};
