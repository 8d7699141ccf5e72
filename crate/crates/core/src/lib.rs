//! Image-token prompting for class-incremental learning.
//!
//! A small vision transformer backbone is pretrained once and frozen. Each
//! prompted layer hands its self-attention keys to a prompt pool; prompts are
//! weighted per image token by key similarity and added to the attention keys
//! and values in the same forward pass. The crate also carries the classic
//! query-key and attention-weighted prompt selectors, a synthetic dataset
//! generator, and a harness for class-incremental schedules and metrics.

mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod head;
pub mod numerics;
pub mod prompts;
pub mod snapshot;
pub mod verify;

pub use error::{Error, Result};
