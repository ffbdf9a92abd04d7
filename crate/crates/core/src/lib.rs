//! Multimodal contrastive binding with weight-interpolation patching.

pub mod cli;
pub mod encoders;
pub mod experiment;
pub mod error;
pub mod inference;
pub mod numcore;
pub mod objective;
pub mod patching;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
