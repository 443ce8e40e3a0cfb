//! Missing-modality semantic segmentation with shared and modality-specific
//! encoders, cross-modal feature alignment and diagnostics.

pub mod alignment;
pub mod config;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod fusion_decoder;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
