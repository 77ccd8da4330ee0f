//! Template-ensemble transformer for online tracking, run on synthetic
//! feature-map sequences.
//!
//! Historical templates are mutually reinforced by a self-attention encoder;
//! a decoder carries their features and Gaussian target masks to each search
//! patch. Responses come from either a Siamese correlation or a
//! discriminative correlation filter.

pub mod attention;
pub mod binfmt;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod keyval;
pub mod memory;
pub mod models;
pub mod synth;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use harness::{
    iou, run_ablation, track, Pipeline, TrackResult, TrackerConfig, TransformerMode,
};
pub use synth::{generate, SceneSpec};
