//! Interactive segmentation refinement by click-driven test-time adaptation.
//!
//! A small encoder-decoder ([`segnet::MiniLink`]) predicts per-pixel class
//! probabilities from an image plus click-guidance channels. Each user click
//! is used twice: as guidance at inference, and as a sparse training target
//! for a short fine-tuning run anchored to the model's initial prediction
//! ([`adapt`]). The [`simulator`] replays this loop with a synthetic
//! annotator on generated scenes ([`synthgen`]).

pub mod adapt;
pub mod annotation;
pub mod error;
pub mod metrics;
pub mod raster;
pub mod segnet;
pub mod simulator;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
