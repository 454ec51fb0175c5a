//! Weakly-supervised whole-slide image classification with gated-attention
//! multiple instance learning.
//!
//! The pipeline runs slide raster → tissue mask → patch grid → per-patch
//! features (FBAG files) → gated-attention MIL network trained under a k-fold
//! test/validation rotation → pooled ROC metrics and attention heatmaps.

pub mod adam;
pub mod cli;
pub mod data;
pub mod error;
pub mod fbag;
pub mod features;
pub mod heatmap;
pub mod jsonfmt;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod split;
pub mod synth;
pub mod tiler;
pub mod train;

pub use error::{Error, Result};
