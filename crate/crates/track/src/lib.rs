//! Siamese visual tracker with progressive feature fusion.
//!
//! A template patch cut from the first frame and a search patch cut around
//! the previous position both run through a shared convolutional backbone.
//! Three gated coarse representations per branch are correlated channel by
//! channel, fused by tiered cross-attention over the correlation tokens, and
//! decoded by anchor-free heads into a score map and per-cell box distances.
//!
//! The crate covers the full loop around that model: training on box-labelled
//! sequences, frame-by-frame inference, one-pass benchmark evaluation, and a
//! synthetic sequence generator for self-contained end-to-end runs.

pub mod backbone;
pub mod bbox;
pub mod coarse;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod heads;
pub mod hmg;
mod layers;
pub mod model;
pub mod patch;
pub mod synth;
pub mod tracker;
pub mod train;

pub use bbox::BBox;
pub use config::{AblationConfig, HmgConfig, ModelConfig, TrackConfig, TrainConfig};
pub use error::{Result, TrackError};
pub use model::Model;
pub use tracker::Tracker;
