//! Anchor-free spatio-temporal action detection at desk scale.
//!
//! Frames pass through a small convolutional extractor; a point head
//! predicts actor centres, box shapes and knot points on every frame, while a
//! time-wise attention block feeds a 3-D classification head. Per-frame boxes
//! are linked into action tubes with a Viterbi pass and scored with frame-
//! and video-level mAP.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod losses;
pub mod outputs;
pub mod targets;
pub mod decode;
pub mod twa;
pub mod linking;
pub mod eval;
pub mod dataset;
pub mod synth;
pub mod model;
pub mod train;
pub mod pipeline;
pub mod gradsuite;
pub mod config;
pub mod ablation;
pub mod visualize;
pub mod cli;
