//! Multi-camera people occupancy detection.
//!
//! Every ground cell of a discretized scene is scored by cropping the
//! projection of a person-sized cylinder out of each camera view, embedding
//! each crop with a small convolutional network, and classifying the
//! concatenated embeddings with a joint head. The crate also carries the
//! pieces needed to train and evaluate that pipeline end to end without
//! external data: a synthetic multi-view scene generator, input-dropout
//! augmentation, hard-negative synthesis, score-weighted NMS and the
//! MODA/MODP family of detection metrics.

pub mod augment;
pub mod error;
pub mod forest;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod multiview;
pub mod nms;
pub mod nnet;
pub mod synthscene;

pub use error::{Error, Result};
